"""Gradient reversal and augmentation classifiers for domain adversarial training."""

import torch
import torch.nn as nn
import torch.nn.functional as F

ORIGINAL = 0
AUGMENTED = 1

# encodings that get an augmentation classifier; the noise encoding never does
DAT_FACTORS = ("duration", "pitch", "energy")


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lambd * grad_output, None


def grl(x, lambd=1.0):
    return _GradReverse.apply(x, float(lambd))


class GradientReversal(nn.Module):
    """Identity forward; multiplies the incoming gradient by ``-lambd`` backward."""

    def __init__(self, lambd=1.0):
        super().__init__()
        self.lambd = float(lambd)

    def forward(self, x):
        return grl(x, self.lambd)


def grl_lambda_at(step, base=1.0, warmup_steps=0):
    if warmup_steps <= 0:
        return base
    return base * min(1.0, step / warmup_steps)


class AugmentationClassifier(nn.Module):
    """Mean-pool over phonemes, FC + LayerNorm + ReLU, FC to two logits."""

    def __init__(self, in_dim, hidden=256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, z, mask=None):
        # z: [B, N, D] (or [N, D]); returns [B, 2] (or [2])
        squeeze = z.dim() == 2
        if squeeze:
            z = z.unsqueeze(0)
        if mask is None:
            pooled = z.mean(dim=1)
        else:
            m = mask.unsqueeze(-1).to(z.dtype)
            pooled = (z * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)
        logits = self.fc2(F.relu(self.norm(self.fc1(pooled))))
        return logits.squeeze(0) if squeeze else logits


class DomainAdversarialHeads(nn.Module):
    """One reversal + classifier per attached factor."""

    def __init__(self, hidden_dim, classifier_hidden=256, factors=DAT_FACTORS):
        super().__init__()
        if "noise" in factors:
            raise ValueError("the noise encoding must not carry an adversarial head")
        self.factors = tuple(factors)
        self.reversal = GradientReversal()
        self.classifiers = nn.ModuleDict(
            {f: AugmentationClassifier(hidden_dim, classifier_hidden) for f in self.factors}
        )

    def forward(self, encodings, mask, lambd=1.0):
        self.reversal.lambd = float(lambd)
        return {f: self.classifiers[f](self.reversal(encodings[f]), mask) for f in self.factors}


def adversarial_loss(logits_per_factor, labels):
    """Sum over factors of the two-class cross entropy (mean over batch items).

    ``logits_per_factor`` is a list (or dict values) of [B, 2] or [2] tensors.
    """
    if isinstance(logits_per_factor, dict):
        logits_per_factor = list(logits_per_factor.values())
    labels = torch.as_tensor(labels, dtype=torch.long)
    total = None
    for logits in logits_per_factor:
        lg = logits if logits.dim() == 2 else logits.unsqueeze(0)
        lb = labels.reshape(-1).expand(lg.shape[0]) if labels.numel() == 1 else labels
        term = F.cross_entropy(lg, lb)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total
