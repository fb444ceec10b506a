"""Training objectives.

    loss_clean = l_mel_clean + l_duration + l_pitch + l_energy
    loss_total = loss_clean + l_mel_noisy + l_aug

Mel terms are mean squared error, variance terms mean absolute error, all
sums unweighted.  Padding is excluded from every mean.
"""

import math
from dataclasses import asdict, dataclass

import torch

from styler.adversarial import adversarial_loss
from styler.errors import InvalidInput, TrainingDiverged

PARTS = ("l_mel_clean", "l_duration", "l_pitch", "l_energy", "l_mel_noisy", "l_aug")


@dataclass
class LossBreakdown:
    l_mel_clean: float
    l_duration: float
    l_pitch: float
    l_energy: float
    l_mel_noisy: float
    l_aug: float
    loss_clean: float
    loss_total: float

    def to_dict(self):
        return asdict(self)


def _masked_mean(x, mask, per_item):
    if mask is None:
        return x.reshape(x.shape[0], -1).mean(dim=1) if per_item else x.mean()
    m = mask.to(x.dtype)
    while m.dim() < x.dim():
        m = m.unsqueeze(-1)
    m = m.expand_as(x)
    if per_item:
        dims = tuple(range(1, x.dim()))
        return (x * m).sum(dim=dims) / m.sum(dim=dims).clamp(min=1.0)
    return (x * m).sum() / m.sum().clamp(min=1.0)


def mel_loss(pred, target, mask=None, per_item=False):
    """Mean squared error over valid elements; ``mask`` marks valid frames."""
    if pred.shape != target.shape:
        raise InvalidInput(f"mel shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return _masked_mean((pred - target) ** 2, mask, per_item)


def variance_loss(pred, target, mask=None, per_item=False):
    """Mean absolute error over valid phonemes."""
    if pred.shape != target.shape:
        raise InvalidInput(f"lengths differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return _masked_mean((pred - target).abs(), mask, per_item)


def duration_loss(duration_log, target_frames, mask=None, per_item=False):
    return variance_loss(duration_log, torch.log1p(target_frames.to(duration_log.dtype)), mask, per_item)


def total_loss(l_mel_clean, l_duration, l_pitch, l_energy, l_mel_noisy=None, l_aug=None):
    """Combine the parts; returns (differentiable total, LossBreakdown)."""
    zero = torch.zeros((), dtype=l_mel_clean.dtype)
    l_mel_noisy = zero if l_mel_noisy is None else l_mel_noisy
    l_aug = zero if l_aug is None else l_aug
    # accumulate in double so the reported totals are the exact sums of the reported parts
    wide = [t.double() for t in (l_mel_clean, l_duration, l_pitch, l_energy, l_mel_noisy, l_aug)]
    clean = wide[0] + wide[1] + wide[2] + wide[3]
    total = clean + wide[4] + wide[5]
    values = dict(
        l_mel_clean=float(l_mel_clean.detach()),
        l_duration=float(l_duration.detach()),
        l_pitch=float(l_pitch.detach()),
        l_energy=float(l_energy.detach()),
        l_mel_noisy=float(l_mel_noisy.detach()),
        l_aug=float(l_aug.detach()),
        loss_clean=float(clean.detach()),
        loss_total=float(total.detach()),
    )
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"non-finite loss terms: {bad}")
    return total, LossBreakdown(**values)


def compute_losses(outputs, batch, noise_modeling=True):
    """Loss terms for one training batch.

    Predictor and clean-decoding targets always come from the clean features;
    the noisy-decoding target is the encoder-side mel (augmented or not).
    """
    phone_mask = outputs.encodings.phone_mask
    frame_mask = torch.arange(outputs.mel_clean.shape[1])[None, :] < outputs.frame_lengths[:, None]
    T = outputs.mel_clean.shape[1]
    parts = dict(
        l_mel_clean=mel_loss(outputs.mel_clean, batch.clean_mel[:, :T], frame_mask),
        l_duration=duration_loss(outputs.predictions.duration_log, batch.durations, phone_mask),
        l_pitch=variance_loss(outputs.predictions.pitch, batch.pitch_target, phone_mask),
        l_energy=variance_loss(outputs.predictions.energy, batch.energy_target, phone_mask),
    )
    if noise_modeling:
        parts["l_mel_noisy"] = mel_loss(outputs.mel_noisy, batch.noisy_target_mel[:, :T], frame_mask)
        parts["l_aug"] = adversarial_loss(outputs.aug_logits, batch.labels)
    return total_loss(**parts)


def per_item_losses(outputs, batch, noise_modeling=True):
    """Per-item loss terms ([B] each), used to check padding neutrality."""
    phone_mask = outputs.encodings.phone_mask
    T = outputs.mel_clean.shape[1]
    frame_mask = torch.arange(T)[None, :] < outputs.frame_lengths[:, None]
    out = dict(
        l_mel_clean=mel_loss(outputs.mel_clean, batch.clean_mel[:, :T], frame_mask, per_item=True),
        l_duration=duration_loss(outputs.predictions.duration_log, batch.durations, phone_mask, per_item=True),
        l_pitch=variance_loss(outputs.predictions.pitch, batch.pitch_target, phone_mask, per_item=True),
        l_energy=variance_loss(outputs.predictions.energy, batch.energy_target, phone_mask, per_item=True),
    )
    if noise_modeling:
        out["l_mel_noisy"] = mel_loss(outputs.mel_noisy, batch.noisy_target_mel[:, :T], frame_mask, per_item=True)
        labels = torch.as_tensor(batch.labels, dtype=torch.long)
        out["l_aug"] = sum(
            torch.nn.functional.cross_entropy(lg, labels, reduction="none") for lg in outputs.aug_logits.values()
        )
    return out
