"""Duration, pitch and energy predictors plus the decoder-side variance embeddings."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from styler.errors import DataError, InvalidInput


@dataclass
class PredictorOutput:
    duration_log: torch.Tensor  # [B, N]
    pitch: torch.Tensor  # [B, N]
    energy: torch.Tensor  # [B, N]


@dataclass
class VarianceTargets:
    duration: np.ndarray  # [N] int
    pitch: np.ndarray  # [N]
    energy: np.ndarray  # [N]


class TextProjection(nn.Module):
    """Rank-limited text path: hidden -> bottleneck (Z_t') -> hidden."""

    def __init__(self, hidden_dim, bottleneck_dim=4):
        super().__init__()
        self.down = nn.Linear(hidden_dim, bottleneck_dim)
        self.up = nn.Linear(bottleneck_dim, hidden_dim)
        self.bottleneck_dim = bottleneck_dim

    def downsample(self, z_t):
        return self.down(z_t)

    def forward(self, z_t):
        return self.up(self.down(z_t))

    def composite_matrix(self):
        # the linear part of forward(); its rank is bounded by bottleneck_dim
        return self.up.weight @ self.down.weight


class VariancePredictorTrunk(nn.Module):
    def __init__(self, in_dim, filter_dim=256, kernel=3, dropout=0.5):
        super().__init__()
        pad = (kernel - 1) // 2
        self.conv1 = nn.Conv1d(in_dim, filter_dim, kernel, padding=pad)
        self.norm1 = nn.LayerNorm(filter_dim)
        self.conv2 = nn.Conv1d(filter_dim, filter_dim, kernel, padding=pad)
        self.norm2 = nn.LayerNorm(filter_dim)
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(filter_dim, 1)

    def forward(self, x, mask):
        keep = mask.unsqueeze(-1).to(x.dtype)
        h = x * keep
        h = self.dropout(self.norm1(F.relu(self.conv1(h.transpose(1, 2)).transpose(1, 2)))) * keep
        h = self.dropout(self.norm2(F.relu(self.conv2(h.transpose(1, 2)).transpose(1, 2)))) * keep
        return self.out(h).squeeze(-1) * mask.to(x.dtype)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise InvalidInput(f"encoding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


class DurationPredictor(nn.Module):
    """Log-domain duration per phoneme from Z_d + projected text."""

    def __init__(self, cfg):
        super().__init__()
        self.text_proj = TextProjection(cfg.hidden_dim, cfg.text_bottleneck_dim)
        self.trunk = VariancePredictorTrunk(
            cfg.hidden_dim, cfg.predictor_filter_dim, cfg.predictor_kernel, cfg.predictor_dropout
        )

    def forward(self, z_d, z_t, mask):
        _check_pair(z_d, z_t)
        return self.trunk(z_d + self.text_proj(z_t), mask)


class EnergyPredictor(DurationPredictor):
    pass


class PitchPredictor(nn.Module):
    """Pitch per phoneme with speaker injection on both sides of the up-projection.

    The speaker encoding is projected to the bottleneck width and added to
    ``z_down`` before the pitch encoder's up-projection (``upsample``), and
    projected to the hidden width and added after it.
    """

    def __init__(self, cfg, bottleneck_dim):
        super().__init__()
        self.bottleneck_dim = bottleneck_dim
        self.speaker_down = nn.Linear(cfg.hidden_dim, bottleneck_dim)
        self.speaker_up = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.text_proj = TextProjection(cfg.hidden_dim, cfg.text_bottleneck_dim)
        self.trunk = VariancePredictorTrunk(
            cfg.hidden_dim, cfg.predictor_filter_dim, cfg.predictor_kernel, cfg.predictor_dropout
        )

    def speaker_pitch_encoding(self, z_down, z_s, upsample, mask):
        if z_down.shape[-1] != self.bottleneck_dim:
            raise InvalidInput(f"pitch bottleneck must have width {self.bottleneck_dim}")
        keep = mask.unsqueeze(-1).to(z_down.dtype)
        down = z_down + self.speaker_down(z_s).unsqueeze(1)
        return (upsample(down) + self.speaker_up(z_s).unsqueeze(1)) * keep

    def forward(self, z_down, z_t, z_s, upsample, mask):
        if z_down.shape[:2] != z_t.shape[:2]:
            raise InvalidInput("pitch encoding and text encoding lengths differ")
        z = self.speaker_pitch_encoding(z_down, z_s, upsample, mask)
        return self.trunk(z + self.text_proj(z_t), mask)


def bucketize(values, lo, hi, n_bins):
    """Uniform bins over [lo, hi]; out-of-range values land in the edge bins."""
    scaled = (values - lo) / (hi - lo) * n_bins
    return torch.clamp(torch.floor(scaled), 0, n_bins - 1).long()


def bin_basis(n_bins, n_centres):
    """[n_bins, n_centres] row-normalised Gaussian weights of bin centres."""
    centres = (torch.arange(n_bins, dtype=torch.float64) + 0.5) / n_bins
    mu = torch.linspace(0.0, 1.0, n_centres, dtype=torch.float64)
    width = 1.0 / (n_centres - 1)
    phi = torch.exp(-0.5 * ((centres[:, None] - mu[None, :]) / width) ** 2)
    return (phi / phi.sum(dim=1, keepdim=True)).float()


class VarianceEmbedding(nn.Module):
    """Quantize a phoneme-level value and look up its bin vector.

    With ``basis > 0`` the bin table is ``bin_basis(n_bins, basis) @ weight``
    rather than free rows.
    """

    def __init__(self, value_range, n_bins, dim, basis=0):
        super().__init__()
        self.lo, self.hi = float(value_range[0]), float(value_range[1])
        self.n_bins = n_bins
        if basis:
            self.register_buffer("basis", bin_basis(n_bins, basis), persistent=False)
            self.weight = nn.Parameter(torch.randn(basis, dim))
            self.embedding = None
        else:
            self.basis = None
            self.embedding = nn.Embedding(n_bins, dim)

    def table(self):
        return self.embedding.weight if self.embedding is not None else self.basis @ self.weight

    def forward(self, values, mask=None):
        bins = bucketize(values.detach(), self.lo, self.hi, self.n_bins)
        out = self.embedding(bins) if self.embedding is not None else F.embedding(bins, self.table())
        if mask is not None:
            out = out * mask.unsqueeze(-1).to(out.dtype)
        return out


def durations_from_log(duration_log, offset=1.0, mask=None):
    """Inference transform ``max(round(exp(x) - offset), 0)``."""
    d = torch.clamp(torch.round(torch.exp(duration_log) - offset), min=0).long()
    if mask is not None:
        d = d * mask.long()
    return d


def _span_means(values, durations):
    T = len(values)
    ends = np.cumsum(durations)
    starts = ends - durations
    out = np.empty(len(durations), dtype=np.float64)
    for i, (s, e) in enumerate(zip(starts, ends)):
        out[i] = values[s:e].mean() if e > s else values[min(s, T - 1)]
    return out


def compute_variance_targets(durations, pitch_frames, energy_frames):
    """Phoneme-level targets from CLEAN frame features and ground-truth durations.

    ``pitch_frames`` is the speaker-normalised clean contour and
    ``energy_frames`` the corpus-scaled clean energy; zero-duration phonemes
    take the frame at their span position.
    """
    d = np.asarray(durations, dtype=np.int64)
    T = len(pitch_frames)
    if len(energy_frames) != T:
        raise DataError("pitch and energy frame counts differ")
    if d.sum() != T:
        raise DataError(f"durations sum to {int(d.sum())} but the clean mel has {T} frames")
    return VarianceTargets(
        duration=d,
        pitch=_span_means(np.asarray(pitch_frames, dtype=np.float64), d).astype(np.float32),
        energy=_span_means(np.asarray(energy_frames, dtype=np.float64), d).astype(np.float32),
    )
