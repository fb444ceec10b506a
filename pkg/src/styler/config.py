"""Hyperparameter records.

Defaults follow the published architecture; every field can be overridden,
and ``ModelConfig.small()`` gives the reduced-width variant used for quick
CPU runs.
"""

import dataclasses
from dataclasses import dataclass, field

from styler.errors import ConfigError


@dataclass
class ModelConfig:
    # audio front end
    sample_rate: int = 22050
    filter_length: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    mel_fmin: float = 0.0
    mel_fmax: float = 8000.0
    log_floor: float = 1e-5
    f0_min: float = 50.0
    f0_max: float = 600.0

    # text encoder / decoder
    n_symbols: int = 64
    hidden_dim: int = 256
    text_fft_blocks: int = 2
    text_heads: int = 4
    decoder_fft_blocks: int = 4
    decoder_heads: int = 4
    fft_filter_dim: int = 1024
    fft_kernels: tuple = (9, 1)
    fft_dropout: float = 0.1
    max_positions: int = 4096

    # audio-factor encoders
    conv_dim_duration: int = 256
    conv_dim_noise: int = 256
    conv_dim_pitch: int = 320
    conv_dim_energy: int = 320
    conv_kernel: int = 5
    conv_layers: int = 3
    conv_dropout: float = 0.1
    groupnorm_groups: int = 16
    blstm_layers: int = 2
    blstm_size_default: int = 64
    blstm_size_duration: int = 80

    # predictors
    text_bottleneck_dim: int = 4
    predictor_filter_dim: int = 256
    predictor_kernel: int = 3
    predictor_dropout: float = 0.5
    n_bins: int = 256
    pitch_range: tuple = (0.0, 1.0)
    energy_range: tuple = (0.0, 1.0)
    # 0: free lookup table per bin; K > 0: each bin row is a fixed mix of K
    # radial basis centres, so nearby bins share parameters
    variance_embedding_basis: int = 0
    duration_offset: float = 1.0
    # pitch targets in raw Hz instead of the speaker-normalised contour
    pitch_target_hz: bool = False

    # speaker encoding
    speaker_dim: int = 256
    speaker_provider: str = "lookup"
    external_speaker_dim: int = 512

    # adversarial heads
    classifier_hidden: int = 256

    def __post_init__(self):
        self.fft_kernels = tuple(self.fft_kernels)
        self.pitch_range = tuple(self.pitch_range)
        self.energy_range = tuple(self.energy_range)
        self.validate()

    def validate(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and f.name.endswith(
                ("_dim", "_layers", "_blocks", "_heads", "_size_default", "_size_duration")
            ) and v <= 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        for name in ("conv_dim_duration", "conv_dim_noise", "conv_dim_pitch", "conv_dim_energy"):
            dim = getattr(self, name)
            if dim <= 0:
                raise ConfigError(f"{name} must be positive, got {dim}")
            if dim % self.groupnorm_groups:
                raise ConfigError(
                    f"groupnorm_groups={self.groupnorm_groups} does not divide {name}={dim}"
                )
        if self.hidden_dim % self.text_heads or self.hidden_dim % self.decoder_heads:
            raise ConfigError("hidden_dim must be divisible by the attention head counts")
        if self.n_bins < 2:
            raise ConfigError("n_bins must be at least 2")
        if self.variance_embedding_basis < 0 or self.variance_embedding_basis == 1:
            raise ConfigError("variance_embedding_basis must be 0 or at least 2")
        if self.speaker_provider not in ("lookup", "external"):
            raise ConfigError(f"unknown speaker_provider {self.speaker_provider!r}")
        for name in ("pitch_range", "energy_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ConfigError(f"{name} must be increasing, got {(lo, hi)}")

    def conv_dim(self, factor):
        return getattr(self, f"conv_dim_{factor}")

    def blstm_size(self, factor):
        return self.blstm_size_duration if factor == "duration" else self.blstm_size_default

    def bottleneck_dim(self, factor):
        # both directions concatenated
        return 2 * self.blstm_size(factor)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def small(cls, **overrides):
        """Reduced widths (hidden 64) for laptop-scale runs."""
        base = dict(
            hidden_dim=64,
            fft_filter_dim=256,
            conv_dim_duration=64,
            conv_dim_noise=64,
            conv_dim_pitch=80,
            conv_dim_energy=80,
            blstm_size_default=16,
            blstm_size_duration=20,
            predictor_filter_dim=64,
            speaker_dim=64,
            classifier_hidden=64,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_scale: float = 1.0
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9
    warmup_steps: int = 4000
    grad_clip: float = 1.0
    seed: int = 1234
    snr_range: tuple = (5.0, 25.0)
    augment_probability: float = 0.5
    noise_modeling: bool = True
    grl_lambda: float = 1.0
    grl_warmup_steps: int = 0
    log_every: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.snr_range = tuple(self.snr_range)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if not 0.0 <= self.augment_probability <= 1.0:
            raise ConfigError("augment_probability must lie in [0, 1]")

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)
