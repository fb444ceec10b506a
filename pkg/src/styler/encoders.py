"""Style-factor encoders.

The four audio encoders (duration, pitch, energy, noise) share one layout:
conv stack at frame rate, Mel Calibrator down to phoneme count, two-layer
bidirectional LSTM as a channel bottleneck, and a linear+ReLU
up-projection.  None of them ever sees phoneme identities, only the frame
features and the target length ``N``.
"""

import dataclasses
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from styler import AUDIO_FACTORS, FACTORS
from styler.aligner import batch_calibrate
from styler.errors import InvalidInput, UnknownSpeaker
from styler.layers import ConvNormStack, FFTStack, lengths_to_mask

QUANTIZED_FACTORS = ("pitch", "energy")


@dataclass
class StyleEncodings:
    """Phoneme-resolution encodings of one batch; all sequences are [B, N, ...]."""

    Z_t: torch.Tensor
    Z_d: torch.Tensor
    Z_d_down: torch.Tensor
    Z_p: torch.Tensor
    Z_p_down: torch.Tensor
    Z_e: torch.Tensor
    Z_e_down: torch.Tensor
    Z_n: Optional[torch.Tensor]
    Z_n_down: Optional[torch.Tensor]
    Z_s: torch.Tensor  # [B, D]
    phone_mask: torch.Tensor  # [B, N]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELDS = {
    "text": ("Z_t",),
    "duration": ("Z_d", "Z_d_down"),
    "pitch": ("Z_p", "Z_p_down"),
    "energy": ("Z_e", "Z_e_down"),
    "noise": ("Z_n", "Z_n_down"),
    "speaker": ("Z_s",),
}


def mask_encoding(enc, factor):
    """Return a copy of ``enc`` with ``factor``'s encodings replaced by zeros."""
    if factor not in FACTORS:
        raise InvalidInput(f"unknown factor {factor!r}; expected one of {FACTORS}")
    changes = {}
    for name in _FIELDS[factor]:
        value = getattr(enc, name)
        if value is not None:
            changes[name] = torch.zeros_like(value)
    return enc.replace(**changes)


def mask_encodings(enc, factors):
    for f in factors:
        enc = mask_encoding(enc, f)
    return enc


class TextEncoder(nn.Module):
    """Phoneme embedding + sinusoidal positions + FFT blocks."""

    def __init__(self, cfg):
        super().__init__()
        self.n_symbols = cfg.n_symbols
        self.embedding = nn.Embedding(cfg.n_symbols, cfg.hidden_dim, padding_idx=0)
        self.fft = FFTStack(
            cfg.text_fft_blocks,
            cfg.hidden_dim,
            cfg.text_heads,
            cfg.fft_filter_dim,
            cfg.fft_kernels,
            cfg.fft_dropout,
            cfg.max_positions,
        )

    def forward(self, phone_ids, phone_mask):
        if phone_ids.numel() and (int(phone_ids.min()) < 0 or int(phone_ids.max()) >= self.n_symbols):
            raise InvalidInput(f"phoneme id outside symbol table of size {self.n_symbols}")
        x = self.embedding(phone_ids)
        return self.fft(x, phone_mask)


class AudioFactorEncoder(nn.Module):
    def __init__(self, factor, cfg):
        super().__init__()
        if factor not in AUDIO_FACTORS:
            raise InvalidInput(f"no audio encoder for factor {factor!r}")
        self.factor = factor
        conv_dim = cfg.conv_dim(factor)
        size = cfg.blstm_size(factor)
        if factor in QUANTIZED_FACTORS:
            self.bin_embedding = nn.Embedding(cfg.n_bins, conv_dim)
            in_dim = conv_dim
        else:
            self.bin_embedding = None
            in_dim = cfg.n_mels
        self.in_dim = in_dim
        self.n_mels = cfg.n_mels
        self.convs = ConvNormStack(
            in_dim, conv_dim, cfg.conv_layers, cfg.conv_kernel, cfg.groupnorm_groups, cfg.conv_dropout
        )
        self.bottleneck = nn.LSTM(
            conv_dim, size, num_layers=cfg.blstm_layers, batch_first=True, bidirectional=True
        )
        self.bottleneck_dim = 2 * size
        self.up = nn.Linear(2 * size, cfg.hidden_dim)

    def upsample(self, z_down):
        return F.relu(self.up(z_down))

    def embed_inputs(self, inputs):
        if self.bin_embedding is not None:
            if inputs.dtype not in (torch.int64, torch.int32) or inputs.dim() != 2:
                raise InvalidInput(f"{self.factor} encoder expects quantized bins [B, T]")
            return self.bin_embedding(inputs.long())
        if not inputs.is_floating_point() or inputs.dim() != 3 or inputs.shape[-1] != self.n_mels:
            raise InvalidInput(f"{self.factor} encoder expects mel frames [B, T, {self.n_mels}]")
        return inputs

    def forward(self, inputs, frame_lengths, phone_lengths):
        """Return (Z_down [B, N, 2*size], Z_up [B, N, hidden])."""
        frame_lengths = torch.as_tensor(frame_lengths, dtype=torch.long)
        phone_lengths = torch.as_tensor(phone_lengths, dtype=torch.long)
        x = self.embed_inputs(inputs)
        frame_mask = lengths_to_mask(frame_lengths, x.shape[1])
        h = self.convs(x, frame_mask)
        h = batch_calibrate(h, frame_lengths, phone_lengths)
        n_max = h.shape[1]
        packed = pack_padded_sequence(h, phone_lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.bottleneck(packed)
        z_down, _ = pad_packed_sequence(out, batch_first=True, total_length=n_max)
        keep = lengths_to_mask(phone_lengths, n_max).unsqueeze(-1).to(z_down.dtype)
        z_down = z_down * keep
        z_up = self.upsample(z_down) * keep
        return z_down, z_up


class LookupSpeakerEncoder(nn.Module):
    """Trainable speaker table keyed by speaker id."""

    def __init__(self, speakers, cfg):
        super().__init__()
        self.speakers = list(speakers)
        self.index = {s: i for i, s in enumerate(self.speakers)}
        self.table = nn.Embedding(max(1, len(self.speakers)), cfg.speaker_dim)
        nn.init.normal_(self.table.weight, std=cfg.speaker_dim ** -0.5)
        self.proj = None if cfg.speaker_dim == cfg.hidden_dim else nn.Linear(cfg.speaker_dim, cfg.hidden_dim)

    def lookup(self, speaker_ids):
        try:
            return torch.tensor([self.index[s] for s in speaker_ids], dtype=torch.long)
        except KeyError as exc:
            raise UnknownSpeaker(f"speaker {exc.args[0]!r} not in lookup table") from None

    def forward(self, speaker_ids=None, vectors=None):
        if vectors is not None:
            raise InvalidInput("lookup speaker provider cannot take external vectors")
        z = self.table(self.lookup(speaker_ids))
        return self.proj(z) if self.proj is not None else z


class ExternalSpeakerEncoder(nn.Module):
    """Fixed pretrained speaker vectors (e.g. 512-d) linearly projected to hidden size.

    Imported vectors are stored as a non-trainable buffer; arbitrary new
    vectors can be passed directly at inference for unseen speakers.
    """

    def __init__(self, speakers, cfg, vectors=None):
        super().__init__()
        self.speakers = list(speakers)
        self.index = {s: i for i, s in enumerate(self.speakers)}
        self.external_dim = cfg.external_speaker_dim
        if vectors is None:
            vectors = torch.zeros(len(self.speakers), self.external_dim)
        vectors = torch.as_tensor(vectors, dtype=torch.float32)
        if vectors.shape != (len(self.speakers), self.external_dim):
            raise InvalidInput(
                f"external speaker table must be [{len(self.speakers)}, {self.external_dim}], "
                f"got {tuple(vectors.shape)}"
            )
        self.register_buffer("vectors", vectors)
        self.proj = nn.Linear(self.external_dim, cfg.hidden_dim)

    def import_vectors(self, mapping):
        for spk, vec in mapping.items():
            if spk not in self.index:
                raise UnknownSpeaker(f"speaker {spk!r} not registered")
            self.vectors[self.index[spk]] = torch.as_tensor(vec, dtype=torch.float32)

    def forward(self, speaker_ids=None, vectors=None):
        if vectors is None:
            try:
                idx = torch.tensor([self.index[s] for s in speaker_ids], dtype=torch.long)
            except KeyError as exc:
                raise UnknownSpeaker(f"speaker {exc.args[0]!r} has no imported embedding") from None
            vectors = self.vectors.index_select(0, idx)
        vectors = torch.as_tensor(vectors, dtype=torch.float32)
        if vectors.dim() == 1:
            vectors = vectors.unsqueeze(0)
        if vectors.shape[-1] != self.external_dim:
            raise InvalidInput(f"speaker vector must have width {self.external_dim}")
        return self.proj(vectors)


def build_speaker_encoder(speakers, cfg, vectors=None):
    if cfg.speaker_provider == "external":
        return ExternalSpeakerEncoder(speakers, cfg, vectors)
    return LookupSpeakerEncoder(speakers, cfg)
