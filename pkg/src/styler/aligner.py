"""Mel Calibrator and Length Regulator.

The calibrator maps ``T`` frames onto ``N`` phoneme slots using nothing but
the two lengths: phoneme ``i`` averages frames ``[floor(i*T/N),
floor((i+1)*T/N))`` and copies frame ``floor(i*T/N)`` when that span is
empty.  Both functions accept numpy arrays or torch tensors and return the
same kind.
"""

from dataclasses import dataclass

import numpy as np
import torch

from styler.errors import InvalidInput


@dataclass(frozen=True)
class FrameToPhoneMap:
    T: int
    N: int
    starts: np.ndarray
    ends: np.ndarray

    @property
    def spans(self):
        return [(int(s), int(e)) for s, e in zip(self.starts, self.ends)]

    def apply(self, frames):
        return _apply(self, frames)


def build_map(T, N):
    if T < 1 or N < 1:
        raise InvalidInput(f"calibration needs T >= 1 and N >= 1, got T={T}, N={N}")
    i = np.arange(N + 1, dtype=np.int64)
    bounds = (i * T) // N
    return FrameToPhoneMap(int(T), int(N), bounds[:-1], bounds[1:])


def _apply(fmap, frames):
    is_np = not isinstance(frames, torch.Tensor)
    x = torch.as_tensor(frames) if is_np else frames
    if x.dim() != 2:
        raise InvalidInput(f"frames must be [T, C], got shape {tuple(x.shape)}")
    if x.shape[0] != fmap.T:
        raise InvalidInput(f"map built for T={fmap.T}, frames have {x.shape[0]}")
    starts = torch.as_tensor(fmap.starts, device=x.device)
    ends = torch.as_tensor(fmap.ends, device=x.device)
    counts = ends - starts
    anchor = x.index_select(0, starts)
    if fmap.T <= fmap.N:
        # every span holds at most one frame; non-empty spans start at their frame
        out = anchor
    else:
        # mean of deviations from the span's first frame: exact for constant spans
        seg = torch.repeat_interleave(torch.arange(fmap.N, device=x.device), counts)
        dev = x - anchor.index_select(0, seg)
        sums = torch.zeros_like(anchor).index_add_(0, seg, dev)
        out = anchor + sums / counts.to(x.dtype).unsqueeze(1)
    return out.numpy() if is_np else out


def calibrate(frames, n_phones):
    """Compress or expand ``frames`` [T, C] to exactly ``n_phones`` rows."""
    T = frames.shape[0]
    return _apply(build_map(T, n_phones), frames)


def length_regulate(phones, durations):
    """Repeat row ``i`` of ``phones`` [N, C] ``durations[i]`` times."""
    is_np = not isinstance(phones, torch.Tensor)
    x = torch.as_tensor(phones) if is_np else phones
    d = torch.as_tensor(durations, device=x.device).long()
    if d.dim() != 1 or d.numel() != x.shape[0]:
        raise InvalidInput(f"need one duration per phoneme ({x.shape[0]}), got {tuple(d.shape)}")
    if torch.any(d < 0):
        raise InvalidInput("durations must be nonnegative")
    if int(d.sum()) < 1:
        raise InvalidInput("all durations are zero; nothing to decode")
    out = torch.repeat_interleave(x, d, dim=0)
    return out.numpy() if is_np else out


def batch_calibrate(frames, frame_lengths, phone_lengths):
    """Calibrate each item of a padded batch [B, T_max, C] to [B, N_max, C]."""
    B, _, C = frames.shape
    n_max = int(max(phone_lengths))
    out = frames.new_zeros(B, n_max, C)
    for b in range(B):
        t, n = int(frame_lengths[b]), int(phone_lengths[b])
        out[b, :n] = calibrate(frames[b, :t], n)
    return out


def batch_length_regulate(phones, durations, phone_lengths):
    """Padded-batch Length Regulator; returns ([B, T'_max, C], frame lengths)."""
    B, _, C = phones.shape
    expanded = []
    for b in range(B):
        n = int(phone_lengths[b])
        expanded.append(length_regulate(phones[b, :n], durations[b, :n]))
    lengths = torch.tensor([e.shape[0] for e in expanded], dtype=torch.long)
    out = phones.new_zeros(B, int(lengths.max()), C)
    for b, e in enumerate(expanded):
        out[b, : e.shape[0]] = e
    return out, lengths
