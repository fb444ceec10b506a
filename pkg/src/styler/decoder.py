"""Mel decoder with Residual Decoding.

The clean pass decodes the sum of noise-independent encodings.  The noisy
pass adds the noise encoding to a *detached* copy of that sum, so the noisy
reconstruction loss can only update the noise encoder and the (shared)
decoder.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from styler.aligner import batch_length_regulate
from styler.errors import InvalidInput
from styler.layers import FFTStack, lengths_to_mask


@dataclass
class DecoderInput:
    summed: torch.Tensor  # [B, N, D]: Z_t + pitch emb + energy emb + Z_s
    durations: torch.Tensor  # [B, N] integer frames
    phone_lengths: torch.Tensor  # [B]


def assemble_decoder_input(z_t, pitch_emb, energy_emb, z_s, durations, phone_lengths):
    mask = lengths_to_mask(phone_lengths, z_t.shape[1]).unsqueeze(-1).to(z_t.dtype)
    summed = (z_t + pitch_emb + energy_emb + z_s.unsqueeze(1)) * mask
    return DecoderInput(summed, durations, torch.as_tensor(phone_lengths))


class MelDecoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.fft = FFTStack(
            cfg.decoder_fft_blocks,
            cfg.hidden_dim,
            cfg.decoder_heads,
            cfg.fft_filter_dim,
            cfg.fft_kernels,
            cfg.fft_dropout,
            cfg.max_positions,
        )
        self.to_mel = nn.Linear(cfg.hidden_dim, cfg.n_mels)
        self.calls = 0

    def forward(self, frames, frame_lengths):
        """frames [B, T', D] at frame rate -> mel [B, T', n_mels]."""
        self.calls += 1
        mask = lengths_to_mask(frame_lengths, frames.shape[1])
        h = self.fft(frames, mask)
        return self.to_mel(h) * mask.unsqueeze(-1).to(h.dtype)

    def _regulate(self, phones, inp):
        d = torch.as_tensor(inp.durations).long()
        n = torch.as_tensor(inp.phone_lengths).long()
        for b in range(d.shape[0]):
            if int(d[b, : int(n[b])].sum()) < 1:
                raise InvalidInput("total duration is zero; nothing to decode")
        return batch_length_regulate(phones, d, n)

    def decode_clean(self, inp):
        frames, lengths = self._regulate(inp.summed, inp)
        return self(frames, lengths), lengths

    def decode_noisy(self, inp, z_n):
        frames, lengths = self._regulate(inp.summed.detach() + z_n, inp)
        return self(frames, lengths), lengths

    def decode_residual(self, inp, z_n):
        """Clean and noisy passes stacked into a single decoder invocation."""
        clean, lengths = self._regulate(inp.summed, inp)
        noisy, _ = self._regulate(inp.summed.detach() + z_n, inp)
        out = self(torch.cat([clean, noisy], dim=0), torch.cat([lengths, lengths]))
        B = clean.shape[0]
        return out[:B], out[B:], lengths
