"""Full model: encoders -> predictors -> residual decoding."""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from styler import AUDIO_FACTORS
from styler.adversarial import DAT_FACTORS, DomainAdversarialHeads
from styler.config import ModelConfig
from styler.decoder import MelDecoder, assemble_decoder_input
from styler.encoders import (
    AudioFactorEncoder,
    StyleEncodings,
    TextEncoder,
    build_speaker_encoder,
    mask_encodings,
)
from styler.errors import InvalidInput
from styler.layers import lengths_to_mask
from styler.predictors import (
    DurationPredictor,
    EnergyPredictor,
    PitchPredictor,
    PredictorOutput,
    VarianceEmbedding,
    durations_from_log,
)


@dataclass
class FactorInput:
    """Encoder-side features for one audio factor of a batch."""

    values: torch.Tensor  # [B, T, n_mels] float, or [B, T] bins
    frame_lengths: torch.Tensor  # [B]


@dataclass
class TrainOutputs:
    encodings: StyleEncodings
    predictions: PredictorOutput
    aug_logits: dict
    mel_clean: torch.Tensor
    mel_noisy: Optional[torch.Tensor]
    frame_lengths: torch.Tensor


@dataclass
class SynthesisOutput:
    mel: torch.Tensor  # [T', n_mels]
    mel_noisy: Optional[torch.Tensor]
    durations: torch.Tensor  # [N]
    predictions: PredictorOutput
    encodings: StyleEncodings


class Styler(nn.Module):
    def __init__(self, cfg=None, speakers=(), speaker_vectors=None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        cfg = self.cfg
        self.text_encoder = TextEncoder(cfg)
        self.audio_encoders = nn.ModuleDict({f: AudioFactorEncoder(f, cfg) for f in AUDIO_FACTORS})
        self.speaker_encoder = build_speaker_encoder(speakers, cfg, speaker_vectors)
        self.duration_predictor = DurationPredictor(cfg)
        self.pitch_predictor = PitchPredictor(cfg, cfg.bottleneck_dim("pitch"))
        self.energy_predictor = EnergyPredictor(cfg)
        self.pitch_embedding = VarianceEmbedding(cfg.pitch_range, cfg.n_bins, cfg.hidden_dim, cfg.variance_embedding_basis)
        self.energy_embedding = VarianceEmbedding(cfg.energy_range, cfg.n_bins, cfg.hidden_dim, cfg.variance_embedding_basis)
        self.dat = DomainAdversarialHeads(cfg.hidden_dim, cfg.classifier_hidden, DAT_FACTORS)
        self.decoder = MelDecoder(cfg)

    @property
    def speakers(self):
        return self.speaker_encoder.speakers

    def encode(self, phone_ids, phone_lengths, factor_inputs, speaker_ids=None, speaker_vectors=None):
        """Run every encoder whose input is present; absent audio factors come back as zeros."""
        phone_lengths = torch.as_tensor(phone_lengths, dtype=torch.long)
        if int(phone_lengths.min()) < 1:
            raise InvalidInput("every item needs at least one phoneme")
        mask = lengths_to_mask(phone_lengths, phone_ids.shape[1])
        B, N = phone_ids.shape
        z_t = self.text_encoder(phone_ids, mask)
        out = {}
        for f in AUDIO_FACTORS:
            enc = self.audio_encoders[f]
            if factor_inputs.get(f) is not None:
                fi = factor_inputs[f]
                out[f] = enc(fi.values, fi.frame_lengths, phone_lengths)
            else:
                out[f] = (z_t.new_zeros(B, N, enc.bottleneck_dim), z_t.new_zeros(B, N, self.cfg.hidden_dim))
        if speaker_vectors is not None or speaker_ids is not None:
            z_s = self.speaker_encoder(speaker_ids=speaker_ids, vectors=speaker_vectors)
        else:
            z_s = z_t.new_zeros(B, self.cfg.hidden_dim)
        return StyleEncodings(
            Z_t=z_t,
            Z_d=out["duration"][1],
            Z_d_down=out["duration"][0],
            Z_p=out["pitch"][1],
            Z_p_down=out["pitch"][0],
            Z_e=out["energy"][1],
            Z_e_down=out["energy"][0],
            Z_n=out["noise"][1],
            Z_n_down=out["noise"][0],
            Z_s=z_s,
            phone_mask=mask,
        )

    def text_downsampled(self, enc):
        """Z_t' as seen by each predictor ([B, N, 4] per predictor)."""
        return {
            "duration": self.duration_predictor.text_proj.downsample(enc.Z_t),
            "pitch": self.pitch_predictor.text_proj.downsample(enc.Z_t),
            "energy": self.energy_predictor.text_proj.downsample(enc.Z_t),
        }

    def predict(self, enc):
        mask = enc.phone_mask
        return PredictorOutput(
            duration_log=self.duration_predictor(enc.Z_d, enc.Z_t, mask),
            pitch=self.pitch_predictor(
                enc.Z_p_down, enc.Z_t, enc.Z_s, self.audio_encoders["pitch"].upsample, mask
            ),
            energy=self.energy_predictor(enc.Z_e, enc.Z_t, mask),
        )

    def decoder_input(self, enc, pitch_values, energy_values, durations):
        mask = enc.phone_mask
        phone_lengths = mask.sum(dim=1)
        return assemble_decoder_input(
            enc.Z_t,
            self.pitch_embedding(pitch_values, mask),
            self.energy_embedding(energy_values, mask),
            enc.Z_s,
            durations,
            phone_lengths,
        )

    def forward(self, batch, noise_modeling=True, grl_lambda=1.0):
        """Training forward pass with teacher-forced durations, pitch and energy."""
        enc = self.encode(
            batch.phone_ids,
            batch.phone_lengths,
            {f: FactorInput(batch.enc_inputs[f], batch.frame_lengths) for f in AUDIO_FACTORS},
            speaker_ids=batch.speaker_ids,
        )
        preds = self.predict(enc)
        dec_in = self.decoder_input(enc, batch.pitch_target, batch.energy_target, batch.durations)
        if noise_modeling:
            mel_clean, mel_noisy, lengths = self.decoder.decode_residual(dec_in, enc.Z_n)
            logits = self.dat({"duration": enc.Z_d, "pitch": enc.Z_p, "energy": enc.Z_e}, enc.phone_mask, grl_lambda)
        else:
            mel_clean, lengths = self.decoder.decode_clean(dec_in)
            mel_noisy, logits = None, {}
        return TrainOutputs(enc, preds, logits, mel_clean, mel_noisy, lengths)

    @torch.no_grad()
    def synthesize(
        self,
        phone_ids,
        refs,
        speaker_id=None,
        speaker_vector=None,
        masks=(),
        render_noise=False,
        durations=None,
    ):
        """Inference for one utterance.

        ``refs`` maps each unmasked audio factor to a ``FactorInput`` with a
        batch dimension of 1; factors can come from different recordings.
        ``durations`` overrides the predicted durations when given.
        """
        masks = set(masks)
        needed = [f for f in AUDIO_FACTORS if f not in masks and not (f == "noise" and not render_noise)]
        missing = [f for f in needed if refs.get(f) is None]
        if missing:
            raise InvalidInput(f"no reference given for unmasked factor(s) {missing}")
        if "speaker" not in masks and speaker_id is None and speaker_vector is None:
            raise InvalidInput("no speaker given and speaker factor not masked")
        phone_ids = torch.as_tensor(phone_ids, dtype=torch.long).reshape(1, -1)
        phone_lengths = torch.tensor([phone_ids.shape[1]])
        inputs = {f: refs[f] for f in needed}
        enc = self.encode(
            phone_ids,
            phone_lengths,
            inputs,
            speaker_ids=None if "speaker" in masks or speaker_id is None else [speaker_id],
            speaker_vectors=None if "speaker" in masks or speaker_vector is None else speaker_vector,
        )
        enc = mask_encodings(enc, sorted(masks))
        preds = self.predict(enc)
        if durations is None:
            d = durations_from_log(preds.duration_log, self.cfg.duration_offset, enc.phone_mask)
            if int(d.sum()) == 0:
                d[0, int(torch.argmax(preds.duration_log[0]))] = 1
        else:
            d = torch.as_tensor(durations, dtype=torch.long).reshape(1, -1)
        dec_in = self.decoder_input(enc, preds.pitch, preds.energy, d)
        if render_noise:
            clean, noisy, _ = self.decoder.decode_residual(dec_in, enc.Z_n)
            mel_noisy = noisy[0]
        else:
            clean, _ = self.decoder.decode_clean(dec_in)
            mel_noisy = None
        return SynthesisOutput(clean[0], mel_noisy, d[0], preds, enc)
