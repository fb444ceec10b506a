"""Checkpoint-backed synthesis helpers shared by the CLI commands."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from styler import AUDIO_FACTORS, FACTORS, tensorio
from styler.aligner import length_regulate
from styler.dsp import extract_features, load_wav, mel_to_waveform, save_wav
from styler.errors import InvalidInput
from styler.model import FactorInput
from styler.pipeline import FeatureNormalizer, SymbolTable, load_checkpoint
from styler.plotting import plot_grid, plot_mel


def parse_masks(spec):
    if not spec:
        return set()
    items = spec if isinstance(spec, (list, tuple, set)) else spec.split(",")
    masks = {m.strip() for m in items if m.strip()}
    unknown = masks - set(FACTORS)
    if unknown:
        raise InvalidInput(f"unknown factor(s) {sorted(unknown)}; choose from {FACTORS}")
    return masks


class Synthesizer:
    def __init__(self, ckpt_path):
        state = load_checkpoint(ckpt_path)
        self.model = state["model"].eval()
        self.cfg = self.model.cfg
        data = state["data"] or {}
        if not data:
            raise InvalidInput("checkpoint carries no corpus statistics (train from a manifest)")
        self.symbols = SymbolTable(data["symbols"])
        self.normalizer = FeatureNormalizer(data, self.cfg)

    def phonemes(self, text):
        if text.startswith("@"):
            text = Path(text[1:]).read_text(encoding="utf-8")
        ids = self.symbols.encode(text.split())
        if not ids:
            raise InvalidInput("empty phoneme sequence")
        return torch.tensor(ids, dtype=torch.long)

    def reference(self, wav_path, speaker_id=None):
        """Features of one reference recording, as per-factor encoder inputs."""
        wav = load_wav(wav_path, self.cfg.sample_rate)
        bundle = extract_features(wav, self.cfg)
        inputs = self.normalizer.encoder_inputs(bundle, speaker_id)
        length = torch.tensor([bundle.n_frames])
        return {f: FactorInput(inputs[f][None], length) for f in AUDIO_FACTORS}

    def speaker(self, spec):
        if spec is None:
            return None, None
        p = Path(spec)
        if p.suffix in (".npy", ".styf") and p.is_file():
            vec = np.load(p) if p.suffix == ".npy" else next(iter(tensorio.read_tensors(p).values()))
            return None, torch.as_tensor(np.asarray(vec, dtype=np.float32).reshape(1, -1))
        return spec, None

    def run(self, text, refs, speaker=None, masks=(), render_noise=False):
        spk_id, spk_vec = self.speaker(speaker)
        return self.model.synthesize(
            self.phonemes(text), refs, speaker_id=spk_id, speaker_vector=spk_vec,
            masks=masks, render_noise=render_noise,
        )


def frame_curves(out):
    """Predicted phoneme-level pitch/energy expanded to frames, for overlays."""
    d = out.durations
    pitch = length_regulate(out.predictions.pitch[0].unsqueeze(-1), d).squeeze(-1)
    energy = length_regulate(out.predictions.energy[0].unsqueeze(-1), d).squeeze(-1)
    return pitch.numpy(), energy.numpy()


def write_outputs(out, out_dir, cfg, wav=False, plot=False, title=None, prefer_noisy=False, seed=0):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    mel = out.mel_noisy if (prefer_noisy and out.mel_noisy is not None) else out.mel
    tensors = {"mel": out.mel.numpy(), "durations": out.durations.numpy()}
    if out.mel_noisy is not None:
        tensors["mel_noisy"] = out.mel_noisy.numpy()
    tensorio.write_tensors(out_dir / "mel.styf", tensors)
    written["mel"] = str(out_dir / "mel.styf")
    if wav:
        save_wav(out_dir / "audio.wav", mel_to_waveform(mel.numpy(), cfg, seed=seed), cfg.sample_rate)
        written["wav"] = str(out_dir / "audio.wav")
        if out.mel_noisy is not None and not prefer_noisy:
            noisy = mel_to_waveform(out.mel_noisy.numpy(), cfg, seed=seed)
            save_wav(out_dir / "audio_noisy.wav", noisy, cfg.sample_rate)
            written["wav_noisy"] = str(out_dir / "audio_noisy.wav")
    if plot:
        pitch, energy = frame_curves(out)
        plot_mel(out_dir / "mel.png", mel.numpy(), np.clip(pitch, 0, 1), np.clip(energy, 0, 1), title)
        written["plot"] = str(out_dir / "mel.png")
    return written


def ablation_cells():
    """(name, masks, render_noise) for the factor-decomposition grid."""
    others = [f for f in FACTORS if f != "noise"]
    cells = [
        ("baseline", set(), False),
        ("noise_on", set(), True),
        ("noise_only", set(others), True),
    ]
    for f in FACTORS:
        cells.append((f"mask_{f}", {f}, f == "noise"))
    return cells


def run_ablation(synth, text, ref_path, out_dir, speaker=None, ref_speaker=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    refs = synth.reference(ref_path, ref_speaker)
    if speaker is None:
        speaker = synth.model.speakers[0] if synth.model.speakers else None
    rows, grid = [], []
    for name, masks, noise in ablation_cells():
        out = synth.run(text, refs, speaker=speaker, masks=masks, render_noise=noise)
        files = write_outputs(out, out_dir / name, synth.cfg, plot=True, title=name, prefer_noisy=noise)
        mel = out.mel_noisy if noise else out.mel
        pitch, energy = frame_curves(out)
        grid.append({"mel": mel.numpy(), "pitch": np.clip(pitch, 0, 1), "energy": np.clip(energy, 0, 1), "title": name})
        rows.append({
            "cell": name,
            "masked": sorted(masks),
            "noise_decoding": noise,
            "frames": int(mel.shape[0]),
            "finite": bool(torch.isfinite(mel).all()),
            **files,
        })
    plot_grid(out_dir / "grid.png", grid)
    lines = [
        "# Style factor ablation",
        "",
        f"reference: `{ref_path}`  ",
        f"text: `{text}`",
        "",
        "| cell | masked | noise decoding | frames | plot |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        rel = Path(r["plot"]).relative_to(out_dir)
        lines.append(
            f"| {r['cell']} | {', '.join(r['masked']) or '-'} | {'on' if r['noise_decoding'] else 'off'} "
            f"| {r['frames']} | ![{r['cell']}]({rel.as_posix()}) |"
        )
    lines += ["", "![grid](grid.png)", ""]
    (out_dir / "index.md").write_text("\n".join(lines), encoding="utf-8")
    return rows
