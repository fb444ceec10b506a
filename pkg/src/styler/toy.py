"""Synthetic toy corpus: formant-filtered harmonic "speech" with known alignments.

Each phoneme symbol has its own spectral envelope, so the text determines
the mel content; each speaker has a base F0 and a formant scale.  Durations
are exact by construction (``L = (sum(d) - 1) * hop`` samples gives
``sum(d)`` center-padded frames).
"""

import json
from pathlib import Path

import numpy as np
from scipy import signal

from styler.dsp import save_wav

# symbol -> (voiced, formant centres in Hz)
PHONES = {
    "a": (True, (730, 1090, 2440)),
    "e": (True, (530, 1840, 2480)),
    "i": (True, (270, 2290, 3010)),
    "o": (True, (570, 840, 2410)),
    "u": (True, (300, 870, 2240)),
    "m": (True, (250, 1200, 2100)),
    "n": (True, (280, 1700, 2600)),
    "s": (False, (4500, 7000)),
    "f": (False, (2000, 5000)),
    "sil": (False, ()),
}

SPEAKERS = {
    "spk_a": (110.0, 1.0),
    "spk_b": (190.0, 1.12),
    "spk_c": (150.0, 0.92),
    "spk_d": (230.0, 1.18),
}


def _envelope(freqs, formants, scale):
    env = np.zeros_like(freqs)
    for k, fc in enumerate(formants):
        env += (0.6 ** k) * np.exp(-0.5 * ((freqs - fc * scale) / (90.0 + 0.06 * fc)) ** 2)
    return env + 1e-3


def synthesize_utterance(phones, durations, speaker, rng, sr=22050, hop=256):
    """Render one utterance; returns float32 samples of length (sum(d) - 1) * hop."""
    base_f0, scale = SPEAKERS[speaker]
    n_frames = int(sum(durations))
    L = (n_frames - 1) * hop
    t = np.arange(L) / sr
    # phoneme index per sample, boundaries at frame centres
    bounds = np.concatenate([[0], np.cumsum(durations)]) * hop - hop // 2
    idx = np.clip(np.searchsorted(bounds, np.arange(L), side="right") - 1, 0, len(phones) - 1)

    rate = rng.uniform(1.5, 3.5)
    f0 = base_f0 * (1.0 + 0.12 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    voiced_amp = np.zeros(L)
    out = np.zeros(L)
    n_harm = int(5000 // base_f0)
    for k in range(1, n_harm + 1):
        hk = k * f0
        amp = np.zeros(L)
        for j, p in enumerate(phones):
            voiced, formants = PHONES[p]
            sel = idx == j
            if voiced and sel.any():
                amp[sel] = _envelope(hk[sel], formants, scale)
        out += amp * np.sin(k * phase)
    voiced_amp = out

    noise_part = np.zeros(L)
    white = rng.standard_normal(L)
    for j, p in enumerate(phones):
        voiced, formants = PHONES[p]
        sel = idx == j
        if voiced or not formants or not sel.any():
            continue
        lo, hi = formants
        sos = signal.butter(4, [lo / (sr / 2), min(hi / (sr / 2), 0.99)], btype="band", output="sos")
        noise_part[sel] = signal.sosfilt(sos, white)[sel] * 0.6

    loud = np.array([rng.uniform(0.4, 1.0) for _ in phones])
    gain = signal.savgol_filter(loud[idx], 221, 1) if L > 221 else loud[idx]
    x = (voiced_amp + noise_part) * gain
    peak = np.max(np.abs(x))
    if peak > 0:
        x = 0.6 * x / peak
    return x.astype(np.float32)


def make_noise(kind, seconds, rng, sr=22050):
    n = int(seconds * sr)
    if kind == "hum":
        t = np.arange(n) / sr
        x = sum(np.sin(2 * np.pi * 60 * k * t + rng.uniform(0, 6.28)) / k for k in range(1, 6))
        x = x + 0.3 * rng.standard_normal(n)
    elif kind == "pink":
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        f = np.fft.rfftfreq(n)
        f[0] = f[1]
        x = np.fft.irfft(spec / np.sqrt(f), n)
    else:
        x = rng.standard_normal(n)
    return (0.5 * x / np.max(np.abs(x))).astype(np.float32)


def make_toy_corpus(out_dir, speakers=("spk_a", "spk_b"), utts_per_speaker=2, seed=0,
                    min_phones=5, max_phones=10, min_dur=3, max_dur=9, heldout=(),
                    noise_kinds=("white", "pink", "hum"), corrupt=0):
    """Write wavs/, annotations.jsonl, splits.json and noise/ under ``out_dir``.

    ``corrupt`` extra utterances get annotations whose durations do not match
    their audio, for exercising rejection.
    """
    out = Path(out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    (out / "noise").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    symbols = [p for p in PHONES if p != "sil"]
    anns = []
    for spk in speakers:
        for u in range(utts_per_speaker):
            n = int(rng.integers(min_phones, max_phones + 1))
            phones = ["sil"] + [symbols[int(i)] for i in rng.integers(0, len(symbols), n)] + ["sil"]
            durs = [int(d) for d in rng.integers(min_dur, max_dur + 1, len(phones))]
            wav = synthesize_utterance(phones, durs, spk, rng)
            utt = f"{spk}_{u:03d}"
            save_wav(out / "wavs" / f"{utt}.wav", wav)
            anns.append({"utt_id": utt, "speaker_id": spk, "audio": f"wavs/{utt}.wav",
                         "phonemes": " ".join(phones), "durations": durs, "text": " ".join(phones[1:-1])})
    for c in range(corrupt):
        src = anns[c % len(anns)]
        bad = dict(src, utt_id=f"corrupt_{c:03d}", durations=src["durations"][:-1] + [src["durations"][-1] + 3])
        anns.append(bad)
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as fh:
        for a in anns:
            fh.write(json.dumps(a) + "\n")
    train = [s for s in speakers if s not in heldout]
    with open(out / "splits.json", "w", encoding="utf-8") as fh:
        json.dump({"train": train, "test": list(heldout)}, fh)
    for kind in noise_kinds:
        save_wav(out / "noise" / f"{kind}.wav", make_noise(kind, 3.0, rng))
    return out
