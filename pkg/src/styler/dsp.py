"""Acoustic feature extraction, normalisation and noise augmentation.

Everything here is a pure function of its inputs.  Framing is center-padded
(``n_fft // 2`` zeros on both sides) so an utterance of ``L`` samples yields
``L // hop + 1`` frames for mel, energy and pitch alike.
"""

import functools
import logging
import warnings
from dataclasses import dataclass

import librosa
import numpy as np
from scipy import signal
from scipy.io import wavfile

from styler.config import ModelConfig
from styler.errors import ConfigError, InvalidInput

logger = logging.getLogger(__name__)

PITCH_TARGET_MEAN = 0.5
PITCH_TARGET_STD = 0.25


@dataclass
class PitchContour:
    f0: np.ndarray
    voiced: np.ndarray

    @property
    def all_unvoiced(self):
        return not bool(self.voiced.any())

    def __len__(self):
        return len(self.f0)


@dataclass
class SpeakerPitchStats:
    speaker_id: str
    mean_f0: float
    std_f0: float

    def to_dict(self):
        return {"speaker_id": self.speaker_id, "mean_f0": self.mean_f0, "std_f0": self.std_f0}


@dataclass
class FeatureBundle:
    """Per-utterance frame-level features (one clean or augmented variant)."""

    mel: np.ndarray  # [T, n_mels]
    f0: np.ndarray  # [T]
    voiced: np.ndarray  # [T] bool
    energy: np.ndarray  # [T]

    @property
    def n_frames(self):
        return self.mel.shape[0]

    @property
    def pitch(self):
        return PitchContour(self.f0, self.voiced)

    def to_tensors(self):
        return {
            "mel": self.mel,
            "f0": self.f0,
            "voiced": self.voiced.astype(np.float32),
            "energy": self.energy,
        }

    @classmethod
    def from_tensors(cls, t):
        return cls(
            mel=np.asarray(t["mel"], dtype=np.float32),
            f0=np.asarray(t["f0"], dtype=np.float32),
            voiced=np.asarray(t["voiced"]) > 0.5,
            energy=np.asarray(t["energy"], dtype=np.float32),
        )


def _check_waveform(samples):
    x = np.asarray(samples, dtype=np.float32)
    if x.ndim != 1:
        raise InvalidInput(f"waveform must be 1-D, got shape {x.shape}")
    if x.size == 0:
        raise InvalidInput("empty waveform")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("waveform contains non-finite samples")
    return x


@functools.lru_cache(maxsize=8)
def mel_basis(sample_rate, n_fft, n_mels, fmin, fmax):
    basis = librosa.filters.mel(sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax)
    basis.setflags(write=False)
    return basis


@functools.lru_cache(maxsize=8)
def _mel_pinv(sample_rate, n_fft, n_mels, fmin, fmax):
    inv = np.linalg.pinv(mel_basis(sample_rate, n_fft, n_mels, fmin, fmax))
    inv.setflags(write=False)
    return inv


def _basis_for(cfg):
    return mel_basis(cfg.sample_rate, cfg.filter_length, cfg.n_mels, cfg.mel_fmin, cfg.mel_fmax)


def stft_magnitude(samples, cfg=None):
    """|STFT| as [n_fft // 2 + 1, T]."""
    cfg = cfg or ModelConfig()
    x = _check_waveform(samples)
    with warnings.catch_warnings():
        # inputs shorter than one window are fine: centring pads them out
        warnings.filterwarnings("ignore", message="n_fft=.*is too large")
        spec = librosa.stft(
            x,
            n_fft=cfg.filter_length,
            hop_length=cfg.hop_length,
            win_length=cfg.win_length,
            window="hann",
            center=True,
            pad_mode="constant",
        )
    return np.abs(spec)


def n_frames_for(n_samples, hop_length=256):
    return n_samples // hop_length + 1


def extract_mel(samples, cfg=None):
    """Log-mel spectrogram, shape [T, n_mels], natural log with floor clamp."""
    cfg = cfg or ModelConfig()
    mag = stft_magnitude(samples, cfg)
    mel = _basis_for(cfg) @ mag
    return np.log(np.maximum(mel, cfg.log_floor)).T.astype(np.float32)


def extract_energy(samples, cfg=None):
    """Frame-wise L2 norm of the STFT magnitude, shape [T]."""
    cfg = cfg or ModelConfig()
    mag = stft_magnitude(samples, cfg)
    return np.linalg.norm(mag, axis=0).astype(np.float32)


def _frames(x, frame_length, hop_length):
    pad = frame_length // 2
    padded = np.pad(x, (pad, pad))
    return librosa.util.frame(padded, frame_length=frame_length, hop_length=hop_length, axis=0)


def extract_pitch(samples, cfg=None, threshold=0.15, voicing_threshold=0.3, silence_db=-60.0):
    """Frame-wise F0 by a YIN-style cumulative-mean-normalised difference search.

    The lag search covers ``[sr / f0_max, sr / f0_min]``.  A frame counts as
    voiced when its aperiodicity (the normalised difference at the chosen lag)
    is below ``voicing_threshold`` and its RMS is above ``silence_db`` relative
    to full scale.  Unvoiced frames carry f0 = 0.
    """
    cfg = cfg or ModelConfig()
    x = _check_waveform(samples).astype(np.float64)
    n_out = n_frames_for(len(x), cfg.hop_length)
    frames = _frames(x, cfg.win_length, cfg.hop_length)
    W = frames.shape[1]
    tau_min = max(2, int(np.floor(cfg.sample_rate / cfg.f0_max)))
    tau_max = min(W // 2, int(np.ceil(cfg.sample_rate / cfg.f0_min)))
    w = W - tau_max
    if w <= 0:
        raise ConfigError("window too short for the requested f0_min")

    nfft = 1 << int(np.ceil(np.log2(W + w)))
    head = np.fft.rfft(frames[:, :w], nfft, axis=1)
    full = np.fft.rfft(frames, nfft, axis=1)
    corr = np.fft.irfft(np.conj(head) * full, nfft, axis=1)[:, : tau_max + 1]
    csum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames**2, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    e0 = csum[:, w][:, None]
    e_tau = csum[:, taus + w] - csum[:, taus]
    diff = np.maximum(e0 + e_tau - 2.0 * corr, 0.0)
    diff[:, 0] = 0.0

    cum = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(cum > 0, diff[:, 1:] * taus[1:] / cum, 1.0)

    rms = np.sqrt(np.mean(frames**2, axis=1))
    loud = 20.0 * np.log10(np.maximum(rms, 1e-12)) > silence_db

    f0 = np.zeros(frames.shape[0])
    voiced = np.zeros(frames.shape[0], dtype=bool)
    for i in np.flatnonzero(loud):
        d = cmnd[i]
        seg = d[tau_min: tau_max + 1]
        # first dip under the threshold; failing that, the first dip close to
        # the global minimum, which avoids jumping to a multiple of the period
        limit = threshold if seg.min() < threshold else seg.min() + 0.1
        t = tau_min + int(np.flatnonzero(seg < limit)[0])
        while t + 1 <= tau_max and d[t + 1] < d[t]:
            t += 1
        # a dip at a sub-multiple of the lag that is nearly as deep is the real
        # period; this catches octave-down picks at voicing onsets
        for k in (3, 2):
            lo, hi = max(tau_min, t // k - 2), min(tau_max, t // k + 3)
            if hi <= lo:
                continue
            m = lo + int(np.argmin(d[lo:hi]))
            if d[m] < min(voicing_threshold, d[t] + 0.05):
                t = m
                break
        if d[t] >= voicing_threshold:
            continue
        shift = 0.0
        if tau_min < t < tau_max:
            a, b, c = d[t - 1], d[t], d[t + 1]
            denom = a - 2 * b + c
            if denom > 0:
                shift = 0.5 * (a - c) / denom
        period = t + shift
        hz = cfg.sample_rate / period
        if cfg.f0_min <= hz <= cfg.f0_max:
            f0[i] = hz
            voiced[i] = True

    f0, voiced = _match_length(f0, n_out), _match_length(voiced, n_out)
    contour = PitchContour(f0.astype(np.float32), voiced)
    if contour.all_unvoiced:
        logger.debug("utterance is fully unvoiced")
    return contour


def _match_length(a, n):
    if len(a) >= n:
        return a[:n]
    return np.pad(a, (0, n - len(a)), mode="edge" if len(a) else "constant")


def extract_features(samples, cfg=None):
    cfg = cfg or ModelConfig()
    mel = extract_mel(samples, cfg)
    energy = extract_energy(samples, cfg)
    pitch = extract_pitch(samples, cfg)
    assert len(energy) == len(pitch) == mel.shape[0]
    return FeatureBundle(mel=mel, f0=pitch.f0, voiced=pitch.voiced, energy=energy)


def interpolate_unvoiced(contour):
    """Fill unvoiced gaps linearly; edge gaps hold the nearest voiced value."""
    f0 = np.asarray(contour.f0, dtype=np.float64)
    voiced = np.asarray(contour.voiced, dtype=bool)
    if not voiced.any():
        return None
    idx = np.arange(len(f0))
    return np.interp(idx, idx[voiced], f0[voiced])


def fit_pitch_stats(speaker_id, contours):
    """Mean/std of F0 over the voiced frames of a speaker's clean utterances."""
    voiced = [np.asarray(c.f0, dtype=np.float64)[np.asarray(c.voiced)] for c in contours]
    pooled = np.concatenate(voiced) if voiced else np.zeros(0)
    if pooled.size < 2:
        raise ConfigError(f"speaker {speaker_id!r} has too few voiced frames to fit pitch stats")
    std = float(pooled.std())
    if not std > 0:
        raise ConfigError(f"speaker {speaker_id!r} has zero pitch variance")
    return SpeakerPitchStats(str(speaker_id), float(pooled.mean()), std)


def normalize_pitch(contour, stats, clamp=True):
    """Map F0 so the speaker's voiced frames have mean 0.5 and std 0.25.

    A fully unvoiced contour maps to the neutral value 0.5 everywhere.
    """
    if not stats.std_f0 > 0:
        raise ConfigError("pitch stats must have std_f0 > 0")
    filled = interpolate_unvoiced(contour)
    if filled is None:
        out = np.full(len(contour.f0), PITCH_TARGET_MEAN)
    else:
        out = (filled - stats.mean_f0) / stats.std_f0 * PITCH_TARGET_STD + PITCH_TARGET_MEAN
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def scale_energy(energy, corpus_min, corpus_max):
    if not corpus_max > corpus_min:
        raise ConfigError(f"degenerate energy statistics: min={corpus_min}, max={corpus_max}")
    e = np.asarray(energy, dtype=np.float64)
    return np.clip((e - corpus_min) / (corpus_max - corpus_min), 0.0, 1.0).astype(np.float32)


def quantize(values, n_bins=256):
    """Uniform half-open bins on [0, 1], top bin inclusive of 1.0."""
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)) or np.any(v < 0.0) or np.any(v > 1.0):
        raise InvalidInput("quantize expects values in [0, 1]")
    return np.minimum(np.floor(v * n_bins), n_bins - 1).astype(np.int64)


def signal_power(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def snr_gain(p_clean, p_noise, snr_db):
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def measure_snr(speech, noise):
    return 10.0 * np.log10(signal_power(speech) / signal_power(noise))


def _noise_segment(noise, length, rng, max_tries=16):
    if len(noise) < length:
        reps = int(np.ceil(length / len(noise)))
        noise = np.tile(noise, reps)
    span = len(noise) - length
    for attempt in range(max_tries):
        if attempt == 0 and rng is None:
            offset = 0
        else:
            rng = rng if rng is not None else np.random.default_rng(attempt)
            offset = int(rng.integers(0, span + 1)) if span > 0 else 0
        seg = noise[offset: offset + length]
        if signal_power(seg) > 0:
            return seg
    raise InvalidInput("noise has no non-silent segment of the required length")


def mix_at_snr(clean, noise, snr_db, rng=None, sample_rates=None, return_components=False):
    """Add ``noise`` to ``clean`` at ``snr_db``.

    Noise shorter than the clean signal is looped; longer noise is cut at a
    random offset drawn from ``rng`` (offset 0 without one).  If the mixture
    would clip, both components are scaled down together, which leaves the
    ratio untouched.
    """
    if sample_rates is not None and sample_rates[0] != sample_rates[1]:
        raise InvalidInput("clean and noise sample rates differ")
    c = _check_waveform(clean).astype(np.float64)
    n = _check_waveform(noise).astype(np.float64)
    p_clean = signal_power(c)
    if p_clean == 0:
        raise InvalidInput("clean signal is all zeros")
    if signal_power(n) == 0:
        raise InvalidInput("noise signal is all zeros")
    seg = _noise_segment(n, len(c), rng)
    g = snr_gain(p_clean, signal_power(seg), snr_db)
    scaled = g * seg
    mixed = c + scaled
    peak = np.max(np.abs(mixed))
    if peak > 1.0:
        mixed /= peak
        c = c / peak
        scaled = scaled / peak
    mixed = mixed.astype(np.float32)
    if return_components:
        return mixed, c, scaled
    return mixed


def mel_to_waveform(mel, cfg=None, iterations=60, seed=0):
    """Invert a log-mel spectrogram by Griffin-Lim through the pseudo-inverse mel basis.

    Output has ``(T - 1) * hop`` samples.
    """
    cfg = cfg or ModelConfig()
    if iterations < 1:
        raise InvalidInput("iterations must be >= 1")
    m = np.asarray(mel, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != cfg.n_mels:
        raise InvalidInput(f"mel must be [T, {cfg.n_mels}], got {m.shape}")
    inv = _mel_pinv(cfg.sample_rate, cfg.filter_length, cfg.n_mels, cfg.mel_fmin, cfg.mel_fmax)
    mag = np.maximum(inv @ np.exp(m.T), 0.0)
    wav = librosa.griffinlim(
        mag,
        n_iter=iterations,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        n_fft=cfg.filter_length,
        window="hann",
        center=True,
        pad_mode="constant",
        init="random",
        random_state=seed,
    )
    peak = np.max(np.abs(wav)) if wav.size else 0.0
    if peak > 1.0:
        wav = wav / peak
    return wav.astype(np.float32)


def load_wav(path, sample_rate=22050):
    """Read a wav file as float32 mono in [-1, 1], resampled to ``sample_rate``."""
    sr, data = wavfile.read(path)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if sr != sample_rate:
        g = np.gcd(int(sr), int(sample_rate))
        data = signal.resample_poly(data, sample_rate // g, sr // g)
    return np.clip(data, -1.0, 1.0).astype(np.float32)


def save_wav(path, samples, sample_rate=22050):
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    wavfile.write(path, sample_rate, (x * 32767.0).astype(np.int16))
