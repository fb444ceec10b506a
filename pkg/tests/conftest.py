import numpy as np
import pytest
import torch

from styler import AUDIO_FACTORS, ModelConfig
from styler.model import Styler
from styler.pipeline import Batch, FeatureDataset, preprocess
from styler.toy import make_toy_corpus

SPEAKERS = ["spk_a", "spk_b"]


def tiny_config(**overrides):
    base = dict(
        n_symbols=16,
        hidden_dim=32,
        fft_filter_dim=64,
        conv_dim_duration=32,
        conv_dim_noise=32,
        conv_dim_pitch=48,
        conv_dim_energy=48,
        blstm_size_default=8,
        blstm_size_duration=10,
        predictor_filter_dim=32,
        speaker_dim=32,
        classifier_hidden=32,
    )
    base.update(overrides)
    return ModelConfig.small(**base)


def make_model(cfg=None, seed=0, speakers=SPEAKERS):
    torch.manual_seed(seed)
    return Styler(cfg or tiny_config(), speakers)


def random_durations(rng, n, t):
    """n nonnegative ints summing to t (t >= n), each >= 1."""
    cuts = np.sort(rng.choice(np.arange(1, t), size=n - 1, replace=False)) if n > 1 else np.array([], int)
    return np.diff(np.concatenate([[0], cuts, [t]])).astype(np.int64)


def random_batch(cfg, shapes, seed=0, labels=None, speakers=None):
    """Synthetic padded batch; ``shapes`` is a list of (N, T) per item."""
    rng = np.random.default_rng(seed)
    B = len(shapes)
    n_max = max(n for n, _ in shapes)
    t_max = max(t for _, t in shapes)
    phone_ids = torch.zeros(B, n_max, dtype=torch.long)
    durations = torch.zeros(B, n_max, dtype=torch.long)
    mel = torch.zeros(B, t_max, cfg.n_mels)
    aug = torch.zeros(B, t_max, cfg.n_mels)
    pbins = torch.zeros(B, t_max, dtype=torch.long)
    ebins = torch.zeros(B, t_max, dtype=torch.long)
    ptgt = torch.zeros(B, n_max)
    etgt = torch.zeros(B, n_max)
    for b, (n, t) in enumerate(shapes):
        phone_ids[b, :n] = torch.from_numpy(rng.integers(1, cfg.n_symbols, n))
        durations[b, :n] = torch.from_numpy(random_durations(rng, n, t))
        mel[b, :t] = torch.from_numpy(rng.normal(-4, 2, (t, cfg.n_mels)).astype(np.float32))
        aug[b, :t] = mel[b, :t] + torch.from_numpy(rng.normal(0, 0.5, (t, cfg.n_mels)).astype(np.float32))
        pbins[b, :t] = torch.from_numpy(rng.integers(0, cfg.n_bins, t))
        ebins[b, :t] = torch.from_numpy(rng.integers(0, cfg.n_bins, t))
        ptgt[b, :n] = torch.from_numpy(rng.uniform(0, 1, n).astype(np.float32))
        etgt[b, :n] = torch.from_numpy(rng.uniform(0, 1, n).astype(np.float32))
    labels = torch.tensor(labels if labels is not None else rng.integers(0, 2, B), dtype=torch.long)
    enc_mel = torch.where(labels.view(B, 1, 1).bool(), aug, mel)
    phone_lengths = torch.tensor([n for n, _ in shapes])
    frame_lengths = torch.tensor([t for _, t in shapes])
    return Batch(
        utt_ids=[f"u{b}" for b in range(B)],
        speaker_ids=speakers or [SPEAKERS[b % 2] for b in range(B)],
        phone_ids=phone_ids,
        phone_lengths=phone_lengths,
        phone_mask=torch.arange(n_max)[None] < phone_lengths[:, None],
        durations=durations,
        frame_lengths=frame_lengths,
        frame_mask=torch.arange(t_max)[None] < frame_lengths[:, None],
        enc_inputs={"duration": enc_mel, "noise": enc_mel, "pitch": pbins, "energy": ebins},
        clean_mel=mel,
        noisy_target_mel=enc_mel,
        pitch_target=ptgt,
        energy_target=etgt,
        labels=labels,
    )


def sub_batch(batch, idx):
    """Items ``idx`` of a batch, re-padded to their own maxima."""
    idx = list(idx)
    n = int(batch.phone_lengths[idx].max())
    t = int(batch.frame_lengths[idx].max())
    return Batch(
        utt_ids=[batch.utt_ids[i] for i in idx],
        speaker_ids=[batch.speaker_ids[i] for i in idx],
        phone_ids=batch.phone_ids[idx, :n],
        phone_lengths=batch.phone_lengths[idx],
        phone_mask=batch.phone_mask[idx, :n],
        durations=batch.durations[idx, :n],
        frame_lengths=batch.frame_lengths[idx],
        frame_mask=batch.frame_mask[idx, :t],
        enc_inputs={f: v[idx, :t] for f, v in batch.enc_inputs.items()},
        clean_mel=batch.clean_mel[idx, :t],
        noisy_target_mel=batch.noisy_target_mel[idx, :t],
        pitch_target=batch.pitch_target[idx, :n],
        energy_target=batch.energy_target[idx, :n],
        labels=batch.labels[idx],
    )


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_corpus(root / "corpus", speakers=("spk_a", "spk_b", "spk_c"), utts_per_speaker=4,
                    seed=7, heldout=("spk_c",), corrupt=2)
    return root / "corpus"


@pytest.fixture(scope="session")
def toy_run(toy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("toyrun")
    summary = preprocess(toy_corpus, out, noise_dir=toy_corpus / "noise", augment=True, seed=11)
    return out, summary


@pytest.fixture(scope="session")
def toy_dataset(toy_run):
    out, _ = toy_run
    return FeatureDataset(out / "manifest.jsonl", split="train", cfg=ModelConfig.small())


@pytest.fixture(scope="session")
def factors():
    return AUDIO_FACTORS


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line[1])
