import json
import zipfile

import numpy as np
import pytest
import torch

from styler import ModelConfig, TrainConfig
from styler.errors import CheckpointError, ConfigError, DataError
from styler.objectives import per_item_losses
from styler.pipeline import (
    FeatureDataset,
    SymbolTable,
    Trainer,
    draw_labels,
    load_checkpoint,
    make_batch,
    noam_lr,
    preprocess,
    read_manifest,
    save_checkpoint,
    seed_everything,
    write_manifest,
)
from styler.model import Styler

from conftest import make_model, random_batch, sub_batch, tiny_config


class TestPreprocess:
    def test_counts(self, toy_run):
        out, summary = toy_run
        # 12 good utterances plus 2 corrupted extras; each kept one is clean + augmented
        assert summary["rejected"] == 2
        assert summary["entries"] == 12
        assert summary["bundles"] == 24
        header, entries = read_manifest(out / "manifest.jsonl")
        assert len(entries) == 12
        for e in entries:
            assert (out / e.clean_features).exists() and (out / e.augmented_features).exists()
            assert 5.0 <= e.snr_db <= 25.0
        assert {e.split for e in entries} == {"train", "test"}

    def test_header_stats(self, toy_run):
        header, _ = read_manifest(toy_run[0] / "manifest.jsonl")
        assert header["energy_max"] > header["energy_min"] >= 0
        assert set(header["pitch_stats"]) >= {"spk_a", "spk_b"}
        assert header["symbols"][0] == "<pad>"

    def test_refuses_overwrite(self, toy_corpus, toy_run):
        with pytest.raises(ConfigError):
            preprocess(toy_corpus, toy_run[0], noise_dir=toy_corpus / "noise", augment=True)

    def test_augment_needs_noise(self, toy_corpus, tmp_path):
        with pytest.raises(ConfigError):
            preprocess(toy_corpus, tmp_path / "x", augment=True)

    def test_frame_alignment(self, toy_dataset):
        for it in toy_dataset.items:
            T = it.clean_mel.shape[0]
            assert int(it.durations.sum()) == T
            assert it.clean_inputs["pitch"].shape == (T,)
            assert it.aug_inputs["duration"].shape == it.clean_mel.shape
            assert 0 <= float(it.pitch_target.min()) and float(it.pitch_target.max()) <= 1


def test_manifest_round_trip(tmp_path, toy_run):
    header, entries = read_manifest(toy_run[0] / "manifest.jsonl")
    write_manifest(tmp_path / "m.jsonl", header, entries)
    h2, e2 = read_manifest(tmp_path / "m.jsonl")
    assert h2 == header
    assert [e.to_dict() for e in e2] == [e.to_dict() for e in entries]


def test_symbol_table():
    table = SymbolTable(["<pad>", "a", "b"])
    assert table.encode(["a", "b", "a"]) == [1, 2, 1]
    with pytest.raises(DataError):
        table.encode(["c"])


class TestBatching:
    def test_padding_and_masks(self, toy_dataset):
        items = toy_dataset.items[:3]
        b = make_batch(items, labels=[1, 0, 1])
        n = [it.phone_ids.shape[0] for it in items]
        t = [it.clean_mel.shape[0] for it in items]
        assert b.phone_ids.shape == (3, max(n))
        assert b.clean_mel.shape == (3, max(t), 80)
        assert b.phone_mask.sum(1).tolist() == n
        assert b.frame_mask.sum(1).tolist() == t
        for i, it in enumerate(items):
            assert torch.all(b.phone_ids[i, n[i]:] == 0)
            assert torch.equal(b.clean_mel[i, : t[i]], it.clean_mel)
        assert torch.equal(b.enc_inputs["duration"][0, : t[0]], items[0].aug_inputs["duration"])
        assert torch.equal(b.enc_inputs["duration"][1, : t[1]], items[1].clean_inputs["duration"])
        # targets stay clean whatever the label
        assert torch.equal(b.pitch_target[0, : n[0]], items[0].pitch_target)

    def test_label_rate(self):
        rng = np.random.default_rng(0)
        labels = draw_labels(10_000, 0.5, rng)
        assert abs(labels.mean() - 0.5) < 0.01
        assert abs(draw_labels(10_000, 0.2, rng).mean() - 0.2) < 0.01

    def test_empty_batch(self):
        with pytest.raises(DataError):
            make_batch([])


def test_noam_schedule():
    lrs = [noam_lr(s, 256, 4000) for s in range(1, 20_000, 50)]
    peak = 1 + 50 * int(np.argmax(lrs))
    assert abs(peak - 4000) <= 50
    assert noam_lr(4000, 256, 4000) == pytest.approx(256 ** -0.5 * 4000 ** -0.5)
    assert noam_lr(100, 256, 4000) < noam_lr(200, 256, 4000)
    assert noam_lr(8000, 256, 4000) < noam_lr(4000, 256, 4000)


def test_padding_neutrality():
    cfg = tiny_config()
    m = make_model(cfg).eval()
    b = random_batch(cfg, [(6, 25), (3, 8), (4, 14)], seed=5)
    with torch.no_grad():
        together = per_item_losses(m(b), b)
        for i in range(3):
            alone = per_item_losses(m(sub_batch(b, [i])), sub_batch(b, [i]))
            for k in together:
                assert abs(float(together[k][i]) - float(alone[k][0])) < 1e-5, (k, i)


def small_trainer(dataset, seed=0, step=0, **tc):
    cfg = tiny_config(n_symbols=len(dataset.symbols))
    seed_everything(seed)
    model = Styler(cfg, dataset.speakers)
    return Trainer(model, dataset, TrainConfig(batch_size=2, warmup_steps=50, seed=seed, **tc), step=step)


class TestTraining:
    def test_seeded_rerun(self, toy_dataset):
        runs = []
        for _ in range(2):
            tr = small_trainer(toy_dataset, seed=3)
            runs.append([tr.train_step()[0].loss_total for _ in range(4)])
        assert runs[0] == runs[1]

    def test_checkpoint_bytes_stable(self, toy_dataset, tmp_path):
        tr = small_trainer(toy_dataset)
        tr.fit(2)
        a = tr.save(tmp_path / "a.zip")
        state = load_checkpoint(a)
        opt = torch.optim.Adam(state["model"].parameters())
        opt.load_state_dict(state["optimizer"])
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng"]
        torch.set_rng_state(state["torch_rng"])
        b = save_checkpoint(tmp_path / "b.zip", state["model"], opt, state["step"], rng,
                            state["train_config"], state["data"])
        assert a.read_bytes() == b.read_bytes()
        assert zipfile.ZipFile(a).namelist() == ["optim.styf", "rng.styf", "header.json", "model.styf"]

    def test_resume_equivalence(self, toy_dataset, tmp_path):
        tr = small_trainer(toy_dataset, seed=4)
        tr.fit(3)
        path = tr.save(tmp_path / "mid.zip")
        straight = [r["loss_total"] for r in tr.fit(3)]
        resumed = Trainer.resume(path, toy_dataset)
        assert resumed.step == 3
        again = [r["loss_total"] for r in resumed.fit(3)]
        np.testing.assert_allclose(again, straight, rtol=1e-5, atol=1e-5)

    def test_fit_logs_jsonl(self, toy_dataset, tmp_path):
        tr = small_trainer(toy_dataset)
        tr.fit(2, log_path=tmp_path / "log.jsonl", ckpt_dir=tmp_path, ckpt_every=2)
        recs = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in recs] == [1, 2]
        assert (tmp_path / "ckpt_0000002.zip").exists()

    def test_altered_config_rejected(self, toy_dataset, tmp_path):
        tr = small_trainer(toy_dataset)
        path = tr.save(tmp_path / "c.zip")
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(path, cfg=tr.model.cfg.replace(hidden_dim=48, speaker_dim=48))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.zip")
        (tmp_path / "junk.zip").write_bytes(b"not a zip")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk.zip")
