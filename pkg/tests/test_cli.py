import json

import numpy as np
import pytest

from styler import tensorio
from styler.cli import main

TINY = dict(
    hidden_dim=32, fft_filter_dim=64, conv_dim_duration=32, conv_dim_noise=32,
    conv_dim_pitch=48, conv_dim_energy=48, blstm_size_default=8, blstm_size_duration=10,
    predictor_filter_dim=32, speaker_dim=32, classifier_hidden=32,
)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["toy-corpus", "--out", str(root / "corpus"), "--speakers", "spk_a,spk_b", "--utts", "2"]) == 0
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["preprocess", "--corpus", str(root / "corpus"), "--noise", str(root / "corpus" / "noise"),
                 "--out", str(root / "feats"), "--augment", "--seed", "2"]) == 0
    assert main(["train", "--manifest", str(root / "feats" / "manifest.jsonl"), "--steps", "3",
                 "--batch-size", "2", "--warmup", "10", "--small", "--config", str(cfg),
                 "--out", str(root / "ckpt"), "--plot"]) == 0
    return root


def ref_wav(root):
    return sorted((root / "corpus" / "wavs").glob("*.wav"))[0]


def phones(root):
    ann = json.loads((root / "corpus" / "annotations.jsonl").read_text().splitlines()[0])
    return ann["phonemes"]


def test_train_outputs(workspace):
    log = [json.loads(l) for l in (workspace / "ckpt" / "loss_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2, 3]
    assert (workspace / "ckpt" / "ckpt_0000003.zip").exists()
    assert (workspace / "ckpt" / "loss.png").stat().st_size > 0
    for r in log:
        assert abs(r["loss_total"] - sum(r[k] for k in
                   ("l_mel_clean", "l_duration", "l_pitch", "l_energy", "l_mel_noisy", "l_aug"))) < 1e-6


def test_resume_adds_steps(workspace, capsys):
    code, out, _ = run(capsys, "train", "--manifest", workspace / "feats" / "manifest.jsonl", "--steps", 2,
                       "--resume", workspace / "ckpt" / "ckpt_0000003.zip", "--out", workspace / "ckpt2", "--json")
    assert code == 0
    summary = json.loads(out)
    assert summary["start_step"] == 3 and summary["step"] == 5


def test_no_noise_modeling_logs_zeros(workspace, capsys, tmp_path):
    code, _, _ = run(capsys, "train", "--manifest", workspace / "feats" / "manifest.jsonl", "--steps", 3,
                     "--batch-size", 2, "--small", "--config", workspace / "tiny.json",
                     "--no-noise-modeling", "--out", tmp_path)
    assert code == 0
    for line in (tmp_path / "loss_log.jsonl").read_text().splitlines():
        r = json.loads(line)
        assert r["l_mel_noisy"] == 0.0 and r["l_aug"] == 0.0
        assert r["loss_total"] == r["loss_clean"]


def synth(capsys, root, out, *extra):
    return run(capsys, "synthesize", "--ckpt", root / "ckpt" / "ckpt_0000003.zip", "--text", phones(root),
               "--ref", ref_wav(root), "--speaker", "spk_a", "--out", out, "--json", *extra)


def test_synthesize_outputs(workspace, capsys, tmp_path):
    code, out, err = synth(capsys, workspace, tmp_path / "s", "--wav", "--plot")
    assert code == 0, err
    summary = json.loads(out)
    mel = tensorio.read_tensors(tmp_path / "s" / "mel.styf")
    assert mel["mel"].shape == (summary["frames"], 80)
    assert int(mel["durations"].sum()) == summary["frames"]
    assert (tmp_path / "s" / "audio.wav").exists() and (tmp_path / "s" / "mel.png").exists()


def test_mask_changes_output(workspace, capsys, tmp_path):
    synth(capsys, workspace, tmp_path / "a")
    code, out, _ = synth(capsys, workspace, tmp_path / "b", "--mask", "pitch,energy")
    assert code == 0 and json.loads(out)["masked"] == ["energy", "pitch"]
    a = tensorio.read_tensors(tmp_path / "a" / "mel.styf")["mel"]
    b = tensorio.read_tensors(tmp_path / "b" / "mel.styf")["mel"]
    assert a.shape != b.shape or not np.array_equal(a, b)


def test_render_noise(workspace, capsys, tmp_path):
    code, out, _ = synth(capsys, workspace, tmp_path / "n", "--render-noise")
    assert code == 0 and json.loads(out)["noise_decoding"]
    t = tensorio.read_tensors(tmp_path / "n" / "mel.styf")
    assert not np.array_equal(t["mel"], t["mel_noisy"])


def test_ablation_grid(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "ablate", "--ckpt", workspace / "ckpt" / "ckpt_0000003.zip",
                       "--ref", ref_wav(workspace), "--text", phones(workspace), "--out", tmp_path / "abl", "--json")
    assert code == 0
    cells = json.loads(out)["cells"]
    assert len(cells) == 9
    assert all(c["finite"] for c in cells)
    assert {c["cell"] for c in cells} >= {"baseline", "mask_noise", "mask_text", "noise_only"}
    assert (tmp_path / "abl" / "grid.png").exists()
    index = (tmp_path / "abl" / "index.md").read_text()
    assert index.count("| mask_") == 6


def test_run_dir_env(workspace, capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("STYLER_RUN_DIR", str(workspace))
    code, _, _ = run(capsys, "synthesize", "--ckpt", "ckpt/ckpt_0000003.zip", "--text", phones(workspace),
                     "--ref", ref_wav(workspace), "--speaker", "spk_a", "--out", "rel_out")
    assert code == 0 and (workspace / "rel_out" / "mel.styf").exists()


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert run(capsys, "train")[0] == 2
        assert run(capsys, "nonsense")[0] == 2

    def test_missing_inputs(self, capsys, tmp_path):
        assert run(capsys, "preprocess", "--corpus", tmp_path / "nope", "--out", tmp_path / "o")[0] == 1
        assert run(capsys, "train", "--manifest", tmp_path / "nope.jsonl")[0] == 1
        assert run(capsys, "synthesize", "--ckpt", tmp_path / "x.zip", "--text", "a", "--out", tmp_path)[0] == 1

    def test_config_errors(self, workspace, capsys, tmp_path):
        code, _, err = synth(capsys, workspace, tmp_path / "m", "--mask", "timbre")
        assert code == 2 and "timbre" in err
        code, _, _ = synth(capsys, workspace, tmp_path / "u", "--speaker", "nobody")
        assert code == 2
        code, _, err = run(capsys, "synthesize", "--ckpt", workspace / "ckpt" / "ckpt_0000003.zip",
                           "--text", phones(workspace), "--speaker", "spk_a", "--out", tmp_path / "r")
        assert code == 2 and "reference" in err
        code, _, _ = run(capsys, "preprocess", "--corpus", workspace / "corpus", "--out", workspace / "feats")
        assert code == 2

    def test_augment_without_noise(self, workspace, capsys, tmp_path):
        assert run(capsys, "preprocess", "--corpus", workspace / "corpus", "--out", tmp_path, "--augment")[0] == 2

    def test_divergence_exit(self, workspace, capsys, tmp_path, monkeypatch):
        import styler.pipeline as pipeline
        from styler.errors import TrainingDiverged

        real = pipeline.Trainer.train_step

        def flaky(self, batch=None):
            if self.step >= 2:
                raise TrainingDiverged("non-finite loss terms: ['l_mel_clean']")
            return real(self, batch)

        monkeypatch.setattr(pipeline.Trainer, "train_step", flaky)
        code, _, err = run(capsys, "train", "--manifest", workspace / "feats" / "manifest.jsonl", "--steps", 5,
                           "--batch-size", 2, "--small", "--config", workspace / "tiny.json",
                           "--ckpt-every", 1, "--out", tmp_path)
        assert code == 3
        assert "ckpt_0000002.zip" in err
