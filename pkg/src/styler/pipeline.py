"""Corpus preprocessing, batching, training and checkpointing."""

import json
import logging
import os
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from styler import AUDIO_FACTORS, tensorio
from styler.adversarial import grl_lambda_at
from styler.config import ModelConfig, TrainConfig
from styler.dsp import (
    FeatureBundle,
    SpeakerPitchStats,
    extract_features,
    fit_pitch_stats,
    load_wav,
    mix_at_snr,
    normalize_pitch,
    quantize,
    scale_energy,
)
from styler.errors import CheckpointError, ConfigError, DataError
from styler.model import Styler
from styler.objectives import compute_losses
from styler.predictors import compute_variance_targets

logger = logging.getLogger(__name__)

PAD = "<pad>"
MANIFEST_NAME = "manifest.jsonl"
MANIFEST_VERSION = 1


# --------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    utt_id: str
    speaker_id: str
    audio_path: str
    phoneme_ids: list
    durations: list
    text: str = ""
    split: str = "train"
    clean_features: Optional[str] = None
    augmented_features: Optional[str] = None
    snr_db: Optional[float] = None
    noise_path: Optional[str] = None

    def __post_init__(self):
        if len(self.phoneme_ids) < 1:
            raise DataError(f"{self.utt_id}: empty phoneme sequence")
        if len(self.phoneme_ids) != len(self.durations):
            raise DataError(f"{self.utt_id}: {len(self.phoneme_ids)} phonemes but {len(self.durations)} durations")

    def to_dict(self):
        return asdict(self)


class SymbolTable:
    """Phoneme symbol <-> id mapping; id 0 is padding."""

    def __init__(self, symbols):
        symbols = [s for s in symbols if s != PAD]
        self.symbols = [PAD] + list(dict.fromkeys(symbols))
        self.ids = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def encode(self, phonemes):
        if isinstance(phonemes, str):
            phonemes = phonemes.split()
        try:
            return [self.ids[p] for p in phonemes]
        except KeyError as exc:
            raise DataError(f"unknown phoneme symbol {exc.args[0]!r}") from None

    def decode(self, ids):
        return [self.symbols[i] for i in ids]


def write_manifest(path, header, entries):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"__header__": header}, sort_keys=True) + "\n")
        for e in entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def read_manifest(path):
    header, entries = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "__header__" in rec:
                header = rec["__header__"]
            else:
                entries.append(ManifestEntry(**rec))
    return header, entries


# --------------------------------------------------------------------------
# preprocessing


def read_annotations(corpus_dir):
    path = Path(corpus_dir) / "annotations.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no annotations.jsonl in {corpus_dir}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_splits(corpus_dir):
    path = Path(corpus_dir) / "splits.json"
    if not path.is_file():
        return {}
    with open(path, encoding="utf-8") as fh:
        splits = json.load(fh)
    return {spk: name for name, spks in splits.items() for spk in spks}


def _noise_files(noise_dir):
    files = sorted(Path(noise_dir).glob("*.wav"))
    if not files:
        raise ConfigError(f"no .wav noise files in {noise_dir}")
    return files


def preprocess(corpus_dir, out_dir, noise_dir=None, augment=False, cfg=None, seed=1234,
               snr_range=(5.0, 25.0), force=False):
    """Extract clean (and one noise-mixed) feature bundle per utterance and write a manifest.

    Returns a summary dict.  Entries whose durations do not sum to the clean
    mel frame count are rejected and listed with a reason.
    """
    cfg = cfg or ModelConfig()
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"corpus directory {corpus_dir} not found")
    if augment and (noise_dir is None or not Path(noise_dir).is_dir()):
        raise ConfigError("--augment needs an existing noise directory")
    manifest_path = out_dir / MANIFEST_NAME
    if manifest_path.exists() and not force:
        raise ConfigError(f"{manifest_path} exists; pass force=True to overwrite")
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    annotations = read_annotations(corpus_dir)
    split_of = read_splits(corpus_dir)
    symbols = SymbolTable(sorted({p for a in annotations for p in _phonemes(a)}))
    noises = _noise_files(noise_dir) if augment else []
    rng = np.random.default_rng(seed)

    entries, rejected, clean_bundles = [], [], {}
    for ann in annotations:
        utt = str(ann["utt_id"])
        try:
            wav = load_wav(corpus_dir / ann["audio"], cfg.sample_rate)
            bundle = extract_features(wav, cfg)
            durations = [int(d) for d in ann["durations"]]
            if sum(durations) != bundle.n_frames:
                raise DataError(f"durations sum to {sum(durations)} but audio has {bundle.n_frames} frames")
            entry = ManifestEntry(
                utt_id=utt,
                speaker_id=str(ann["speaker_id"]),
                audio_path=str(ann["audio"]),
                phoneme_ids=symbols.encode(_phonemes(ann)),
                durations=durations,
                text=ann.get("text", ""),
                split=split_of.get(str(ann["speaker_id"]), "train"),
            )
        except (DataError, OSError, ValueError, KeyError) as exc:
            logger.warning("rejecting %s: %s", utt, exc)
            rejected.append({"utt_id": utt, "reason": str(exc)})
            continue

        entry.clean_features = f"features/{utt}.clean.styf"
        tensorio.write_tensors(out_dir / entry.clean_features, bundle.to_tensors())
        clean_bundles[utt] = bundle
        if augment:
            noise_path = noises[int(rng.integers(len(noises)))]
            snr = float(rng.uniform(*snr_range))
            noise = load_wav(noise_path, cfg.sample_rate)
            mixed = mix_at_snr(wav, noise, snr, rng=rng)
            entry.augmented_features = f"features/{utt}.aug.styf"
            entry.snr_db = snr
            entry.noise_path = str(noise_path)
            tensorio.write_tensors(out_dir / entry.augmented_features, extract_features(mixed, cfg).to_tensors())
        entries.append(entry)

    header = _fit_corpus_stats(entries, clean_bundles, cfg)
    header.update(
        version=MANIFEST_VERSION,
        symbols=symbols.symbols,
        speakers=sorted({e.speaker_id for e in entries}),
        sample_rate=cfg.sample_rate,
        hop_length=cfg.hop_length,
        seed=seed,
        snr_range=list(snr_range),
        augmented=bool(augment),
    )
    write_manifest(manifest_path, header, entries)
    n_bundles = sum(1 + (e.augmented_features is not None) for e in entries)
    return {
        "manifest": str(manifest_path),
        "entries": len(entries),
        "rejected": len(rejected),
        "rejections": rejected,
        "bundles": n_bundles,
        "speakers": header["speakers"],
        "energy_min": header["energy_min"],
        "energy_max": header["energy_max"],
    }


def _phonemes(ann):
    p = ann["phonemes"]
    return p.split() if isinstance(p, str) else list(p)


def _fit_corpus_stats(entries, bundles, cfg):
    train = [e for e in entries if e.split == "train"] or entries
    if not train:
        raise DataError("no usable utterances")
    energies = np.concatenate([bundles[e.utt_id].energy for e in train])
    e_min, e_max = float(energies.min()), float(energies.max())
    if not e_max > e_min:
        raise ConfigError("energy statistics are degenerate (constant energy over the train split)")
    stats = {}
    for spk in sorted({e.speaker_id for e in entries}):
        # train speakers use their train utterances; held-out speakers their own
        own = [e for e in train if e.speaker_id == spk] or [e for e in entries if e.speaker_id == spk]
        s = fit_pitch_stats(spk, [bundles[e.utt_id].pitch for e in own])
        stats[spk] = {"mean_f0": s.mean_f0, "std_f0": s.std_f0}
    return {"energy_min": e_min, "energy_max": e_max, "pitch_stats": stats}


# --------------------------------------------------------------------------
# datasets and batching


class FeatureNormalizer:
    """Turns frame features into model inputs with the corpus statistics."""

    def __init__(self, header, cfg=None):
        self.cfg = cfg or ModelConfig()
        self.energy_min = header["energy_min"]
        self.energy_max = header["energy_max"]
        self.pitch_stats = {
            spk: SpeakerPitchStats(spk, v["mean_f0"], v["std_f0"]) for spk, v in header["pitch_stats"].items()
        }

    def stats_for(self, speaker_id, bundle=None):
        if speaker_id in self.pitch_stats:
            return self.pitch_stats[speaker_id]
        if bundle is None:
            raise DataError(f"no pitch statistics for speaker {speaker_id!r}")
        # unseen reference speaker: normalise by the reference itself
        return fit_pitch_stats(speaker_id, [bundle.pitch])

    def pitch(self, bundle, speaker_id):
        return normalize_pitch(bundle.pitch, self.stats_for(speaker_id, bundle))

    def energy(self, bundle):
        return scale_energy(bundle.energy, self.energy_min, self.energy_max)

    def encoder_inputs(self, bundle, speaker_id):
        n_bins = self.cfg.n_bins
        mel = torch.from_numpy(np.asarray(bundle.mel, dtype=np.float32))
        pitch = torch.from_numpy(quantize(self.pitch(bundle, speaker_id), n_bins))
        energy = torch.from_numpy(quantize(self.energy(bundle), n_bins))
        return {"duration": mel, "noise": mel, "pitch": pitch, "energy": energy}


@dataclass
class DatasetItem:
    entry: ManifestEntry
    phone_ids: torch.Tensor
    durations: torch.Tensor
    clean_mel: torch.Tensor
    clean_inputs: dict
    aug_inputs: Optional[dict]
    aug_mel: Optional[torch.Tensor]
    pitch_target: torch.Tensor
    energy_target: torch.Tensor


class FeatureDataset:
    """All bundles of one manifest split, held in memory."""

    def __init__(self, manifest_path, split="train", cfg=None, entries=None):
        self.root = Path(manifest_path).parent
        self.header, all_entries = read_manifest(manifest_path)
        self.cfg = cfg or ModelConfig()
        self.normalizer = FeatureNormalizer(self.header, self.cfg)
        if entries is None:
            entries = [e for e in all_entries if split is None or e.split == split]
        if not entries:
            raise DataError(f"no entries in split {split!r}")
        self.items = [self._load(e) for e in entries]

    @property
    def speakers(self):
        return self.header["speakers"]

    @property
    def symbols(self):
        return self.header["symbols"]

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def bundle(self, entry, augmented=False):
        rel = entry.augmented_features if augmented else entry.clean_features
        return FeatureBundle.from_tensors(tensorio.read_tensors(self.root / rel))

    def _load(self, entry):
        clean = self.bundle(entry)
        spk = entry.speaker_id
        norm = self.normalizer
        pitch_frames = clean.f0 if self.cfg.pitch_target_hz else norm.pitch(clean, spk)
        targets = compute_variance_targets(entry.durations, pitch_frames, norm.energy(clean))
        aug_inputs = aug_mel = None
        if entry.augmented_features:
            aug = self.bundle(entry, augmented=True)
            aug_inputs = norm.encoder_inputs(aug, spk)
            aug_mel = aug_inputs["duration"]
        return DatasetItem(
            entry=entry,
            phone_ids=torch.tensor(entry.phoneme_ids, dtype=torch.long),
            durations=torch.from_numpy(targets.duration),
            clean_mel=torch.from_numpy(clean.mel),
            clean_inputs=norm.encoder_inputs(clean, spk),
            aug_inputs=aug_inputs,
            aug_mel=aug_mel,
            pitch_target=torch.from_numpy(targets.pitch),
            energy_target=torch.from_numpy(targets.energy),
        )


@dataclass
class Batch:
    utt_ids: list
    speaker_ids: list
    phone_ids: torch.Tensor  # [B, N]
    phone_lengths: torch.Tensor
    phone_mask: torch.Tensor
    durations: torch.Tensor  # [B, N]
    frame_lengths: torch.Tensor
    frame_mask: torch.Tensor
    enc_inputs: dict  # factor -> [B, T, ...]
    clean_mel: torch.Tensor  # [B, T, n_mels]
    noisy_target_mel: torch.Tensor  # encoder-side mel
    pitch_target: torch.Tensor
    energy_target: torch.Tensor
    labels: torch.Tensor  # 0 original, 1 augmented
    extra: dict = field(default_factory=dict)


def _pad(seqs, value=0):
    n = max(s.shape[0] for s in seqs)
    out = seqs[0].new_full((len(seqs), n) + tuple(seqs[0].shape[1:]), value)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out


def draw_labels(n, augment_probability, rng):
    return (rng.random(n) < augment_probability).astype(np.int64)


def make_batch(items, rng=None, augment_probability=0.5, labels=None):
    """Pad items into a batch; each item independently gets an augmentation label.

    Label 1 feeds the noise-mixed features to the encoders; targets for the
    predictors and clean decoding are always the clean features.
    """
    if not items:
        raise DataError("cannot batch an empty list")
    if labels is None:
        rng = rng if rng is not None else np.random.default_rng()
        labels = draw_labels(len(items), augment_probability, rng)
    labels = [int(l) if it.aug_inputs is not None else 0 for l, it in zip(labels, items)]
    enc = [it.aug_inputs if l else it.clean_inputs for it, l in zip(items, labels)]
    phone_lengths = torch.tensor([it.phone_ids.shape[0] for it in items])
    frame_lengths = torch.tensor([it.clean_mel.shape[0] for it in items])
    n_max, t_max = int(phone_lengths.max()), int(frame_lengths.max())
    return Batch(
        utt_ids=[it.entry.utt_id for it in items],
        speaker_ids=[it.entry.speaker_id for it in items],
        phone_ids=_pad([it.phone_ids for it in items]),
        phone_lengths=phone_lengths,
        phone_mask=torch.arange(n_max)[None] < phone_lengths[:, None],
        durations=_pad([it.durations for it in items]),
        frame_lengths=frame_lengths,
        frame_mask=torch.arange(t_max)[None] < frame_lengths[:, None],
        enc_inputs={f: _pad([e[f] for e in enc]) for f in AUDIO_FACTORS},
        clean_mel=_pad([it.clean_mel for it in items]),
        noisy_target_mel=_pad([e["duration"] for e in enc]),
        pitch_target=_pad([it.pitch_target for it in items]),
        energy_target=_pad([it.energy_target for it in items]),
        labels=torch.tensor(labels, dtype=torch.long),
    )


# --------------------------------------------------------------------------
# training


def noam_lr(step, d_model, warmup_steps, scale=1.0):
    """Inverse-square-root schedule with linear warm-up; peaks at ``warmup_steps``."""
    step = max(1, step)
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


class Trainer:
    def __init__(self, model, dataset, tcfg=None, step=0):
        self.model = model
        self.dataset = dataset
        self.tcfg = tcfg or TrainConfig()
        self.step = step
        self.rng = np.random.default_rng(self.tcfg.seed)
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=self.lr_at(1), betas=self.tcfg.betas, eps=self.tcfg.eps
        )

    def lr_at(self, step):
        return noam_lr(step, self.model.cfg.hidden_dim, self.tcfg.warmup_steps, self.tcfg.lr_scale)

    def sample_batch(self):
        n, bs = len(self.dataset), self.tcfg.batch_size
        idx = self.rng.permutation(n)[:bs] if bs <= n else self.rng.integers(0, n, size=bs)
        items = [self.dataset[i] for i in sorted(idx)]
        return make_batch(items, self.rng, self.tcfg.augment_probability)

    def train_step(self, batch=None):
        """One optimisation step; returns (LossBreakdown, learning rate)."""
        batch = batch if batch is not None else self.sample_batch()
        self.model.train()
        lr = self.lr_at(self.step + 1)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        lambd = grl_lambda_at(self.step + 1, self.tcfg.grl_lambda, self.tcfg.grl_warmup_steps)
        outputs = self.model(batch, noise_modeling=self.tcfg.noise_modeling, grl_lambda=lambd)
        total, breakdown = compute_losses(outputs, batch, self.tcfg.noise_modeling)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.tcfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        return breakdown, lr

    def fit(self, steps, log_path=None, ckpt_dir=None, ckpt_every=0, on_step=None):
        log = open(log_path, "a", encoding="utf-8") if log_path else None
        history = []
        try:
            for _ in range(steps):
                breakdown, lr = self.train_step()
                rec = {"step": self.step, "lr": lr, **breakdown.to_dict()}
                history.append(rec)
                if log:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
                if ckpt_dir and ckpt_every and self.step % ckpt_every == 0:
                    self.save(Path(ckpt_dir) / f"ckpt_{self.step:07d}.zip")
                if on_step:
                    on_step(rec)
        finally:
            if log:
                log.close()
        return history

    def save(self, path):
        save_checkpoint(path, self.model, self.optimizer, self.step, self.rng, self.tcfg, self.dataset.header)
        return path

    @classmethod
    def resume(cls, path, dataset, tcfg=None):
        state = load_checkpoint(path)
        tcfg = tcfg or state["train_config"]
        trainer = cls(state["model"], dataset, tcfg, step=state["step"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        if state["rng"] is not None:
            trainer.rng.bit_generator.state = state["rng"]
        if state["torch_rng"] is not None:
            torch.set_rng_state(state["torch_rng"])
        return trainer


# --------------------------------------------------------------------------
# checkpoints


_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _optimizer_tensors(model, optimizer):
    names = {id(p): n for n, p in model.named_parameters()}
    state = optimizer.state_dict()
    flat_ids = [pid for g in state["param_groups"] for pid in g["params"]]
    params = [p for g in optimizer.param_groups for p in g["params"]]
    tensors = {}
    for pid, p in zip(flat_ids, params):
        st = state["state"].get(pid)
        if not st:
            continue
        for key in sorted(st):
            tensors[f"{names[id(p)]}/{key}"] = torch.as_tensor(st[key]).detach().float().numpy()
    groups = [{k: v for k, v in g.items() if k != "params"} for g in state["param_groups"]]
    return tensors, groups


def save_checkpoint(path, model, optimizer=None, step=0, rng=None, tcfg=None, data_header=None):
    """Write a zip archive: header.json + model.styf (+ optim.styf, rng.styf)."""
    header = {
        "format": "styler-checkpoint",
        "version": 1,
        "model_config": model.cfg.to_dict(),
        "speakers": list(model.speakers),
        "step": int(step),
        "train_config": tcfg.to_dict() if tcfg is not None else None,
        "rng": rng.bit_generator.state if rng is not None else None,
        "data": data_header,
        "parameters": [[n, list(t.shape)] for n, t in model.state_dict().items()],
    }
    tensors = {n: t.detach().cpu().numpy() for n, t in model.state_dict().items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        if optimizer is not None:
            opt_tensors, groups = _optimizer_tensors(model, optimizer)
            header["optimizer_groups"] = groups
            _zip_write(zf, "optim.styf", tensorio.dumps(opt_tensors))
            _zip_write(zf, "rng.styf", tensorio.dumps({"torch": torch.get_rng_state().numpy()}))
        _zip_write(zf, "header.json", json.dumps(header, sort_keys=True, indent=1))
        _zip_write(zf, "model.styf", tensorio.dumps(tensors))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, cfg=None):
    """Restore a checkpoint; ``cfg`` overrides the stored ModelConfig (then validated).

    Returns a dict with model, optimizer (a state dict or None), step, rng,
    torch_rng, train_config, data header.
    """
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        names = set(zf.namelist())
        if not {"header.json", "model.styf"} <= names:
            raise CheckpointError(f"{path} is missing header.json or model.styf")
        header = json.loads(zf.read("header.json"))
        stored = tensorio.loads(zf.read("model.styf"))
        opt = tensorio.loads(zf.read("optim.styf")) if "optim.styf" in names else None
        rng_t = tensorio.loads(zf.read("rng.styf")) if "rng.styf" in names else None

    try:
        cfg = cfg or ModelConfig.from_dict(header["model_config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from exc
    model = Styler(cfg, header["speakers"])
    expected = model.state_dict()
    for name, tensor in expected.items():
        if name not in stored:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if tuple(stored[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(stored[name].shape)}, model expects {tuple(tensor.shape)}"
            )
    extra = [n for n in stored if n not in expected]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
    model.load_state_dict(
        {n: torch.from_numpy(stored[n]).to(expected[n].dtype) for n in expected}, strict=True
    )

    optimizer_state = None
    if opt is not None:
        optimizer_state = _rebuild_optimizer_state(model, opt, header.get("optimizer_groups", []))
    tc = header.get("train_config")
    return {
        "model": model,
        "optimizer": optimizer_state,
        "step": header.get("step", 0),
        "rng": header.get("rng"),
        "torch_rng": torch.from_numpy(rng_t["torch"].astype(np.uint8)) if rng_t else None,
        "train_config": TrainConfig.from_dict(tc) if tc else None,
        "data": header.get("data"),
        "header": header,
    }


def _rebuild_optimizer_state(model, tensors, groups):
    by_param = {}
    for key, arr in tensors.items():
        pname, field_name = key.rsplit("/", 1)
        by_param.setdefault(pname, {})[field_name] = torch.from_numpy(arr)
    state = {}
    params = []
    for i, (name, _) in enumerate(model.named_parameters()):
        params.append(i)
        if name in by_param:
            st = by_param[name]
            if "step" in st:
                st["step"] = st["step"].reshape(())
            state[i] = st
    if not groups:
        return None
    g = dict(groups[0])
    g["params"] = params
    return {"state": state, "param_groups": [g]}
