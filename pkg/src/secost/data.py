"""Manifests, synthetic weakly labelled corpora and fixed-length batching."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import dsp

TRAIN_FRAMES = 1024


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class DuplicateId(ValueError):
    def __init__(self, line: int, rec_id: str = ""):
        super().__init__(f"line {line}: duplicate id {rec_id!r}")
        self.line = line


class LabelOutOfRange(ValueError):
    def __init__(self, line: int, label: int):
        super().__init__(f"line {line}: label {label} out of range")
        self.line = line


class MissingFeature(FileNotFoundError):
    pass


@dataclass
class RecordingEntry:
    id: str
    labels: list[int]
    feat: str | None = None
    wav: str | None = None

    def to_json(self) -> str:
        d = {"id": self.id}
        if self.feat is not None:
            d["feat"] = self.feat
        if self.wav is not None:
            d["wav"] = self.wav
        d["labels"] = list(self.labels)
        return json.dumps(d)


def load_manifest(path, n_classes: int | None = None) -> list[RecordingEntry]:
    entries, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, str(exc)) from None
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), str):
                raise ParseError(lineno, "expected an object with a string 'id'")
            labels = obj.get("labels", [])
            if not isinstance(labels, list) or not all(isinstance(v, int) and not isinstance(v, bool)
                                                       for v in labels):
                raise ParseError(lineno, "'labels' must be a list of integers")
            if "feat" not in obj and "wav" not in obj:
                raise ParseError(lineno, "entry needs 'feat' or 'wav'")
            for v in labels:
                if v < 0 or (n_classes is not None and v >= n_classes):
                    raise LabelOutOfRange(lineno, v)
            if obj["id"] in seen:
                raise DuplicateId(lineno, obj["id"])
            seen.add(obj["id"])
            entries.append(RecordingEntry(id=obj["id"], labels=sorted(set(labels)),
                                          feat=obj.get("feat"), wav=obj.get("wav")))
    return entries


def write_manifest(path, entries):
    Path(path).write_text("".join(e.to_json() + "\n" for e in entries), encoding="utf-8")


def multi_hot(entries, n_classes: int) -> np.ndarray:
    y = np.zeros((len(entries), n_classes), dtype=np.float32)
    for i, e in enumerate(entries):
        y[i, e.labels] = 1.0
    return y


@dataclass
class Dataset:
    """Manifest entries with their log-mel features loaded into memory."""

    entries: list[RecordingEntry]
    features: list[np.ndarray]
    n_classes: int

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return multi_hot(self.entries, self.n_classes)

    def __len__(self):
        return len(self.entries)


def load_dataset(manifest, n_classes: int, root=None) -> Dataset:
    manifest = Path(manifest)
    root = Path(root) if root is not None else manifest.parent
    entries = load_manifest(manifest, n_classes)
    feats = []
    for e in entries:
        if e.feat is None:
            raise MissingFeature(f"{e.id}: no feature file in manifest (run featurize)")
        p = root / e.feat
        if not p.exists():
            raise MissingFeature(f"{e.id}: {p} not found")
        feats.append(dsp.read_lmel(p).values)
    return Dataset(entries, feats, n_classes)


# -- batching -----------------------------------------------------------------------

def _pad_edge(x: np.ndarray, before: int, after: int) -> np.ndarray:
    return np.pad(x, ((before, after), (0, 0)), mode="edge")


def crop_train(x: np.ndarray, frames: int, rng) -> np.ndarray:
    if len(x) < frames:
        x = _pad_edge(x, 0, frames - len(x))
    start = int(rng.integers(0, len(x) - frames + 1))
    return x[start:start + frames]


def crop_eval(x: np.ndarray, frames: int) -> np.ndarray:
    if len(x) < frames:
        short = frames - len(x)
        return _pad_edge(x, short // 2, short - short // 2)
    start = (len(x) - frames) // 2
    return x[start:start + frames]


def entry_rng(seed: int, epoch: int, rec_id: str):
    return np.random.default_rng([seed, epoch, zlib.crc32(rec_id.encode("utf-8"))])


def make_batches(dataset: Dataset, batch_size: int, frames: int = TRAIN_FRAMES, mode: str = "eval",
                 seed: int = 0, epoch: int = 0, targets: np.ndarray | None = None
                 ) -> Iterator[tuple[np.ndarray, np.ndarray, list[int]]]:
    """Yield ``(inputs (B, 1, frames, n_mels), targets (B, |C|), indices)``.

    Train mode shuffles and takes random crops, both derived from
    (seed, epoch, recording id); eval mode keeps manifest order and
    center-pads/crops.
    """
    targets = dataset.labels if targets is None else np.asarray(targets, dtype=np.float32)
    order = np.arange(len(dataset))
    if mode == "train":
        order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    elif mode != "eval":
        raise ValueError(f"unknown batch mode {mode!r}")
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size].tolist()
        xs = []
        for i in idx:
            x = dataset.features[i]
            if mode == "train":
                xs.append(crop_train(x, frames, entry_rng(seed, epoch, dataset.entries[i].id)))
            else:
                xs.append(crop_eval(x, frames))
        yield np.stack(xs)[:, None].astype(np.float32), targets[idx], idx


# -- synthetic corpus -----------------------------------------------------------------

@dataclass
class SynthConfig:
    n_classes: int = 8
    n_train: int = 2000
    n_val: int = 200
    n_eval: int = 400
    clip_seconds: float = 10.0
    mean_labels: float = 2.7
    flip_rate: float = 0.2
    seed: int = 0
    sample_rate: int = 16000
    event_min_s: float = 0.5
    event_max_s: float = 3.0
    snr_db_min: float = -6.0
    snr_db_max: float = 6.0
    f0_min: float = 120.0
    f0_max: float = 1800.0

    def validate(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.flip_rate < 1.0:
            raise ValueError("flip_rate must lie in [0, 1)")
        if self.mean_labels < 1.0:
            raise ValueError("mean_labels must be >= 1")
        return self


@dataclass
class ClassTimbre:
    f0: float
    n_harmonics: int
    rolloff: float
    am_rate: float
    am_depth: float
    vibrato: float


def class_timbres(cfg: SynthConfig) -> list[ClassTimbre]:
    rng = np.random.default_rng([cfg.seed, 7919])
    f0s = np.geomspace(cfg.f0_min, cfg.f0_max, cfg.n_classes)
    f0s = f0s[rng.permutation(cfg.n_classes)]
    out = []
    for k in range(cfg.n_classes):
        out.append(ClassTimbre(
            f0=float(f0s[k]),
            n_harmonics=int(rng.integers(2, 8)),
            rolloff=float(rng.uniform(0.4, 1.6)),
            am_rate=float(rng.uniform(1.5, 12.0)),
            am_depth=float(rng.uniform(0.2, 0.9)),
            vibrato=float(rng.uniform(0.0, 0.02)),
        ))
    return out


def pink_noise(n: int, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / (np.std(x) + 1e-12)


def render_event(t: ClassTimbre, n: int, sr: int, rng) -> np.ndarray:
    tt = np.arange(n) / sr
    f0 = t.f0 * (1.0 + rng.uniform(-0.03, 0.03))
    phase_mod = t.vibrato * np.sin(2 * np.pi * 5.0 * tt)
    x = np.zeros(n)
    for h in range(1, t.n_harmonics + 1):
        fh = f0 * h
        if fh >= sr / 2 * 0.95:
            break
        x += h ** (-t.rolloff) * np.sin(2 * np.pi * fh * tt * (1 + phase_mod) + rng.uniform(0, 2 * np.pi))
    am = 1.0 - t.am_depth * 0.5 * (1 + np.sin(2 * np.pi * t.am_rate * tt + rng.uniform(0, 2 * np.pi)))
    ramp = min(int(0.02 * sr), n // 2)
    env = np.ones(n)
    env[:ramp] = np.linspace(0, 1, ramp)
    env[n - ramp:] = np.linspace(1, 0, ramp)
    x *= am * env
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def _draw_label_count(cfg: SynthConfig, rng) -> int:
    # 1 + Poisson(mean - 1), capped at the class count.
    return int(min(cfg.n_classes, 1 + rng.poisson(cfg.mean_labels - 1.0)))


def corrupt_labels(labels: list[int], n_classes: int, rho: float, rng) -> list[int]:
    """Drop each positive with prob ``rho``; add Binomial(n_pos, rho) spurious ones."""
    kept = [c for c in labels if rng.random() >= rho]
    n_add = int(rng.binomial(len(labels), rho)) if labels else 0
    absent = [c for c in range(n_classes) if c not in labels]
    if n_add and absent:
        kept += rng.choice(absent, size=min(n_add, len(absent)), replace=False).tolist()
    return sorted(set(int(c) for c in kept))


def synth_clip(cfg: SynthConfig, timbres, rng):
    """Render one clip; returns (samples, clean labels, event log)."""
    sr = cfg.sample_rate
    n = int(round(cfg.clip_seconds * sr))
    x = 0.05 * pink_noise(n, rng)
    k = _draw_label_count(cfg, rng)
    classes = sorted(rng.choice(cfg.n_classes, size=k, replace=False).tolist())
    events = []
    for c in classes:
        dur = float(rng.uniform(cfg.event_min_s, min(cfg.event_max_s, cfg.clip_seconds)))
        m = int(dur * sr)
        onset = int(rng.integers(0, n - m + 1))
        snr = float(rng.uniform(cfg.snr_db_min, cfg.snr_db_max))
        ev = render_event(timbres[c], m, sr, rng) * 0.05 * 10 ** (snr / 20)
        x[onset:onset + m] += ev
        events.append({"class": int(c), "onset_s": onset / sr, "duration_s": m / sr, "snr_db": snr})
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return x.astype(np.float32), [int(c) for c in classes], events


def synth_corpus(cfg: SynthConfig, out_dir, featurize: bool = True) -> dict[str, Path]:
    """Write WAVs, manifests, classes.txt and a generator log under ``out_dir``.

    Train labels are corrupted at ``cfg.flip_rate``; val/eval labels are clean.
    With ``featurize`` the LMEL features are written too and referenced from
    the manifests.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    if featurize:
        (out / "feat").mkdir(parents=True, exist_ok=True)
    timbres = class_timbres(cfg)
    names = [f"synth_{k:02d}_f{int(round(t.f0))}hz" for k, t in enumerate(timbres)]
    (out / "classes.txt").write_text("".join(f"{i}\t{nm}\n" for i, nm in enumerate(names)), encoding="utf-8")
    paths = {}
    log_lines = []
    for split, count in (("train", cfg.n_train), ("val", cfg.n_val), ("eval", cfg.n_eval)):
        entries = []
        for i in range(count):
            rec_id = f"{split}_{i:05d}"
            rng = np.random.default_rng([cfg.seed, zlib.crc32(rec_id.encode())])
            samples, clean, events = synth_clip(cfg, timbres, rng)
            labels = clean
            if split == "train" and cfg.flip_rate > 0:
                labels = corrupt_labels(clean, cfg.n_classes, cfg.flip_rate, rng)
            buf = dsp.SampleBuffer(samples, cfg.sample_rate)
            wav_rel = f"wav/{rec_id}.wav"
            dsp.write_wav(out / wav_rel, buf)
            feat_rel = None
            if featurize:
                feat_rel = f"feat/{rec_id}.lmel"
                dsp.write_lmel(out / feat_rel, dsp.logmel(dsp.read_wav(out / wav_rel)))
            entries.append(RecordingEntry(id=rec_id, labels=labels, feat=feat_rel, wav=wav_rel))
            log_lines.append(json.dumps({"id": rec_id, "split": split, "clean_labels": clean,
                                         "labels": labels, "events": events}))
        paths[split] = out / f"{split}.jsonl"
        write_manifest(paths[split], entries)
    (out / "generator_log.jsonl").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True), encoding="utf-8")
    paths["classes"] = out / "classes.txt"
    return paths


def read_classes(path) -> list[str]:
    names = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            idx, _, name = line.partition("\t")
            names.append(name or idx)
    return names
