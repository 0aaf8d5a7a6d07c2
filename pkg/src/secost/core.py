"""Sequential co-supervision: target mixing, losses, and the stage loop.

A base network is trained on the weak labels.  Each later stage trains a
freshly initialised network of the same architecture on a convex mix of the
labels and the previous network's predictions, then promotes it to teacher.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics, model as wels
from .data import Dataset, crop_eval, make_batches
from .nn import Adam

log = logging.getLogger(__name__)

P_MIN = 1e-7
P_MAX = 1.0 - 1e-7

SECO_MAGIC = b"SECO"
SECO_VERSION = 1


class LengthMismatch(ValueError):
    pass


class AlphaOutOfRange(ValueError):
    pass


class WeightsNotConvex(ValueError):
    pass


class StageError(RuntimeError):
    pass


# -- targets and losses ------------------------------------------------------------

def _vec(v):
    return np.asarray(v, dtype=np.float64)


def _same_length(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise LengthMismatch(f"inputs have mismatched shapes {sorted(shapes)}")


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha={alpha} outside [0, 1]")


def clamp_probs(p):
    return np.clip(_vec(p), P_MIN, P_MAX)


def bce_loss(p, t) -> float:
    """Binary cross-entropy averaged over classes (and over rows, if 2-D)."""
    p, t = _vec(p), _vec(t)
    _same_length(p, t)
    p = clamp_probs(p)
    return float(np.mean(-t * np.log(p) - (1.0 - t) * np.log1p(-p)))


def bce_grad(p, t) -> np.ndarray:
    """d bce_loss / d p for a single target vector (zero where the clamp is active)."""
    p, t = _vec(p), _vec(t)
    _same_length(p, t)
    pc = clamp_probs(p)
    g = (pc - t) / (pc * (1.0 - pc)) / p.shape[-1]
    return np.where((p > P_MIN) & (p < P_MAX), g, 0.0)


def mix_targets(y, y_teacher, alpha) -> np.ndarray:
    """alpha * y + (1 - alpha) * y_teacher."""
    _check_alpha(alpha)
    y, yt = _vec(y), _vec(y_teacher)
    _same_length(y, yt)
    return alpha * y + (1.0 - alpha) * yt


def _check_weights(weights, n_teachers):
    w = _vec(weights)
    if w.ndim != 1 or len(w) != n_teachers + 1:
        raise LengthMismatch(f"need {n_teachers + 1} weights (ground truth + teachers), got {w.shape}")
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise WeightsNotConvex(f"weights {w.tolist()} are not a convex combination")
    return w


def mix_targets_multi(y, teachers, weights) -> np.ndarray:
    """sum_k weights[k] * source_k with source_0 = y and source_k = teachers[k-1]."""
    w = _check_weights(weights, len(teachers))
    sources = [_vec(y)] + [_vec(t) for t in teachers]
    _same_length(*sources)
    out = np.zeros_like(sources[0])
    for wk, src in zip(w, sources):
        out += wk * src
    return out


def _log_odds_against(p):
    p = clamp_probs(p)
    return np.log1p(-p) - np.log(p)


def decomposed_loss(p, y, y_teacher, alpha) -> float:
    """Mixed-target BCE split into a scaled ground-truth term plus a teacher term.

    l(p, alpha*y) + (1 - alpha) * y_teacher * log((1 - p) / p), class-averaged.
    Equal to ``bce_loss(p, mix_targets(y, y_teacher, alpha))``.
    """
    _check_alpha(alpha)
    p, y, yt = _vec(p), _vec(y), _vec(y_teacher)
    _same_length(p, y, yt)
    pc = clamp_probs(p)
    gt = -alpha * y * np.log(pc) - (1.0 - alpha * y) * np.log1p(-pc)
    return float(np.mean(gt + (1.0 - alpha) * yt * _log_odds_against(pc)))


def decomposed_loss_multi(p, y, teachers, weights) -> float:
    w = _check_weights(weights, len(teachers))
    p, y = _vec(p), _vec(y)
    tv = [_vec(t) for t in teachers]
    _same_length(p, y, *tv)
    pc = clamp_probs(p)
    a0 = w[0]
    total = -a0 * y * np.log(pc) - (1.0 - a0 * y) * np.log1p(-pc)
    lo = _log_odds_against(pc)
    for wk, t in zip(w[1:], tv):
        total = total + wk * t * lo
    return float(np.mean(total))


def loss_relative_to_truth(p, y, y_teacher, alpha) -> float:
    """Plain BCE against ``y`` plus the teacher-disagreement correction.

    bce(p, y) + (1 - alpha) * mean((y_teacher - y) * log((1 - p) / p)); the
    correction vanishes when the teacher reproduces the labels.
    """
    _check_alpha(alpha)
    p, y, yt = _vec(p), _vec(y), _vec(y_teacher)
    _same_length(p, y, yt)
    return bce_loss(p, y) + (1.0 - alpha) * float(np.mean((yt - y) * _log_odds_against(p)))


# -- schedules ---------------------------------------------------------------------

@dataclass
class StageSchedule:
    alphas: list[float]

    def __post_init__(self):
        self.alphas = [float(a) for a in self.alphas]
        for a in self.alphas:
            _check_alpha(a)

    @property
    def n_stages(self) -> int:
        return len(self.alphas)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    patience: int = 5
    steps_per_epoch: int | None = None
    eval_batch_size: int = 32
    frames: int = 1024
    threads: int = 1


# -- soft-target cache -------------------------------------------------------------

def encode_soft_targets(ids: list[str], probs: np.ndarray) -> bytes:
    probs = np.ascontiguousarray(probs, dtype="<f4")
    parts = [SECO_MAGIC, struct.pack("<III", SECO_VERSION, len(ids), probs.shape[1])]
    for rec_id, row in zip(ids, probs):
        b = rec_id.encode("utf-8")
        parts.append(struct.pack("<I", len(b)) + b + row.tobytes())
    return b"".join(parts)


def decode_soft_targets(data: bytes) -> tuple[list[str], np.ndarray]:
    if len(data) < 16 or data[:4] != SECO_MAGIC:
        raise IOError("not a SECO soft-target cache")
    version, n, c = struct.unpack_from("<III", data, 4)
    if version != SECO_VERSION:
        raise IOError(f"SECO version {version} unsupported")
    off = 16
    ids, rows = [], np.empty((n, c), dtype=np.float32)
    try:
        for i in range(n):
            (ln,) = struct.unpack_from("<I", data, off)
            off += 4
            ids.append(data[off:off + ln].decode("utf-8"))
            off += ln
            if off + 4 * c > len(data):
                raise IOError("truncated SECO record")
            rows[i] = np.frombuffer(data, dtype="<f4", count=c, offset=off)
            off += 4 * c
    except struct.error as exc:
        raise IOError(f"corrupt SECO cache: {exc}") from exc
    if off != len(data):
        raise IOError("trailing bytes in SECO cache")
    return ids, rows


def predict(model: wels.WelsNet, dataset: Dataset, frames: int = 1024, batch_size: int = 32,
            threads: int = 1) -> np.ndarray:
    """Recording-level probabilities in manifest order (eval mode, center crop/pad)."""
    chunks = [list(range(i, min(i + batch_size, len(dataset)))) for i in range(0, len(dataset), batch_size)]

    def run(idx):
        x = np.stack([crop_eval(dataset.features[i], frames) for i in idx])[:, None]
        return model.forward_batch(x, training=False)[1]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    if not parts:
        return np.zeros((0, model.config.n_classes), dtype=np.float32)
    return np.concatenate(parts).astype(np.float32)


@dataclass
class SoftTargetCache:
    path: Path
    hit: bool
    targets: np.ndarray


def infer_soft_targets(teacher: wels.WelsNet, dataset: Dataset, cache_dir, stage: int,
                       frames: int = 1024, batch_size: int = 32, threads: int = 1) -> SoftTargetCache:
    """Teacher predictions for every recording, cached per (stage, teacher hash)."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    digest = teacher.fingerprint()
    path = cache_dir / f"stage{stage:02d}_{digest[:16]}.seco"
    if path.exists():
        ids, rows = decode_soft_targets(path.read_bytes())
        pos = {rid: i for i, rid in enumerate(ids)}
        if all(rid in pos for rid in dataset.ids) and rows.shape[1] == dataset.n_classes:
            return SoftTargetCache(path, True, rows[[pos[r] for r in dataset.ids]])
        log.info("soft-target cache %s does not cover the dataset; recomputing", path.name)
    probs = predict(teacher, dataset, frames, batch_size, threads)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_soft_targets(dataset.ids, probs))
    os.replace(tmp, path)
    return SoftTargetCache(path, False, probs)


# -- training ------------------------------------------------------------------------

def evaluate(model: wels.WelsNet, dataset: Dataset, class_names=None, frames: int = 1024,
             batch_size: int = 32, threads: int = 1) -> metrics.EvalReport:
    if len(dataset) == 0:
        raise metrics.EmptyDataset("empty evaluation set")
    scores = predict(model, dataset, frames, batch_size, threads)
    return metrics.evaluate_scores(scores, dataset.labels, class_names)


@dataclass
class TrainResult:
    model: wels.WelsNet
    best_epoch: int
    best_val_map: float
    best_val_mauc: float
    history: list[dict] = field(default_factory=list)


EpochHook = Callable[[int, int, dict], None]


def train_model(config: wels.WelsConfig, train: Dataset, targets: np.ndarray, val: Dataset,
                cfg: TrainConfig, seed: int, stage: int = 0, on_epoch: EpochHook | None = None) -> TrainResult:
    """Adam on mixed-target BCE; keeps the epoch with the best validation mAP."""
    targets = np.asarray(targets, dtype=np.float32)
    if targets.shape != (len(train), config.n_classes):
        raise LengthMismatch(f"targets {targets.shape} do not match {len(train)} x {config.n_classes}")
    net = wels.build(config, seed=seed)
    opt = Adam(lr=cfg.lr)
    best = (-1.0, -1, float("nan"), None)
    history, stale = [], 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for step, (x, t, _) in enumerate(make_batches(train, cfg.batch_size, cfg.frames, "train",
                                                      seed=seed, epoch=epoch, targets=targets)):
            if cfg.steps_per_epoch is not None and step >= cfg.steps_per_epoch:
                break
            net.zero_grad()
            _, p = net.forward_batch(x, training=True)
            losses.append(bce_loss(p, t))
            net.backward(bce_grad(p, t) / len(x))
            opt.step(net.parameters(), net.gradients())
        report = evaluate(net, val, frames=cfg.frames, batch_size=cfg.eval_batch_size, threads=cfg.threads)
        row = {"stage": stage, "epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_map": report.mAP, "val_mauc": report.mAUC, "seconds": time.perf_counter() - t0}
        history.append(row)
        log.info("stage %d epoch %d loss %.4f val mAP %.4f mAUC %.4f (%.0fs)", stage, epoch,
                 row["train_loss"], report.mAP, report.mAUC, row["seconds"])
        if report.mAP > best[0]:
            best = (report.mAP, epoch, report.mAUC, net.state_dict())
            stale = 0
        else:
            stale += 1
        if on_epoch is not None:
            on_epoch(stage, epoch, row)
        if stale >= cfg.patience:
            break
    net.load_state_dict(best[3])
    return TrainResult(net, best[1], best[0], best[2], history)


def stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


# -- orchestration -------------------------------------------------------------------

@dataclass
class StageRow:
    stage: int
    alpha: float | None
    val_map: float
    val_mauc: float
    checkpoint_path: str

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class SecostResult:
    model: wels.WelsNet
    rows: list[StageRow]
    trained_stages: list[int]


REPORT_NAME = "stage_report.jsonl"


def _read_report(path: Path) -> list[StageRow]:
    if not path.exists():
        return []
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(StageRow(**json.loads(line)))
    return rows


def run_secost(train: Dataset, val: Dataset, schedule: StageSchedule, model_cfg: wels.WelsConfig,
               train_cfg: TrainConfig, run_dir, seed: int = 0,
               on_epoch: EpochHook | None = None) -> SecostResult:
    """Train the base network, then one fresh student per schedule entry.

    Every finished stage leaves a checkpoint and a report line in ``run_dir``;
    calling again with the same arguments resumes after the last finished
    stage.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    report_path = run_dir / REPORT_NAME
    done = _read_report(report_path)
    alphas: list[float | None] = [None] + list(schedule.alphas)
    rows: list[StageRow] = []
    for r in done:
        s = r.stage
        if s >= len(alphas):
            break   # a longer schedule ran here before; its later stages are left alone
        if r.alpha != alphas[s] or s != len(rows):
            raise StageError(f"existing report row {r} does not match the requested schedule")
        if not (run_dir / r.checkpoint_path).exists():
            # Report lines past a missing checkpoint are stale.
            report_path.write_text("".join(x.to_json() + "\n" for x in rows), encoding="utf-8")
            break
        rows.append(r)

    teacher = wels.load(run_dir / rows[-1].checkpoint_path) if rows else None
    trained = []
    for s in range(len(rows), len(alphas)):
        alpha = alphas[s]
        labels = train.labels
        if s == 0:
            targets = labels
        else:
            cache = infer_soft_targets(teacher, train, run_dir / "cache", s, train_cfg.frames,
                                       train_cfg.eval_batch_size, train_cfg.threads)
            targets = mix_targets(labels, cache.targets, alpha).astype(np.float32)
        log.info("stage %d: alpha=%s, training fresh network", s, alpha)
        result = train_model(model_cfg, train, targets, val, train_cfg, stage_seed(seed, s), s, on_epoch)
        ckpt_rel = f"checkpoints/stage_{s:02d}.wels"
        meta = {"stage": s, "alpha": alpha, "seed": seed, "init_seed": stage_seed(seed, s),
                "best_epoch": result.best_epoch, "val_map": result.best_val_map}
        if s > 0:
            meta["teacher_hash"] = teacher.fingerprint()
        wels.save(result.model, run_dir / ckpt_rel, meta)
        row = StageRow(s, alpha, result.best_val_map, result.best_val_mauc, ckpt_rel)
        with open(report_path, "a", encoding="utf-8") as fh:
            fh.write(row.to_json() + "\n")
        rows.append(row)
        trained.append(s)
        teacher = result.model
    return SecostResult(teacher, rows, trained)
