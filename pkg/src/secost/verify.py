"""Self-contained correctness checks behind ``secost verify``.

Each check returns a :class:`CheckResult`; none needs a dataset on disk.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from . import core, dsp, metrics, nn
from . import model as wels


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


# -- 1. target mixing identities ----------------------------------------------------

def check_mixing_identity(n_draws: int = 1000, seed: int = 0, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_single = worst_multi = worst_truth = 0.0
    sizes = (1, 10, 527)
    for i in range(n_draws):
        c = sizes[i % 3]
        p = rng.uniform(1e-4, 1 - 1e-4, c)
        y = (rng.random(c) < 0.3).astype(np.float64)
        yt = rng.random(c)
        alpha = float(rng.choice([0.0, 1.0])) if i % 50 == 0 else float(rng.random())
        direct = core.bce_loss(p, core.mix_targets(y, yt, alpha))
        worst_single = max(worst_single, abs(direct - core.decomposed_loss(p, y, yt, alpha)))
        worst_truth = max(worst_truth, abs(direct - core.loss_relative_to_truth(p, y, yt, alpha)))
        n_t = 1 + i % 4
        teachers = [rng.random(c) for _ in range(n_t)]
        w = rng.dirichlet(np.ones(n_t + 1))
        w[-1] = 1.0 - w[:-1].sum()
        if w[-1] < 0:
            w = np.full(n_t + 1, 1.0 / (n_t + 1))
        direct_m = core.bce_loss(p, core.mix_targets_multi(y, teachers, w))
        worst_multi = max(worst_multi, abs(direct_m - core.decomposed_loss_multi(p, y, teachers, w)))
    worst = max(worst_single, worst_multi, worst_truth)
    return CheckResult("mixing identity", worst < tol,
                       f"max |direct - decomposed| single={worst_single:.2e} multi={worst_multi:.2e} "
                       f"vs-truth={worst_truth:.2e} over {n_draws} draws (tol {tol:g})")


# -- 2. finite-difference gradients -------------------------------------------------

FD_STEP = 1e-3
FD_TOL = 1e-3
FD_FLOOR = 1e-6


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), FD_FLOOR))


def _sample_coords(shape, rng, k):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [np.unravel_index(f, shape) for f in flat]


def _fd(f, arr, coords, h=FD_STEP):
    out = []
    for idx in coords:
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def gradcheck_layer(layer: nn.Layer, x: np.ndarray, rng, n_coords: int = 12) -> dict[str, float]:
    """Relative error of analytic vs central-difference gradients for ``sum(R * layer(x))``."""
    out = layer.forward(x, training=True)
    r = rng.standard_normal(out.shape)
    layer.zero_grad()
    dx = layer.backward(r.copy())
    grads = {k: g.copy() for k, g in layer.grads.items()}

    def f():
        return float(np.sum(layer.forward(x, training=True) * r))

    errs = {}
    coords = _sample_coords(x.shape, rng, n_coords)
    errs["input"] = rel_error([dx[c] for c in coords], _fd(f, x, coords))
    for name, p in layer.params.items():
        coords = _sample_coords(p.shape, rng, n_coords)
        errs[name] = rel_error([grads[name][c] for c in coords], _fd(f, p, coords))
    layer._cache = None
    return errs


def _away_from_zero(x, margin=0.05):
    return np.sign(x) * (np.abs(x) + margin) + (x == 0) * margin


def _separated(shape, rng, spacing=0.01):
    """Random values with pairwise gaps >= spacing, so max-routing is stable under FD steps."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape).astype(np.float64)


def layer_cases(rng):
    """One randomly shaped instance of every layer type."""
    n = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(4, 9)), int(rng.integers(4, 9))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((n, cin, h, w))
    conv = nn.Conv2d(cin, cout, (kh, kw), stride, pad, rng=rng, dtype=np.float64)
    conv.params["bias"] = rng.standard_normal(cout)
    conv.path = "im2col"
    yield "conv2d", conv, x
    direct = nn.Conv2d(cin, cout, (kh, kw), 1, pad, rng=rng, dtype=np.float64)
    direct.params["bias"] = rng.standard_normal(cout)
    direct.path = "direct"
    yield "conv2d[direct]", direct, x.copy()
    bn = nn.BatchNorm2d(cin, dtype=np.float64)
    bn.params["gamma"] = rng.uniform(0.5, 1.5, cin)
    bn.params["beta"] = rng.standard_normal(cin)
    yield "batchnorm", bn, rng.standard_normal((2, cin, h, w)) * 2 + 1
    yield "relu", nn.ReLU(), _away_from_zero(rng.standard_normal((n, cin, h, w)))
    yield "sigmoid", nn.Sigmoid(), rng.standard_normal((n, cin, h, w)) * 3
    size = int(rng.integers(2, 4))
    yield "maxpool", nn.Pool2d("max", size), _separated((n, cin, h, w), rng)
    yield "maxpool[overlap]", nn.Pool2d("max", size, 1), _separated((n, cin, h, w), rng)
    yield "avgpool", nn.Pool2d("avg", size, int(rng.integers(1, size + 1))), rng.standard_normal((n, cin, h, w))
    k = int(rng.integers(1, 6))
    yield "segment_mean", nn.SegmentPool("mean"), rng.standard_normal((n, cout, k, 1))
    yield "segment_max", nn.SegmentPool("max"), _separated((n, cout, k, 1), rng)


MINI_CONFIG = dict(n_classes=3, width_multiplier=1 / 64)


def routing_signature(net: wels.WelsNet) -> bytes:
    """Digest of every ReLU mask and max-pool winner recorded by the last training forward."""
    h = hashlib.blake2b(digest_size=16)
    for _, layer in [*net.layers, ("head", net.head)]:
        cache = layer._cache
        if isinstance(layer, nn.ReLU):
            h.update(np.packbits(cache).tobytes())
        elif isinstance(layer, (nn.Pool2d, nn.SegmentPool)) and cache[1] is not None:
            h.update(np.ascontiguousarray(cache[1]).tobytes())
    return h.digest()


@dataclass
class NetGradcheck:
    errors: dict[str, float]
    full_step: int      # coordinates checked at the nominal step
    reduced_step: int   # coordinates that needed a smaller, kink-free step
    skipped: int        # coordinates with a kink closer than MIN_FD_STEP


MIN_FD_STEP = 1e-7


def gradcheck_network(seed: int, frames: int | None = None, n_coords: int = 4,
                      h: float = FD_STEP) -> NetGradcheck:
    """End-to-end check of a tiny float64 WELS-Net under mixed-target BCE.

    The net is piecewise smooth (ReLU, max pooling).  When the +-h
    evaluations route differently from the unperturbed forward, the central
    difference straddles a kink and estimates nothing; the step is then halved
    until routing is stable on both sides.
    """
    rng = np.random.default_rng(seed)
    net = wels.WelsNet(wels.WelsConfig(**MINI_CONFIG), seed=seed, dtype=np.float64)
    if seed % 2:
        for name, layer in net.layers:
            if name.startswith("b1.conv"):
                layer.path = "direct"
    frames = frames or int(rng.choice([128, 160, 192]))
    x = rng.standard_normal((2, 1, frames, wels.N_MELS))
    t = core.mix_targets((rng.random((2, 3)) < 0.5).astype(float), rng.random((2, 3)), 0.3)

    def f():
        return core.bce_loss(net.forward_batch(x, training=True)[1], t), routing_signature(net)

    _, p = net.forward_batch(x, training=True)
    base_sig = routing_signature(net)
    net.zero_grad()
    dx = net.backward(np.stack([core.bce_grad(p[i], t[i]) for i in range(len(p))]) / len(p), input_grad=True)
    grads = {"input": dx, **{k: g.copy() for k, g in net.gradients().items()}}
    arrays = {"input": x, **net.parameters()}
    errors, full, reduced, skipped = {}, 0, 0, 0
    for name, arr in arrays.items():
        analytic, numeric = [], []
        for idx in _sample_coords(arr.shape, rng, n_coords):
            old, step = arr[idx], h
            while step >= MIN_FD_STEP:
                arr[idx] = old + step
                fp, sig_p = f()
                arr[idx] = old - step
                fm, sig_m = f()
                arr[idx] = old
                if sig_p == base_sig and sig_m == base_sig:
                    break
                step /= 2
            if step < MIN_FD_STEP:
                skipped += 1
                continue
            if step == h:
                full += 1
            else:
                reduced += 1
            analytic.append(grads[name][idx])
            numeric.append((fp - fm) / (2 * step))
        errors[name] = rel_error(analytic, numeric) if analytic else 0.0
    return NetGradcheck(errors, full, reduced, skipped)


def check_gradients(n_seeds: int = 20, tol: float = FD_TOL) -> CheckResult:
    worst, where = 0.0, ""
    full = reduced = skipped = 0
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        for name, layer, x in layer_cases(rng):
            for k, e in gradcheck_layer(layer, x, rng).items():
                if e > worst:
                    worst, where = e, f"{name}.{k} (seed {seed})"
        res = gradcheck_network(seed)
        full, reduced, skipped = full + res.full_step, reduced + res.reduced_step, skipped + res.skipped
        for k, e in res.errors.items():
            if e > worst:
                worst, where = e, f"mini-wels {k} (seed {seed})"
    passed = worst < tol and skipped == 0
    return CheckResult("gradient check", passed,
                       f"max relative error {worst:.2e} at {where} over {n_seeds} seeds (step {FD_STEP:g}, "
                       f"tol {tol:g}); mini-wels coordinates: {full} at full step, {reduced} at a reduced "
                       f"kink-free step, {skipped} unresolved")


# -- 3. architecture shapes ------------------------------------------------------------

def expected_layer_shapes(width_multiplier: float, n_classes: int) -> list[tuple[str, tuple]]:
    """Expected per-item output shape after each conv/pool/head for a 1024 x 64 input."""
    w = wels.WelsConfig(n_classes=n_classes, width_multiplier=width_multiplier).widths()
    rows = []
    for blk, (t, m) in zip(("b1", "b2", "b3", "b4"), ((1024, 64), (256, 16), (128, 8), (64, 4))):
        rows.append((f"{blk}.conv1", (w[blk], t, m)))
        rows.append((f"{blk}.conv2", (w[blk], t, m)))
        s = wels.POOL_SIZES[blk]
        rows.append((f"{blk}.pool", (w[blk], t // s, m // s)))
    rows += [("l1.conv", (w["l1"], 30, 1)), ("l2.conv", (w["l2"], 30, 1)), ("l3.conv", (w["l3"], 30, 1)),
             ("l4.conv", (n_classes, 30, 1)), ("P", (n_classes,))]
    return rows


def observed_shapes(net: wels.WelsNet, x: np.ndarray) -> list[tuple[str, tuple]]:
    rows = []
    h = x
    for name, layer in net.layers:
        h = layer.forward(h, training=False)
        if name.endswith(("conv", "conv1", "conv2", "pool")):
            rows.append((name, tuple(h.shape[1:])))
    rows.append(("P", tuple(net.head.forward(h, training=False).shape[1:])))
    return rows


def check_layer_shapes(n_classes: int = 527) -> CheckResult:
    bad = []
    x = np.random.default_rng(0).standard_normal((1, 1, 1024, 64)).astype(np.float32)
    for wm in (1.0, 1 / 8):
        net = wels.build(wels.WelsConfig(n_classes=n_classes, width_multiplier=wm), seed=0)
        got = observed_shapes(net, x)
        want = expected_layer_shapes(wm, n_classes)
        if got != want:
            bad.append(f"width {wm}: got {got}, want {want}")
    return CheckResult("layer shapes", not bad,
                       "; ".join(bad) if bad else f"segment |C|x30x1 and recording |C| for |C|={n_classes}, widths 1 and 1/8")


# -- 4. metric oracles -------------------------------------------------------------------

def brute_force_ap(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """AP of every (score vector, label vector) pair by pairwise rank counting.

    Exact integer arithmetic with a single final rounding (n <= 8).  Returns
    shape (n_score_vectors, n_label_vectors).
    """
    n = scores.shape[-1]
    j_le_i = np.tri(n, dtype=bool)                       # [i, j] -> j <= i
    s_i, s_j = scores[:, :, None], scores[:, None, :]
    above = (s_j > s_i) | ((s_j == s_i) & j_le_i)        # item j ranks at or above item i
    rank = above.sum(-1)                                 # (S, n)
    lab = labels.astype(np.int64)
    k = np.einsum("sij,lj->sli", above.astype(np.int64), lab)  # positives at or above i
    lcm = math.lcm(*range(1, n + 1))
    num = (lab[None] * k * (lcm // rank)[:, None, :]).sum(-1)
    return num / (lcm * lab.sum(-1))[None, :]


def brute_force_auc(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mann-Whitney AUC of every (score vector, label vector) pair by pair counting."""
    s_i, s_j = scores[:, :, None], scores[:, None, :]
    twice = (2 * (s_i > s_j) + (s_i == s_j)).astype(np.int64)  # 2 x credit of pair (i, j)
    lab = labels.astype(np.int64)
    wins = np.einsum("li,sij,lj->sl", lab, twice, 1 - lab)
    npos = lab.sum(-1)
    return (wins / 2) / (npos * (labels.shape[-1] - npos))[None, :]


ALPHABET = np.array([0.1, 0.4, 0.6, 0.9])
AP_TOL = 1e-15   # the oracle is correctly rounded; the implementation sums floats


def check_metric_oracles(max_len: int = 8, ap_tol: float = AP_TOL) -> CheckResult:
    problems = []
    n_ap = n_auc = 0
    worst_ap = 0.0
    for n in range(1, max_len + 1):
        score_sets = ALPHABET[np.array(list(itertools.product(range(4), repeat=n)))]
        label_sets = np.array(list(itertools.product((False, True), repeat=n)))[1:]  # >= 1 positive
        mixed = ~label_sets.all(1)
        chunk = max(1, 2 ** 17 // len(label_sets))
        for a in range(0, len(score_sets), chunk):
            sc = score_sets[a:a + chunk]
            s = np.repeat(sc, len(label_sets), axis=0)
            lab = np.tile(label_sets, (len(sc), 1))
            ap = metrics.average_precision(s, lab).reshape(len(sc), -1)
            diff = np.abs(ap - brute_force_ap(sc, label_sets))
            worst_ap = max(worst_ap, float(diff.max()))
            if (diff > ap_tol).any():
                problems.append(f"AP mismatch at n={n}")
            n_ap += ap.size
            if mixed.any():
                mix = np.tile(mixed, len(sc))
                auc = metrics.roc_auc(s[mix], lab[mix]).reshape(len(sc), -1)
                if not np.array_equal(auc, brute_force_auc(sc, label_sets[mixed])):
                    problems.append(f"AUC mismatch at n={n}")
                n_auc += auc.size
    ap = metrics.average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    auc = metrics.roc_auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    if abs(ap - 5 / 6) > 1e-9:
        problems.append(f"AP example {ap}")
    if abs(auc - 0.75) > 1e-12:
        problems.append(f"AUC example {auc}")
    detail = (f"{n_ap} AP and {n_auc} AUC configurations (len <= {max_len}, 4-value scores); AUC exact, "
              f"max AP deviation {worst_ap:.1e} (tol {ap_tol:g}); example AP={ap:.10f} AUC={auc}")
    return CheckResult("metric oracles", not problems, "; ".join(sorted(set(problems))) or detail)


# -- 5. feature extraction -----------------------------------------------------------------

def check_dsp_contract(n_clips: int = 50, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    problems = []
    ten_s = dsp.logmel(dsp.SampleBuffer(np.zeros(160000, np.float32), 16000))
    if ten_s.values.shape != (999, 64):
        problems.append(f"10 s gave {ten_s.values.shape}")
    floor = np.float32(np.log(dsp.LOG_FLOOR))
    if not np.all(ten_s.values == floor):
        problems.append("silence is not the log floor")
    rng = np.random.default_rng(seed)
    hop = 160
    worst = 0.0
    for _ in range(n_clips):
        n = int(rng.integers(256, 16000))
        x = rng.uniform(-1, 1, n).astype(np.float32) * rng.uniform(0.01, 1)
        a = dsp.logmel(dsp.SampleBuffer(x, 16000)).values
        b = dsp.logmel(dsp.SampleBuffer(np.concatenate([np.zeros(hop, np.float32), x]), 16000)).values
        if b.shape[0] != a.shape[0] + 1:
            problems.append(f"shifted clip has {b.shape[0]} frames, expected {a.shape[0] + 1}")
            break
        worst = max(worst, float(np.abs(b[1:] - a).max()))
    if worst > tol:
        problems.append(f"shift covariance error {worst:.2e}")
    return CheckResult("dsp contract", not problems,
                       "; ".join(problems) or f"999 frames for 10 s, silence = log floor, "
                                               f"shift error {worst:.1e} over {n_clips} clips")


CHECKS = {
    "mixing identity": check_mixing_identity,
    "gradient check": check_gradients,
    "layer shapes": check_layer_shapes,
    "metric oracles": check_metric_oracles,
    "dsp contract": check_dsp_contract,
}


def run_verify(names=None, emit=print) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if emit:
            emit(res.line())
    return results
