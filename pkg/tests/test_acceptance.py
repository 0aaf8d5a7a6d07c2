"""Acceptance suite: one PASS/FAIL line per criterion.

Criteria 1-5 are the built-in verification checks plus their time budgets.
Criteria 6-8 train real networks on the full synthetic corpus (8 classes,
2000/200/400 clips, flip rate 0.2) and take about five hours on
one core. Set SECOST_ACCEPTANCE_DIR to keep the corpus and finished stages
between sessions; training resumes from whatever stages are already on disk.
"""

import json
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from secost import core, data, metrics, verify
from secost import model as wels
from conftest import ACCEPTANCE_LINES

SEEDS = (0, 1, 2, 3, 4)
MODEL = wels.WelsConfig(n_classes=8, width_multiplier=1 / 8)
TRAIN = core.TrainConfig(epochs=10, batch_size=16, lr=1e-3, patience=5)
# Plumbing only: a short budget per stage is enough to exercise resume and reproducibility.
PLUMBING_TRAIN = core.TrainConfig(epochs=2, batch_size=16, lr=1e-3, steps_per_epoch=25)


def record(n: int, passed: bool, detail: str, seconds: float) -> bool:
    line = f"criterion {n} {'PASS' if passed else 'FAIL'}  {detail}  ({seconds:.1f} s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


# -- criteria 1-5 -------------------------------------------------------------------------------

@pytest.mark.parametrize("n,name,budget", [
    (1, "mixing identity", 5.0),
    (2, "gradient check", 120.0),
    (3, "layer shapes", 10.0),
    (5, "dsp contract", 30.0),
])
def test_verify_criterion(n, name, budget):
    res, dt = timed(verify.CHECKS[name])
    ok = res.passed and dt < budget
    assert record(n, ok, f"{name}: {res.detail}; budget {budget:.0f} s", dt), res.detail


def test_criterion_4_metric_oracles():
    t0 = time.perf_counter()
    res = verify.check_metric_oracles()
    ap = metrics.average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    auc = metrics.roc_auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    dt = time.perf_counter() - t0
    ok = res.passed and abs(ap - 0.8333) <= 1e-4 and abs(ap - 5 / 6) <= 1e-9 and abs(auc - 0.75) <= 1e-12 and dt < 60
    assert record(4, ok, f"metric oracles: {res.detail}; AP={ap:.10f} AUC={auc}; budget 60 s", dt)


def test_criterion_9_verify_command(monkeypatch, capsys):
    from secost import cli

    t0 = time.perf_counter()
    clean = cli.main(["verify"])
    clean_out = capsys.readouterr().out

    def flipped(p, y, y_teacher, alpha):
        p = core.clamp_probs(np.asarray(p, np.float64))
        y, yt = np.asarray(y, np.float64), np.asarray(y_teacher, np.float64)
        return core.bce_loss(p, y) - (1 - alpha) * np.mean((yt - y) * np.log((1 - p) / p))

    monkeypatch.setattr(core, "decomposed_loss", flipped)
    mutant = cli.main(["verify"])
    mutant_out = capsys.readouterr().out
    dt = time.perf_counter() - t0
    ok = clean == 0 and mutant != 0 and "verify FAILED: mixing identity" in mutant_out
    print(clean_out + mutant_out)
    assert record(9, ok, f"clean exit {clean}, mutated-sign exit {mutant} "
                         f"({mutant_out.strip().splitlines()[-1]})", dt)


# -- shared corpus and runs ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    env = os.environ.get("SECOST_ACCEPTANCE_DIR")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def corpus(workdir):
    root = workdir / "corpus"
    done = root / "complete"
    if not done.exists():
        shutil.rmtree(root, ignore_errors=True)
        data.synth_corpus(data.SynthConfig(seed=0), root)
        done.write_text("ok\n")
    return {s: data.load_dataset(root / f"{s}.jsonl", 8) for s in ("train", "val", "eval")}


def eval_map(run_dir: Path, stage: int, ev) -> float:
    cached = run_dir / f"eval_stage_{stage:02d}.jsonl"
    ckpt = run_dir / "checkpoints" / f"stage_{stage:02d}.wels"
    # The report is only reused if it is newer than the checkpoint it scores.
    if cached.exists() and cached.stat().st_mtime >= ckpt.stat().st_mtime:
        return metrics.EvalReport.from_jsonl(cached.read_text()).mAP
    rep = core.evaluate(wels.load(ckpt), ev, frames=TRAIN.frames, batch_size=TRAIN.eval_batch_size)
    cached.write_text(rep.to_jsonl())
    return rep.mAP


@pytest.fixture(scope="module")
def directional(workdir, corpus):
    """Base network plus one alpha=0.3 student per seed."""
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        run_dir = workdir / "c6" / f"seed{seed}"
        core.run_secost(corpus["train"], corpus["val"], core.StageSchedule([0.3]), MODEL, TRAIN, run_dir, seed=seed)
        out[seed] = (eval_map(run_dir, 0, corpus["eval"]), eval_map(run_dir, 1, corpus["eval"]))
    return out, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_6_directional(directional):
    res, dt = directional
    rel = {s: (new - base) / base for s, (base, new) in res.items()}
    wins = sum(new >= base for base, new in res.values())
    mean_rel = float(np.mean(list(rel.values())))
    per_seed = ", ".join(f"s{s} {b:.4f}->{n:.4f}" for s, (b, n) in res.items())
    ok = wins >= 4 and mean_rel > 0
    assert record(6, ok, f"student>=base in {wins}/{len(res)} seeds, mean rel {100 * mean_rel:+.2f}% [{per_seed}]",
                  dt)


@pytest.mark.slow
def test_criterion_8_teacher_only(workdir, corpus, directional):
    t0 = time.perf_counter()
    ratios = {}
    for seed in SEEDS:
        src = workdir / "c6" / f"seed{seed}"
        run_dir = workdir / "c8" / f"seed{seed}"
        if not (run_dir / core.REPORT_NAME).exists():
            # Same base network as criterion 6; only the student differs.
            (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            shutil.copy2(src / "checkpoints" / "stage_00.wels", run_dir / "checkpoints" / "stage_00.wels")
            base_row = (src / core.REPORT_NAME).read_text().splitlines()[0]
            (run_dir / core.REPORT_NAME).write_text(base_row + "\n")
        res = core.run_secost(corpus["train"], corpus["val"], core.StageSchedule([0.0]), MODEL, TRAIN, run_dir,
                              seed=seed)
        assert [r.alpha for r in res.rows] == [None, 0.0]
        base = directional[0][seed][0]
        ratios[seed] = eval_map(run_dir, 1, corpus["eval"]) / base
    dt = time.perf_counter() - t0
    ok = all(0.8 <= r <= 1.5 for r in ratios.values())
    detail = ", ".join(f"s{s} {r:.3f}" for s, r in ratios.items())
    assert record(8, ok, f"alpha=0 student/base eval mAP ratio in [0.8, 1.5]: {detail}", dt)


class Interrupt(Exception):
    pass


@pytest.mark.slow
def test_criterion_7_multistage_plumbing(workdir, corpus):
    t0 = time.perf_counter()
    root = workdir / "c7"
    shutil.rmtree(root, ignore_errors=True)
    sched = core.StageSchedule([0.3, 0.3, 0.2])
    tr, va = corpus["train"], corpus["val"]

    full = core.run_secost(tr, va, sched, MODEL, PLUMBING_TRAIN, root / "a", seed=11)

    def stop_at_stage_2(stage, epoch, row):
        if stage == 2:
            raise Interrupt

    with pytest.raises(Interrupt):
        core.run_secost(tr, va, sched, MODEL, PLUMBING_TRAIN, root / "b", seed=11, on_epoch=stop_at_stage_2)
    partial_rows = len((root / "b" / core.REPORT_NAME).read_text().splitlines())
    no_stage2 = not (root / "b" / "checkpoints" / "stage_02.wels").exists()
    resumed = core.run_secost(tr, va, sched, MODEL, PLUMBING_TRAIN, root / "b", seed=11)

    ckpts = [f"checkpoints/stage_{s:02d}.wels" for s in range(4)]
    rows_a = (root / "a" / core.REPORT_NAME).read_bytes()
    identical = rows_a == (root / "b" / core.REPORT_NAME).read_bytes() and all(
        (root / "a" / c).read_bytes() == (root / "b" / c).read_bytes() for c in ckpts)
    n_ckpt = len(list((root / "a" / "checkpoints").glob("*.wels")))
    n_rows = len(rows_a.decode().splitlines())
    alphas = [json.loads(x)["alpha"] for x in rows_a.decode().splitlines()]
    dt = time.perf_counter() - t0
    ok = (full.trained_stages == [0, 1, 2, 3] and n_ckpt == 4 and n_rows == 4 and alphas == [None, 0.3, 0.3, 0.2]
          and partial_rows == 2 and no_stage2 and resumed.trained_stages == [2, 3] and identical)
    assert record(7, ok, f"{n_ckpt} checkpoints, {n_rows} report rows, interrupted at stage 2 with {partial_rows} rows, "
                         f"resumed stages {resumed.trained_stages}, bit-identical to uninterrupted run: {identical}",
                  dt)
