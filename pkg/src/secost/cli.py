"""``secost`` command line: featurize, synth-data, train-base, secost-run, evaluate, compare, verify, print-config.

Exit status is 0 on success, 1 on operational failure and 2 on bad
configuration or input validation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import core, data, dsp, metrics, verify
from . import model as wels
from .config import ConfigError, load_config

log = logging.getLogger("secost")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

# Errors that mean "the inputs are wrong" rather than "something broke".
VALIDATION_ERRORS = (ConfigError, data.ParseError, data.DuplicateId, data.LabelOutOfRange,
                     wels.InvalidConfig, core.AlphaOutOfRange, core.WeightsNotConvex, core.StageError,
                     metrics.ClassSetMismatch)


def _class_names(cfg):
    p = Path(cfg.paths.classes)
    return data.read_classes(p) if p.exists() else None


def _dataset(manifest, cfg):
    return data.load_dataset(manifest, cfg.model.n_classes)


# -- commands -------------------------------------------------------------------------

def cmd_print_config(args, cfg):
    print(cfg.to_json())
    return EXIT_OK


def cmd_synth(args, cfg):
    cfg.check_synth_matches_model()
    out = Path(args.out or cfg.paths.data_dir)
    paths = data.synth_corpus(cfg.synth, out, featurize=not args.no_features)
    for k, p in paths.items():
        print(f"{k}\t{p}")
    return EXIT_OK


def cmd_featurize(args, cfg):
    manifest = Path(args.manifest)
    entries = data.load_manifest(manifest, cfg.model.n_classes)
    root = manifest.parent
    out_dir = Path(args.out_dir or cfg.paths.feature_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures, written, cached = [], 0, 0
    for e in entries:
        target = out_dir / f"{e.id}.lmel"
        rel = os.path.relpath(target, root)
        if target.exists():
            e.feat = rel
            cached += 1
            continue
        if e.wav is None:
            failures.append((e.id, "no wav path"))
            continue
        try:
            buf = dsp.read_wav(root / e.wav)
            if buf.sample_rate != dsp.SAMPLE_RATE:
                buf = dsp.resample(buf, dsp.SAMPLE_RATE)
            dsp.write_lmel(target, dsp.logmel(buf))
        except (OSError, ValueError) as exc:
            failures.append((e.id, f"{type(exc).__name__}: {exc}"))
            continue
        e.feat = rel
        written += 1
    out_manifest = Path(args.out_manifest) if args.out_manifest else manifest
    tmp = out_manifest.with_name(out_manifest.name + ".tmp")
    data.write_manifest(tmp, entries)
    os.replace(tmp, out_manifest)
    print(f"featurized {written}, cached {cached}, failed {len(failures)}")
    for rec_id, why in failures:
        print(f"FAILED\t{rec_id}\t{why}")
    return EXIT_FAIL if failures else EXIT_OK


def _run(cfg, schedule, args):
    train = _dataset(cfg.paths.train_manifest, cfg)
    val = _dataset(cfg.paths.val_manifest, cfg)
    res = core.run_secost(train, val, schedule, cfg.model, cfg.train, cfg.paths.run_dir, seed=cfg.seed)
    run_dir = Path(cfg.paths.run_dir)
    eval_manifest = Path(cfg.paths.eval_manifest)
    if not args.skip_eval and eval_manifest.exists():
        ev = _dataset(eval_manifest, cfg)
        names = _class_names(cfg)
        for row in res.rows:
            report = core.evaluate(wels.load(run_dir / row.checkpoint_path), ev, names, cfg.train.frames,
                                   cfg.train.eval_batch_size, cfg.train.threads)
            (run_dir / f"eval_stage_{row.stage:02d}.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
            print(f"stage {row.stage}\talpha {row.alpha}\tval mAP {row.val_map:.4f}\teval mAP {report.mAP:.4f}"
                  f"\teval mAUC {report.mAUC:.4f}")
    else:
        for row in res.rows:
            print(f"stage {row.stage}\talpha {row.alpha}\tval mAP {row.val_map:.4f}")
    return EXIT_OK


def cmd_train_base(args, cfg):
    return _run(cfg, core.StageSchedule([]), args)


def cmd_secost(args, cfg):
    return _run(cfg, cfg.stage_schedule(), args)


def cmd_evaluate(args, cfg):
    net = wels.load(args.checkpoint)
    ds = _dataset(args.manifest or cfg.paths.eval_manifest, cfg)
    report = core.evaluate(net, ds, _class_names(cfg), cfg.train.frames, cfg.train.eval_batch_size,
                           cfg.train.threads)
    text = report.to_jsonl()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"mAP {report.mAP:.4f}\tmAUC {report.mAUC:.4f}\tn {report.n_eval}\texcluded {report.excluded}")
    return EXIT_OK


def cmd_compare(args, cfg):
    base = metrics.EvalReport.from_jsonl(Path(args.base).read_text(encoding="utf-8"))
    new = metrics.EvalReport.from_jsonl(Path(args.new).read_text(encoding="utf-8"))
    bins = metrics.improvement_analysis(base, new)
    if args.out:
        Path(args.out).write_text(json.dumps(bins.to_dict(), indent=2) + "\n", encoding="utf-8")
    rel = (new.mAP - base.mAP) / base.mAP * 100 if base.mAP else float("nan")
    sys.stdout.write(bins.histogram())
    print(f"mAP {base.mAP:.4f} -> {new.mAP:.4f} ({rel:+.2f}%)")
    return EXIT_OK


def cmd_verify(args, cfg):
    results = verify.run_verify(args.only or None)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"verify FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"verify passed ({len(results)} checks)")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config key, e.g. train.epochs=4 (repeatable)")
    common.add_argument("--threads", type=int, help="worker threads (default: $SECOST_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="secost", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("print-config", parents=[common], help="print the resolved configuration")
    s.set_defaults(fn=cmd_print_config)

    s = sub.add_parser("synth-data", parents=[common], help="generate the synthetic corpus")
    s.add_argument("--out", help="output directory (default: paths.data_dir)")
    s.add_argument("--no-features", action="store_true", help="write WAVs only")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("featurize", parents=[common], help="write log-mel features for a manifest")
    s.add_argument("manifest")
    s.add_argument("--out-dir", help="feature directory (default: paths.feature_dir)")
    s.add_argument("--out-manifest", help="where to write the updated manifest (default: in place)")
    s.set_defaults(fn=cmd_featurize)

    for name, fn, helptext in (("train-base", cmd_train_base, "train the stage-0 network"),
                               ("secost-run", cmd_secost, "run the full stage schedule (resumable)")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--skip-eval", action="store_true", help="do not score stages on the eval manifest")
        s.set_defaults(fn=fn)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a manifest")
    s.add_argument("checkpoint")
    s.add_argument("--manifest", help="default: paths.eval_manifest")
    s.add_argument("--out", help="write the JSONL report here")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("compare", parents=[common], help="per-bin improvement between two eval reports")
    s.add_argument("base")
    s.add_argument("new")
    s.add_argument("--out", help="write the bins as JSON here")
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("verify", parents=[common], help="run the built-in correctness checks")
    s.add_argument("--only", action="append", choices=list(verify.CHECKS), help="run just this check")
    s.set_defaults(fn=cmd_verify)
    return p


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("SECOST_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SECOST_THREADS must be an integer, got {env!r}") from None
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        cfg.train.threads = resolve_threads(args.threads)
        with threadpool_limits(limits=cfg.train.threads):
            return args.fn(args, cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
