"""Command-line surface.

Subcommands: gen-data, validate-data, stage1, stage2, stage3, eval,
gradcheck, report. Exit codes: 0 success, 1 usage, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .config import ExperimentConfig, load_config, save_config
from .datagen import gen_corpus, load_corpus, validate
from .errors import ConfigError, DataError, NumericError, VtlmError
from .evalsuite import MetricReport
from .model import Pipeline
from .trainer import eval_defect, eval_properties, eval_retrieval, rows_by_split, run_stage

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="vtlm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True, init=False):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--seed", type=int, default=None)
        if data:
            sp.add_argument("--data", required=True, help="corpus JSONL path")
        if out:
            sp.add_argument("--out", required=True, help="output directory / file")
        if init:
            sp.add_argument("--init", default=None, help="prior-stage checkpoint dir")

    sp = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(sp, data=False)
    sp.add_argument("--profile", choices=("main", "defect"), default="main",
                    help="which GenConfig section drives generation")

    sp = sub.add_parser("validate-data", help="schema/invariant checks on a corpus")
    common(sp, out=False)

    sp = sub.add_parser("stage1", help="cross-modal alignment training")
    common(sp)
    sp.add_argument("--ablate", choices=("vision-only", "tactile-only"), default=None)

    sp = sub.add_parser("stage2", help="property-reasoning training")
    common(sp, init=True)
    sp.add_argument("--ablate", choices=("vision-only", "tactile-only", "no-stage1"),
                    default=None)

    sp = sub.add_parser("stage3", help="K-shot LoRA defect adaptation")
    common(sp, init=True)
    sp.add_argument("--granularity", type=int, choices=(2, 3, 5), default=2)
    sp.add_argument("--kshot", type=int, choices=(5, 15, 50), default=15)
    sp.add_argument("--ablate", choices=("vision-only", "tactile-only"), default=None)

    sp = sub.add_parser("eval", help="metrics for a checkpoint on a corpus split")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.add_argument("--granularity", type=int, choices=(2, 3, 5), default=None,
                    help="also score defect accuracy at this granularity")
    sp.add_argument("--ablate", choices=("vision-only", "tactile-only"), default=None)

    sp = sub.add_parser("gradcheck", help="central-difference checks for every loss")
    sp.add_argument("--config", help="unused; accepted for uniformity")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)

    sp = sub.add_parser("report", help="render a run's report.json and metrics.csv")
    sp.add_argument("--run", required=True, help="run directory")
    return p


def _load_cfg(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    gen_cfg = cfg.data if args.profile == "main" else cfg.defect_data
    manifest = gen_corpus(args.out, gen_cfg, seed=cfg.seed)
    print(f"wrote {manifest['rows']} rows ({manifest['objects']} objects) to {args.out}")
    print(f"content hash {manifest['content_hash']}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    report = validate(args.data)
    print(report)
    return EXIT_OK if report.ok else EXIT_DATA


def _cmd_stage(stage: int, args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    save_config(cfg, os.path.join(args.out, "config.txt"))
    result = run_stage(
        stage, args.data, cfg, cfg.seed, args.out,
        init_ckpt=getattr(args, "init", None),
        ablate=getattr(args, "ablate", None),
        granularity=getattr(args, "granularity", 2),
        kshot=getattr(args, "kshot", None))
    print(f"stage {stage} finished: checkpoint at {result.ckpt_dir}")
    if result.selected_epoch is not None:
        print(f"selected epoch {result.selected_epoch + 1} "
              f"(mean task score {result.final.mean_task:.4f})")
    print(f"reports: {result.csv_path}, {result.report_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    pipe = Pipeline.load(args.ckpt)
    rows = load_corpus(args.data)
    part = rows_by_split(rows)[args.split]
    if not part:
        raise DataError(f"corpus has no rows in split {args.split!r}")
    rep = eval_properties(pipe, part, cfg, ablate=args.ablate)
    if args.granularity is not None:
        defect_rows = [r for r in part if r["task"] == "defect"]
        if defect_rows:
            rep.defect_acc[args.granularity] = eval_defect(
                pipe, defect_rows, args.granularity, cfg, args.ablate)
    retrieval = eval_retrieval(pipe, part, seed=cfg.seed, ablate=args.ablate)
    rep.retrieval = retrieval
    payload = rep.to_json_dict()
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_suite

    reports = run_suite(tol=args.tol, seed=args.seed)
    width = max(len(n) for n in reports)
    ok = True
    print(f"{'loss':<{width}}  {'max_rel_err':>12}  status")
    for name, rep in reports.items():
        ok &= rep.passed
        print(f"{name:<{width}}  {rep.max_rel_err:>12.3e}  {'ok' if rep.passed else 'FAIL'}")
    print(f"overall: {'PASS' if ok else 'FAIL'} (tol={args.tol:g})")
    if not ok:
        raise NumericError("gradient check failed")
    return EXIT_OK


def _cmd_report(args) -> int:
    report_path = os.path.join(args.run, "report.json")
    csv_path = os.path.join(args.run, "metrics.csv")
    if not os.path.exists(report_path):
        raise DataError(f"no report.json under {args.run}")
    with open(report_path, encoding="utf-8") as fh:
        payload = json.load(fh)
    print(f"stage {payload['stage']}  seed {payload['seed']}  "
          f"corpus {payload['corpus_hash'][:12]}")
    if payload.get("selected_epoch") is not None:
        print(f"selected epoch: {payload['selected_epoch'] + 1}")
    final = MetricReport.from_json_dict(payload["final"])
    for key, value in sorted(final.to_json_dict().items()):
        if value not in (None, {}, []):
            print(f"  {key}: {value}")
    if os.path.exists(csv_path):
        with open(csv_path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        print(f"metrics.csv: {len(lines) - 1} epoch row(s)")
        for line in lines[:1] + lines[1:][-3:]:
            print("  " + line)
    return EXIT_OK


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "validate-data":
            return _cmd_validate(args)
        if args.command == "stage1":
            return _cmd_stage(1, args)
        if args.command == "stage2":
            return _cmd_stage(2, args)
        if args.command == "stage3":
            return _cmd_stage(3, args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "report":
            return _cmd_report(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except VtlmError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
