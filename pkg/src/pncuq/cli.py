"""Command line entry point: ``pncuq <subcommand> --config c.json --out r.json``.

Exit status is 0 on success, 1 for configuration or input errors and 2 for
numerical failures (divergent training, failed factorization, red self-check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import DataError
from .harness import (
    ConfigError, ExperimentConfig, RepetitionFailed, load_config, repetition_data, run_coverage,
    run_mse, table_csv,
)
from .inference import (
    batch_predictions, batching_interval, bootstrap_predictions, cheap_bootstrap_interval, ij_ci,
)
from .krr import ensemble_closed_form
from .network import TrainingDiverged, export_loss_trace, forward, init_he, train_gd
from .ntk import NtkKernel
from .rng import RngStream

log = logging.getLogger("pncuq")

SUBCOMMANDS = ("train", "pnc", "ci-batch", "ci-boot", "ci-ij", "coverage", "mse-bench", "selfcheck")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pncuq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        if name == "selfcheck":
            s.add_argument("--quick", action="store_true", help="smaller Monte Carlo sample")
            continue
        s.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        s.add_argument("--out", help="write the JSON result here instead of stdout")
        s.add_argument("--seed", type=int, help="override master_seed")
        s.add_argument("--workers", type=int, help="override the worker count")
        if name in ("coverage", "mse-bench"):
            s.add_argument("--table", help="also write a CSV table")
            s.add_argument("--timings", action="store_true",
                           help="include wall-clock seconds (makes the report non-reproducible)")
        if name == "train":
            s.add_argument("--checkpoint", help="save the trained network (.npz)")
            s.add_argument("--loss-csv", help="export the loss trace")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg = replace(cfg, master_seed=args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        cfg = replace(cfg, workers=args.workers)
    return cfg


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _single(args, cfg: ExperimentConfig) -> dict:
    data = repetition_data(cfg, 0)
    stream = RngStream(cfg.master_seed, 0).child(1)
    x0 = np.array(cfg.x0)
    pipe = cfg.pipeline()
    head = {"config": cfg.to_dict(), "x0": list(cfg.x0), "target": cfg.y0}
    if args.command == "train":
        net_cfg = pipe.net_config(data.d, data.n)
        train = replace(cfg.train, record_loss=True)
        net = train_gd(init_he(net_cfg, stream.child(0)), data, train, role="base")
        if args.checkpoint:
            net.save(args.checkpoint)
        if args.loss_csv:
            export_loss_trace(net, args.loss_csv)
        return head | {"prediction": forward(net, x0), "final_loss": net.loss_trace[-1] if net.loss_trace else None,
                       "epochs": train.epochs, "width": net_cfg.width}
    if args.command == "pnc":
        p = pipe.fit(data, stream)
        closed = ensemble_closed_form(NtkKernel.analytic(cfg.depth), data, cfg.train.ridge, p.s_mean)
        return head | {"pnc": p(x0), "base": forward(p.base, x0), "auxiliary": forward(p.auxiliary, x0),
                       "closed_form": closed(x0)}
    m = cfg.method
    # one set of fits serves every level
    if args.command == "ci-batch":
        preds = batch_predictions(data, x0, m.m_prime, pipe, stream)
        cis = [batching_interval(preds, lv) for lv in cfg.levels]
    elif args.command == "ci-boot":
        psi, reps = bootstrap_predictions(data, x0, m.R, pipe, stream)
        cis = [cheap_bootstrap_interval(psi, reps, lv) for lv in cfg.levels]
    else:
        cis = [ij_ci(data, x0, lv, pipe, stream) for lv in cfg.levels]
    return head | {"intervals": [ci.to_dict() for ci in cis]}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "selfcheck":
            from .selfcheck import run_all

            results = run_all(quick=args.quick)
            for r in results:
                print(r.line())
            return 0 if all(r.passed for r in results) else 2
        cfg = _config(args)
        if args.command == "coverage":
            report = run_coverage(cfg, progress=lambda j: log.info("repetition %d done", j))
            _emit(report.to_json(args.timings), args.out)
            if args.table:
                Path(args.table).write_text(table_csv(report.table_rows()))
        elif args.command == "mse-bench":
            report = run_mse(cfg)
            _emit(report.to_json(args.timings), args.out)
            if args.table:
                Path(args.table).write_text(table_csv(report.table_rows()))
        else:
            _emit(_dump(_single(args, cfg)), args.out)
        return 0
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RepetitionFailed as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.partial is not None and getattr(args, "out", None):
            Path(args.out).with_suffix(".partial.json").write_text(exc.partial.to_json())
        return 2
    except (TrainingDiverged, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
