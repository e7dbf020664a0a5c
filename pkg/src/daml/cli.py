"""Command-line entry point: data generation, training, evaluation, checks.

All commands take explicit seeds; none consult the wall clock for anything
except the training-log timing column.  Flags win over config-file values.
Errors come back as a single ``error: ...`` line on stderr with a nonzero
exit code.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import baselines, dataio, evaluation, gradcheck, plotting, policy
from . import metalearn
from .adaptloss import load_adapt_loss, make_adapt_loss
from .config import (ADAPTIVE_METHODS, METHODS, ConfigError, canonical_json,
                     config_from_dict, config_hash, load_run_config,
                     replace_method)

LOG_HEADER = ",".join(plotting.LOG_COLUMNS) + "\n"


class CliError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: {message}\n")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit int")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="daml", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="generate a demonstration dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", required=True, type=_u64)
    g.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("meta-train", help="train one method on a dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--method", required=True, choices=METHODS)
    t.add_argument("--seed", required=True, type=_u64)
    t.add_argument("--iterations", type=int, default=None,
                   help="override the configured outer-iteration count")
    t.add_argument("--init-model", default=None,
                   help="resume from a saved model instead of a fresh init")

    e = sub.add_parser("evaluate", help="one-shot evaluation of a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="heldout", choices=("train", "heldout"))
    e.add_argument("--trials", type=int, default=3)
    e.add_argument("--seed", required=True, type=_u64)
    e.add_argument("--no-adapt", action="store_true",
                   help="additionally report the unadapted initialization")
    e.add_argument("--out", default=None, help="report path (default: <model>.eval.json)")
    e.add_argument("--rollout-log", default=None,
                   help="rollout CSV path (default: <model>.rollouts.csv)")
    e.add_argument("--workers", type=int, default=1)

    c = sub.add_parser("gradcheck", help="numeric audit of the differentiation")
    c.add_argument("--config", required=True)

    pl = sub.add_parser("plot", help="render SVG artifacts from logs and reports")
    pl.add_argument("--in", dest="inputs", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    rc = load_run_config(args.config)
    ds = dataio.generate_dataset(rc.sim, rc.data, args.seed, workers=args.workers)
    dataio.save_dataset(args.out, ds)
    lengths = [d.frames.shape[0]
               for rec in ds.train + ds.heldout
               for d in list(rec.humans) + list(rec.robots)]
    print(f"wrote {args.out}: {len(ds.train)} train + {len(ds.heldout)} heldout tasks")
    print(f"demos per task: {ds.n_human_per_task} human + {ds.n_robot_per_task} robot; "
          f"lengths {min(lengths)}..{max(lengths)} steps "
          f"(mean {float(np.mean(lengths)):.1f})")
    return 0


def _log_path(model_path: str) -> str:
    return os.path.splitext(model_path)[0] + ".log.csv"


def cmd_meta_train(args) -> int:
    rc = replace_method(load_run_config(args.config), args.method)
    if args.iterations is not None:
        if args.iterations < 0:
            raise CliError("iterations must be non-negative")
        rc = dataclasses.replace(
            rc, meta=dataclasses.replace(rc.meta, iterations=args.iterations))
    ds = dataio.load_dataset(args.data)
    if ds.image_hw != rc.sim.image_hw:
        raise CliError(f"dataset images are {ds.image_hw}px but config expects "
                       f"{rc.sim.image_hw}px")
    chash = config_hash(rc)
    cjson = canonical_json(rc)

    init_rng = np.random.default_rng([args.seed, 0])
    if args.init_model is not None:
        prev = dataio.load_model(args.init_model)
        if prev.method != args.method:
            raise CliError(f"cannot resume {prev.method!r} model as {args.method!r}")
        # run-length and optimizer knobs may change between phases, but the
        # saved parameters only fit one architecture
        prev_cfg = json.loads(prev.config_json)
        cur_cfg = json.loads(cjson)
        for section in ("policy", "loss_net"):
            if prev_cfg.get(section) != cur_cfg.get(section):
                raise CliError(f"resume {section} config differs from the model's")
        theta, psi = prev.theta, prev.psi
    elif args.method in ADAPTIVE_METHODS:
        theta = policy.init_policy_params(rc.policy, init_rng)
        psi = make_adapt_loss(args.method, rc.policy, rc.loss_net, init_rng).params
    else:
        theta = baselines.init_baseline_params(args.method, rc.policy, init_rng)
        psi = None

    log_path = _log_path(args.out)
    mode = "a" if args.init_model is not None and os.path.exists(log_path) else "w"
    train_rng = np.random.default_rng([args.seed, 1])
    with open(log_path, mode) as log_fh:
        if mode == "w":
            log_fh.write(LOG_HEADER)

        def log_cb(row):
            log_fh.write(f"{row.iteration},{row.outer_loss:.9f},"
                         f"{row.inner_loss_pre:.9f},{row.inner_loss_post:.9f},"
                         f"{row.wall_time_ms:.3f}\n")
            log_fh.flush()

        if args.method in ADAPTIVE_METHODS:
            loss_obj = load_adapt_loss(args.method, psi, rc.loss_net)
            theta, loss_obj, log = metalearn.meta_train(
                ds.train, theta, loss_obj, rc.meta, rc.policy, train_rng,
                brightness_aug=rc.meta.brightness_aug, log_cb=log_cb)
            psi = loss_obj.params
        else:
            theta, log = baselines.baseline_train(
                ds.train, args.method, theta, rc.meta, rc.policy, train_rng,
                brightness_aug=rc.meta.brightness_aug, log_cb=log_cb)

    dataio.save_model(args.out, dataio.ModelFile(
        method=args.method, config_hash=chash, config_json=cjson,
        theta=theta, psi=psi))
    last = f", final outer loss {log[-1].outer_loss:.4f}" if log else ""
    print(f"wrote {args.out} ({args.method}, {len(log)} iterations{last})")
    print(f"log: {log_path}")
    return 0


def cmd_evaluate(args) -> int:
    if args.trials < 1:
        raise CliError("trials must be at least 1")
    model = dataio.load_model(args.model)
    rc = config_from_dict(json.loads(model.config_json))
    ds = dataio.load_dataset(args.data)
    if ds.image_hw != rc.sim.image_hw:
        raise CliError(f"dataset images are {ds.image_hw}px but the model expects "
                       f"{rc.sim.image_hw}px")
    report, records = evaluation.evaluate_model(
        model, rc, ds, args.split, args.trials, args.seed,
        include_unadapted=args.no_adapt, workers=args.workers)
    stem = os.path.splitext(args.model)[0]
    out = args.out or stem + ".eval.json"
    rollout_log = args.rollout_log or stem + ".rollouts.csv"
    with open(out, "w") as fh:
        fh.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(rollout_log, "w") as fh:
        fh.write(evaluation.rollout_csv(records))
    for arm in ("adapted", "unadapted"):
        if arm in report:
            s = report[arm]
            print(f"{arm}: {s['successes']}/{s['rollouts']} "
                  f"success_rate={s['success_rate']:.3f} "
                  f"task_id_failures={s['failures']['task_identification']} "
                  f"control_failures={s['failures']['control']}")
    print(f"report: {out}")
    print(f"rollouts: {rollout_log}")
    return 0


def cmd_gradcheck(args) -> int:
    load_run_config(args.config)
    results = gradcheck.run_all()
    sys.stdout.write(gradcheck.report_text(results))
    return 0


def cmd_plot(args) -> int:
    for path in plotting.render_artifacts(args.inputs, args.out):
        print(f"wrote {path}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "meta-train": cmd_meta_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, dataio.FormatError, plotting.PlotError, CliError,
            ValueError, OSError, RuntimeError, FloatingPointError) as e:
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
