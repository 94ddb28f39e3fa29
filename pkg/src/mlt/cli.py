"""Command-line entry point.

Commands: gen-data, train, eval, predict, gradcheck.
Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

from . import data as D
from . import evaluate as E
from . import gradcheck as gc
from . import losses as L
from . import model as M
from . import tensor as T
from . import tensor_io
from .config import RunConfig
from .data import DataError
from .model import CheckpointError, ConfigError
from .train import DivergenceError, predict_probs, train

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-6
FULL_MODEL_TOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="mlt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True,
                   help="synthetic spec JSON (SyntheticSpec fields)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override spec seed")

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override run seed")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", default=None,
                   help="run config JSON supplying the eval section")
    p.add_argument("--out", default=None, help="metrics JSON path (default stdout)")

    p = sub.add_parser("predict", help="write per-frame probabilities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--config", default=None,
                   help="run config JSON supplying the eval section")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config", required=True,
                   help="run config JSON (use a tiny model)")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--seeds", type=int, default=20,
                   help="random seeds per primitive")
    p.add_argument("--inject-fault", default=None, metavar="OP",
                   help="negative control: corrupt OP's backward rule")
    return parser


def cmd_gen_data(args) -> int:
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read spec {args.config}: {exc}")
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = D.SyntheticSpec.from_dict(doc)
    ds = D.generate_dataset(spec)
    D.save_dataset(ds, args.out)
    print(f"wrote {ds.num_samples} samples, {len(ds.labels)} labels, "
          f"{len(ds.sequences)} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    result = train(cfg)
    print(f"trained {result.steps} steps; final checkpoint "
          f"{result.final_checkpoint}; log {result.log_path}")
    if result.best_macro_f1 is not None:
        print(f"best validation macro F1 {result.best_macro_f1:.4f} "
              f"({result.best_checkpoint})")
    return 0


def _eval_section(args):
    if args.config is not None:
        return RunConfig.from_file(args.config).eval
    return RunConfig().eval


def cmd_eval(args) -> int:
    params, model_cfg = M.load_checkpoint(args.checkpoint)
    ds = D.load_dataset(args.data)
    if ds.X.shape[1:] != (model_cfg.n_x, model_cfg.patch_dim) \
            or ds.y.shape[1] != model_cfg.L:
        raise ConfigError(f"dataset {ds.X.shape[1:]}x{ds.y.shape[1]} labels "
                          f"does not fit checkpoint model "
                          f"({model_cfg.n_x}, {model_cfg.patch_dim})x{model_cfg.L}")
    ev = _eval_section(args)
    probs = predict_probs(params, model_cfg, ds.X)
    report = E.evaluation_report(probs, ds.y, ds.mask, ds.sequences,
                                 ds.labels, tau=ev.threshold,
                                 window=ev.smoothing_window)
    payload = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        _atomic_write_text(args.out, payload)
    else:
        sys.stdout.write(payload)
    print(f"macro F1 unsmoothed {report['unsmoothed']['macro_f1']:.4f} "
          f"smoothed {report['smoothed']['macro_f1']:.4f}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    params, model_cfg = M.load_checkpoint(args.checkpoint)
    ds = D.load_dataset(args.data)
    if ds.X.shape[1:] != (model_cfg.n_x, model_cfg.patch_dim):
        raise ConfigError(f"dataset patches {ds.X.shape[1:]} do not fit "
                          f"checkpoint ({model_cfg.n_x}, {model_cfg.patch_dim})")
    ev = _eval_section(args)
    probs = predict_probs(params, model_cfg, ds.X)
    smoothed = E.smooth_sequences(probs, ds.sequences, ev.smoothing_window)
    tensor_io.save_tensor(args.out + ".raw.mlt", probs)
    tensor_io.save_tensor(args.out + ".smoothed.mlt", smoothed)
    _atomic_write_text(args.out + ".sequences.json",
                       json.dumps({"sequences": ds.sequences,
                                   "labels": ds.labels,
                                   "smoothing_window": ev.smoothing_window},
                                  indent=2, sort_keys=True) + "\n")
    print(f"wrote {probs.shape[0]} frames x {probs.shape[1]} labels "
          f"to {args.out}.raw.mlt / .smoothed.mlt")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = RunConfig.from_file(args.config)
    fault_target = None
    original = None
    if args.inject_fault is not None:
        fault_target = args.inject_fault
        original = getattr(T, fault_target, None)
        if original is None or not callable(original):
            raise ConfigError(f"--inject-fault: no differentiable op named "
                              f"{fault_target!r}")
        setattr(T, fault_target, gc.with_faulty_backward(original))
    try:
        rows = []
        worst_primitive: dict[str, float] = {}
        for seed in range(args.seeds):
            for name, check in gc.primitive_checks(seed).items():
                err = check()
                if err > worst_primitive.get(name, 0.0):
                    worst_primitive[name] = err
        for name in sorted(worst_primitive):
            rows.append(("primitive", name, worst_primitive[name], PRIMITIVE_TOL))
        for name, check in gc.composite_checks().items():
            rows.append(("composite", name, check(), COMPOSITE_TOL))

        weights = cfg.loss.weights
        if isinstance(weights, str):  # 'frequency' needs a dataset; use uniform
            weights = "uniform"
        loss_cfg = L.LossConfig(weights=weights,
                                dice_weight=cfg.loss.dice_weight,
                                dice_smooth=cfg.loss.dice_smooth,
                                label_smoothing=cfg.loss.label_smoothing,
                                clamp_p=cfg.loss.clamp_p).validate()
        for group, err in gc.full_model_group_errors(cfg.model, loss_cfg).items():
            rows.append(("model_group", group, err, FULL_MODEL_TOL))
    finally:
        if fault_target is not None:
            setattr(T, fault_target, original)

    failed = []
    for kind, name, err, tol in rows:
        status = "PASS" if err < tol else "FAIL"
        if status == "FAIL":
            failed.append(f"{kind}:{name}")
        print(f"{status} {kind} {name} max_rel_err={err:.3e} tol={tol:.0e}")
    if args.out:
        report = [{"kind": k, "name": n, "max_rel_err": float(e),
                   "tol": t, "passed": bool(e < t)} for k, n, e, t in rows]
        _atomic_write_text(args.out, json.dumps(report, indent=2) + "\n")
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}", file=sys.stderr)
        return 2
    print("gradcheck passed")
    return 0


def _atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, CheckpointError, tensor_io.CorruptTensorError,
            OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
