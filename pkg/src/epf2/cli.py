"""Command-line interface: dataset synthesis, training, auto-labeling,
evaluation, streaming inference, cost tables, and gradient verification.

Every run directory receives a manifest recording the command, resolved
configuration, seed, and content hashes of inputs and outputs.
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys
from dataclasses import fields

import numpy as np

from . import geometry as G
from .autolabel import SSLConfig, cache_pseudo_labels, load_pseudo_label, \
    pseudo_label_path, ssl_train
from .losses import LossConfig
from .metrics import MetricReport
from .model import (
    MICRO_CONFIG,
    ModelConfig,
    PoseModel,
    file_hash,
    load_checkpoint,
    model_table,
    multiview_attention_table,
    save_checkpoint,
    table_csv,
    totals,
    format_table,
)
from .numerics import NumericError, grad_check
from .synthdata import default_rig, generate_dataset, load_dataset, load_sequence
from .training import TrainConfig, evaluate, predict_sequence, train, write_loss_curve

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2

PRESETS = {
    "desk": {},
    # joints stays at the full skeleton so micro runs work with generated data
    "micro": dict(MICRO_CONFIG, joints=20),
    "teacher": dict(channels=256, layers=3),
}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def load_raw_config(name_or_path: str | None) -> dict:
    """Preset name or flat key = value file; returns raw string values."""
    if not name_or_path:
        return {}
    if name_or_path in PRESETS:
        return {k: str(v) for k, v in PRESETS[name_or_path].items()}
    if not os.path.exists(name_or_path):
        raise UsageError(f"unknown config preset or missing file: {name_or_path!r}")
    raw = {}
    with open(name_or_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            k, v = [s.strip() for s in line.split("=", 1)]
            raw[k] = v
    return raw


def _coerce(value: str, ftype):
    if ftype in ("int", int):
        return int(value)
    if ftype in ("float", float):
        return float(value)
    if ftype in ("bool", bool):
        return value in ("True", "true", "1")
    return value


def _fill(cls, raw: dict, overrides: dict):
    kw = {}
    for f in fields(cls):
        if f.name in overrides and overrides[f.name] is not None:
            kw[f.name] = overrides[f.name]
        elif f.name in raw:
            kw[f.name] = _coerce(raw[f.name], f.type)
    return cls(**kw)


def build_model_config(args) -> ModelConfig:
    raw = load_raw_config(getattr(args, "config", None))
    return _fill(ModelConfig, raw, {})


def build_train_config(args) -> TrainConfig:
    raw = load_raw_config(getattr(args, "config", None))
    over = {"seed": getattr(args, "seed", None),
            "steps": getattr(args, "steps", None),
            "batch_size": getattr(args, "batch_size", None)}
    cfg = _fill(TrainConfig, raw, over)
    cfg.loss = _fill(LossConfig, raw, {})
    cfg.loss.total_steps = cfg.steps
    return cfg


def write_manifest(out_dir, command: str, config: dict, seed,
                   inputs: list, outputs: list) -> str:
    os.makedirs(out_dir, exist_ok=True)
    # distinct from the dataset index (manifest.txt) that gen also produces
    path = os.path.join(out_dir, "run_manifest.txt")
    lines = [f"command = {command}",
             f"timestamp = {datetime.datetime.now().isoformat()}",
             f"seed = {seed}",
             "[config]"]
    lines += [f"{k} = {v}" for k, v in sorted(config.items())]
    lines.append("[inputs]")
    lines += [f"{p} = {file_hash(p)}" for p in inputs if os.path.isfile(p)]
    lines.append("[outputs]")
    lines += [f"{p} = {file_hash(p)}" for p in outputs if os.path.isfile(p)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def config_snapshot(*cfgs) -> dict:
    snap = {}
    for cfg in cfgs:
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            if not hasattr(v, "__dataclass_fields__"):
                snap[f.name] = v
    return snap


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    mcfg = build_model_config(args)
    lo, _, hi = args.seeds.partition(":")
    seeds = range(int(lo), int(hi)) if hi else [int(lo)]
    cams = default_rig(mcfg.image_height, mcfg.image_width)[:mcfg.views]
    recs = generate_dataset(args.out, args.split, seeds,
                            labeled=not args.unlabeled, frames=args.frames,
                            cams=cams, amplitude=args.amplitude)
    outputs = [os.path.join(args.out, args.split, f"{r.seed}.epf2") for r in recs]
    write_manifest(os.path.join(args.out, args.split), "gen",
                   {**config_snapshot(mcfg), "frames": args.frames,
                    "amplitude": args.amplitude, "labeled": not args.unlabeled},
                   args.seed, [], outputs)
    print(f"wrote {len(recs)} sequences to {os.path.join(args.out, args.split)}")
    return EXIT_OK


def _train_common(args, command: str, model_overrides: dict | None = None) -> int:
    from .plots import plot_loss_curve, plot_metric_report
    mcfg = build_model_config(args)
    if model_overrides:
        for k, v in model_overrides.items():
            setattr(mcfg, k, v)
    tcfg = build_train_config(args)
    records = load_dataset(args.data, args.split)
    model = PoseModel(mcfg, seed=tcfg.seed)
    res = train(model, records, tcfg, out_dir=args.out, log_every=args.log_every)
    outputs = [res["checkpoint"], os.path.join(args.out, "loss_curve.csv")]
    plot_loss_curve(os.path.join(args.out, "loss_curve.png"), res["curve"])
    outputs.append(os.path.join(args.out, "loss_curve.png"))
    if args.val_split:
        val = load_dataset(args.data, args.val_split)
        report = evaluate(model, val)
        _write_report(args.out, report)
        plot_metric_report(os.path.join(args.out, "metrics.png"), report)
        outputs += [os.path.join(args.out, "metrics.csv"),
                    os.path.join(args.out, "metrics.png")]
        print(report.as_text())
    inputs = [os.path.join(args.data, args.split, "manifest.txt")]
    write_manifest(args.out, command, config_snapshot(mcfg, tcfg, tcfg.loss),
                   tcfg.seed, inputs, outputs)
    print(f"checkpoint: {res['checkpoint']}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _train_common(args, "train")


def cmd_teach(args) -> int:
    # the teacher is the same architecture at a larger scale
    overrides = {} if args.config else dict(PRESETS["teacher"])
    return _train_common(args, "teach", overrides)


def cmd_pseudolabel(args) -> int:
    teacher = load_checkpoint(args.checkpoint)
    records = load_dataset(args.data, args.split)
    unlabeled = [r for r in records if not r.labeled]
    if not unlabeled:
        raise UsageError(f"split {args.split!r} has no unlabeled sequences")
    paths = cache_pseudo_labels(teacher, args.checkpoint, args.data, args.split,
                                unlabeled)
    write_manifest(os.path.join(args.data, args.split), "pseudolabel",
                   {"teacher": args.checkpoint}, args.seed,
                   [args.checkpoint], paths)
    print(f"cached {len(paths)} pseudo-label files")
    return EXIT_OK


def cmd_ssl_train(args) -> int:
    from .plots import plot_loss_curve, plot_metric_report
    mcfg = build_model_config(args)
    tcfg = build_train_config(args)
    scfg = SSLConfig(lambda1=args.lambda1, lambda2=args.lambda2)
    labeled = load_dataset(args.data, args.split)
    unlabeled = [r for r in load_dataset(args.data, args.unlabeled_split)
                 if not r.labeled]
    thash = file_hash(args.checkpoint) if args.checkpoint else None
    labels = {}
    if scfg.lambda1 > 0 or scfg.lambda2 > 0:
        for rec in unlabeled:
            labels[rec.seed] = load_pseudo_label(
                pseudo_label_path(args.data, args.unlabeled_split, rec.seed),
                expect_teacher_hash=thash)
    student = PoseModel(mcfg, seed=tcfg.seed)
    res = ssl_train(student, labeled, unlabeled, labels, tcfg, scfg,
                    log_every=args.log_every)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"checkpoint_{tcfg.steps}.epf2")
    save_checkpoint(ckpt, student)
    write_loss_curve(os.path.join(args.out, "loss_curve.csv"), res["curve"])
    plot_loss_curve(os.path.join(args.out, "loss_curve.png"), res["curve"])
    outputs = [ckpt, os.path.join(args.out, "loss_curve.csv"),
               os.path.join(args.out, "loss_curve.png")]
    if args.val_split:
        report = evaluate(student, load_dataset(args.data, args.val_split))
        _write_report(args.out, report)
        plot_metric_report(os.path.join(args.out, "metrics.png"), report)
        print(report.as_text())
    snap = config_snapshot(mcfg, tcfg, tcfg.loss)
    snap.update({"lambda1": scfg.lambda1, "lambda2": scfg.lambda2})
    write_manifest(args.out, "ssl-train", snap, tcfg.seed,
                   [args.checkpoint] if args.checkpoint else [], outputs)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _write_report(out_dir, report: MetricReport):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.as_csv())


def cmd_eval(args) -> int:
    from .plots import plot_metric_report
    model = load_checkpoint(args.checkpoint)
    records = load_dataset(args.data, args.split)
    report = evaluate(model, records, streaming=not args.full_sequence)
    _write_report(args.out, report)
    plot_metric_report(os.path.join(args.out, "metrics.png"), report)
    write_manifest(args.out, "eval", {"checkpoint": args.checkpoint,
                                      "split": args.split}, args.seed,
                   [args.checkpoint],
                   [os.path.join(args.out, "metrics.csv"),
                    os.path.join(args.out, "metrics.png")])
    print(report.as_text())
    return EXIT_OK


def cmd_stream(args) -> int:
    from .model import covariance_matrices
    model = load_checkpoint(args.checkpoint)
    rec = load_sequence(args.data)
    pred = predict_sequence(model, rec, streaming=True)
    names = rec.skeleton.names
    print("frame,joint,x_m,y_m,z_m,trace_sigma")
    for t in range(rec.frames):
        sig = covariance_matrices(pred["uncertainty"][t])
        tr = np.trace(sig, axis1=-2, axis2=-1)
        for j, name in enumerate(names):
            x, y, z = pred["refined_world"][t, j]
            print(f"{t},{name},{x:.5f},{y:.5f},{z:.5f},{tr[j]:.6g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    # the reference table scale is fixed; --channels/--views explore others
    channels = args.channels or 128
    views = args.views or 2
    rows = multiview_attention_table(channels, views)
    print(format_table(rows))
    if args.out:
        from .plots import plot_cost_table
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.csv"), "w", encoding="utf-8") as fh:
            fh.write(table_csv(rows))
        if args.full_model and args.config:
            full = model_table(build_model_config(args))
            with open(os.path.join(args.out, "model_costs.csv"), "w",
                      encoding="utf-8") as fh:
                fh.write(table_csv(full))
            plot_cost_table(os.path.join(args.out, "model_costs.png"), full)
        plot_cost_table(os.path.join(args.out, "bench.png"), rows)
        write_manifest(args.out, "bench",
                       {"channels": channels, "views": views}, args.seed, [],
                       [os.path.join(args.out, "bench.csv")])
    p, f = totals(rows)
    print(f"\nTotal params {p}, FLOPs {f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    """Finite-difference verification of every primitive plus the full loss
    on the verification micro-config."""
    from . import numerics as N
    from .numerics import Tensor
    from .losses import total_loss

    worst = {}
    rng = np.random.default_rng(args.seed or 0)

    def check(name, f, theta):
        err = grad_check(f, theta)
        worst[name] = max(worst.get(name, 0.0), err)

    for trial in range(args.trials):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        check("matmul", lambda t: N.sum_(N.matmul(t, b)), a)
        x = Tensor(rng.standard_normal(6), requires_grad=True)
        w1 = Tensor(rng.standard_normal(6))
        check("softmax", lambda t: N.sum_(N.mul(N.softmax(t), w1)), x)
        y = Tensor(rng.standard_normal(6) * 2, requires_grad=True)
        check("exp", lambda t: N.sum_(N.exp(N.mul(t, Tensor(np.full(6, 0.3))))), y)
        check("gelu", lambda t: N.sum_(N.gelu(t)), y)
        g = Tensor(np.ones(6), requires_grad=True)
        bb = Tensor(np.zeros(6), requires_grad=True)
        w2 = Tensor(rng.standard_normal(6))
        check("layer_norm", lambda t: N.sum_(N.mul(N.layer_norm(t, g, bb), w2)), y)

    # full-loss gradient on the verification micro-config, f64
    mcfg = ModelConfig(dtype="f64", **MICRO_CONFIG)
    model = PoseModel(mcfg, seed=0, skeleton=_micro_skeleton())
    images = rng.random((1, 3, mcfg.views, mcfg.image_height, mcfg.image_width))
    rot = np.broadcast_to(np.eye(3), (1, 3, 3, 3)).copy()
    trans = 0.05 * rng.standard_normal((1, 3, 3))
    cams = default_rig(mcfg.image_height, mcfg.image_width)[:mcfg.views]
    gt_w = 0.1 * rng.standard_normal((1, 3, mcfg.joints, 3))
    gt_h = 0.1 * rng.standard_normal((1, 3, mcfg.joints, 3))

    def floss(_):
        out = model.forward_sequence(images, rot, trans, cams)
        loss, _ = total_loss(out["proposal_world"], out["refined_world"],
                             out["refined"], gt_w, gt_h, out["uncertainty"],
                             100, TrainConfig(steps=400).loss)
        return loss

    theta = model.dec1[0].mvca.wq.w
    for h in (model.proposal_head, model.refine_head, model.uncertainty_head):
        w = h.mlp.fc2.w
        w.data = 0.05 * rng.standard_normal(w.data.shape)
    err = grad_check(floss, theta, coords=range(0, theta.data.size,
                                                max(1, theta.data.size // 16)))
    worst["full_loss"] = err

    failed = False
    for name, err in sorted(worst.items()):
        tol = 1e-3 if name == "full_loss" else 1e-6
        status = "ok" if err < tol else "FAIL"
        failed = failed or err >= tol
        print(f"{name:12s} max rel err {err:.3e}  [{status}]")
    if failed:
        raise NumericError("gradient verification failed")
    return EXIT_OK


def _micro_skeleton() -> G.Skeleton:
    return G.Skeleton(["head", "neck", "l_arm", "r_arm"], [-1, 0, 1, 1],
                      np.array([[0, 0, 0], [0, -0.2, 0],
                                [-0.3, 0, 0], [0.3, 0, 0]]))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="epf2", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="preset name (desk/micro/teacher) or "
                                         "key=value file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="runs/out")
        sp.add_argument("--data", default="data")
        sp.add_argument("--checkpoint")
        return sp

    sp = common(sub.add_parser("gen", help="synthesize a dataset split"))
    sp.add_argument("--split", default="train")
    sp.add_argument("--seeds", default="0:8", help="seed range lo:hi")
    sp.add_argument("--frames", type=int, default=64)
    sp.add_argument("--amplitude", type=float, default=0.5)
    sp.add_argument("--unlabeled", action="store_true")
    sp.set_defaults(fn=cmd_gen)

    for name, fn in (("train", cmd_train), ("teach", cmd_teach)):
        sp = common(sub.add_parser(name, help=f"{name} a model"))
        sp.add_argument("--split", default="train")
        sp.add_argument("--val-split", default=None)
        sp.add_argument("--steps", type=int, default=None)
        sp.add_argument("--batch-size", type=int, default=None)
        sp.add_argument("--log-every", type=int, default=0)
        sp.set_defaults(fn=fn)

    sp = common(sub.add_parser("pseudolabel", help="cache teacher pseudo-labels"))
    sp.add_argument("--split", default="unlabeled")
    sp.set_defaults(fn=cmd_pseudolabel)

    sp = common(sub.add_parser("ssl-train", help="mixed labeled/pseudo-label "
                                                 "training"))
    sp.add_argument("--split", default="train")
    sp.add_argument("--unlabeled-split", default="unlabeled")
    sp.add_argument("--val-split", default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--lambda1", type=float, default=0.5)
    sp.add_argument("--lambda2", type=float, default=0.1)
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(fn=cmd_ssl_train)

    sp = common(sub.add_parser("eval", help="streaming evaluation of a checkpoint"))
    sp.add_argument("--split", default="val")
    sp.add_argument("--full-sequence", action="store_true",
                    help="use the full-sequence path instead of streaming")
    sp.set_defaults(fn=cmd_eval)

    sp = common(sub.add_parser("stream", help="frame-by-frame inference over "
                                              "one sequence file"))
    sp.set_defaults(fn=cmd_stream)

    sp = common(sub.add_parser("bench", help="parameter/FLOP table"))
    sp.add_argument("--channels", type=int, default=None)
    sp.add_argument("--views", type=int, default=None)
    sp.add_argument("--full-model", action="store_true")
    sp.set_defaults(fn=cmd_bench)

    sp = common(sub.add_parser("gradcheck", help="finite-difference "
                                                 "verification suite"))
    sp.add_argument("--trials", type=int, default=5)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def _limit_threads():
    cap = os.environ.get("EPF2_THREADS")
    if not cap:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=int(cap))
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = cap


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
