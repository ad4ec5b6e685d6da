"""Command line: ``flowdenoise {synth,train,denoise,eval}``."""
from __future__ import annotations

import argparse
import shlex
import sys
from pathlib import Path

import numpy as np

from . import flow, io, metrics, shapes, training
from .geometry import DEFAULT_PATCH_K


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _noise(text):
    try:
        return metrics.NoiseSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _surface(text):
    try:
        return metrics.SurfaceSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _params(text):
    out = {}
    for item in text.split(","):
        key, sep, val = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        out[key.strip()] = float(val)
    return out


def _vec3(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected x,y,z")
    return tuple(vals)


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # skip "(default: None)" on optional flags without a fixed default
    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(
        prog="flowdenoise",
        description="Point cloud denoising along straight constant-velocity flows.",
        formatter_class=fmt,
    )
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="sample a procedural shape (optionally noisy) to XYZ", formatter_class=fmt)
    s.add_argument("--shape", choices=shapes.SHAPE_KINDS, required=True)
    s.add_argument("--n", type=_positive_int, default=2000, help="point count (>= 64)")
    s.add_argument("--params", type=_params, default={}, help="size parameters, e.g. radius=1.3")
    s.add_argument("--center", type=_vec3, default=(0.0, 0.0, 0.0))
    s.add_argument("--noise", type=_noise, default=None, help="kind:scale, scale relative to bounding radius")
    s.add_argument("--output", "--out", dest="output", required=True)
    s.add_argument("--clean", default=None, help="also write the noise-free cloud here")
    s.add_argument("--seed", type=int, default=argparse.SUPPRESS)

    t = sub.add_parser("train", help="run one training stage", formatter_class=fmt)
    t.add_argument("--stage", choices=training.STAGES, required=True)
    t.add_argument("--init", default=None, help="model file from the previous stage (needed for B and C)")
    t.add_argument("--output", required=True, help="model file to write")
    t.add_argument("--input", action="append", default=None,
                   help="clean training cloud (repeatable); default: 4 procedural shapes")
    t.add_argument("--steps", type=_nonneg_int, default=None,
                   help=f"optimizer steps (default per stage: {training.DEFAULT_STEPS})")
    t.add_argument("--k-patch", type=_positive_int, default=DEFAULT_PATCH_K, help="patch size")
    t.add_argument("--couplings", type=_positive_int, default=2, help="K, coupled velocity modules")
    t.add_argument("--euler-steps", type=_positive_int, default=3, help="N, Euler rounds per pass")
    t.add_argument("--sigma-h", type=float, default=0.02, help="training noise, fraction of bounding radius")
    t.add_argument("--lambda1", type=float, default=10.0, help="coupled-stack drift weight")
    t.add_argument("--lambda2", type=float, default=200.0, help="distance-stage landing weight")
    t.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    t.add_argument("--coupling-step", choices=("interval", "uniform"), default="interval",
                   help="stage-B chain step: (1-t)/K or 1/K")
    t.add_argument("--report", default=None, help="write step,loss CSV here")
    t.add_argument("--log-every", type=_nonneg_int, default=0)
    t.add_argument("--seed", type=int, default=argparse.SUPPRESS)

    d = sub.add_parser("denoise", help="filter a point cloud with a trained model", formatter_class=fmt)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--model", required=True)
    d.add_argument("--repeats", type=_positive_int, default=1, help="whole-pipeline repetitions (2 at 2%%, 3 at 3%% noise)")
    d.add_argument("--euler-steps", type=_positive_int, default=None, help="N (default: from model)")
    d.add_argument("--k-patch", type=_positive_int, default=None, help="patch size (default: from model)")
    d.add_argument("--couplings", type=_positive_int, default=None, help="K, must match the model")
    d.add_argument("--dump-trajectories", default=None, help="write 'point step x y z' lines here")
    d.add_argument("--workers", type=_positive_int, default=1, help="threads for patch filtering")
    d.add_argument("--seed", type=int, default=argparse.SUPPRESS)

    e = sub.add_parser("eval", help="score a filtered cloud against the clean one", formatter_class=fmt)
    e.add_argument("--input", required=True, help="filtered (or noisy) cloud")
    e.add_argument("--clean", required=True)
    e.add_argument("--surface", type=_surface, default=None,
                   help="sphere:cx,cy,cz,r | torus:cx,cy,cz,R,r | plane:px,py,pz,nx,ny,nz")
    e.add_argument("--shape", default="unknown", help="label for the CSV row")
    e.add_argument("--noise", type=_noise, default=None, help="label for the CSV row")
    e.add_argument("--dump-trajectories", default=None, help="trajectory file from denoise, for straightness")
    e.add_argument("--output", default=None, help="also write the CSV here")
    e.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    return args


class UsageError(Exception):
    pass


def _need_file(path, what):
    if path is not None and not Path(path).is_file():
        raise UsageError(f"{what} {path!r} does not exist")


def _need_dir(path, what):
    if path is not None and not Path(path).resolve().parent.is_dir():
        raise UsageError(f"directory for {what} {path!r} does not exist")


def validate(args) -> None:
    """Check preconditions and paths before any work starts."""
    if args.command == "synth":
        _need_dir(args.output, "--output")
        _need_dir(args.clean, "--clean")
    elif args.command == "train":
        if args.stage in ("B", "C") and args.init is None:
            raise UsageError(f"stage {args.stage} requires stage-{'A' if args.stage == 'B' else 'B'} weights (--init)")
        _need_file(args.init, "--init")
        for path in args.input or []:
            _need_file(path, "--input")
        _need_dir(args.output, "--output")
        _need_dir(args.report, "--report")
    elif args.command == "denoise":
        _need_file(args.input, "--input")
        _need_file(args.model, "--model")
        _need_dir(args.output, "--output")
        _need_dir(args.dump_trajectories, "--dump-trajectories")
    elif args.command == "eval":
        _need_file(args.input, "--input")
        _need_file(args.clean, "--clean")
        _need_file(args.dump_trajectories, "--dump-trajectories")
        _need_dir(args.output, "--output")


def write_trajectories(path, traj: np.ndarray) -> None:
    steps, n, _ = traj.shape
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(n):
            for s in range(steps):
                x, y, z = traj[s, i]
                fh.write(f"{i} {s} {x:.9g} {y:.9g} {z:.9g}\n")


def read_trajectories(path) -> np.ndarray:
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 5:
        raise ValueError(f"{path}: expected 'point step x y z' lines")
    idx = data[:, 0].astype(np.int64)
    step = data[:, 1].astype(np.int64)
    out = np.full((step.max() + 1, idx.max() + 1, 3), np.nan)
    out[step, idx] = data[:, 2:]
    if np.isnan(out).any():
        raise ValueError(f"{path}: incomplete trajectory table")
    return out


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    spec = shapes.ShapeSpec(args.shape, args.n, args.params, args.center)
    clean, surf = shapes.sample_shape(spec, rng)
    pts = clean if args.noise is None else metrics.add_noise(clean, args.noise, rng)
    io.write_xyz(args.output, pts)
    if args.clean:
        io.write_xyz(args.clean, clean)
    if surf is not None:
        print(f"surface {_surface_text(surf)}")
    return 0


def _surface_text(s: metrics.SurfaceSpec) -> str:
    c = ",".join(f"{v:.9g}" for v in s.center)
    if s.kind == "sphere":
        return f"sphere:{c},{s.radius:.9g}"
    if s.kind == "torus":
        return f"torus:{c},{s.major:.9g},{s.minor:.9g}"
    return "plane:" + c + "," + ",".join(f"{v:.9g}" for v in s.normal)


def cmd_train(args) -> int:
    if args.input:
        clouds = [io.read_points(p) for p in args.input]
    else:
        clouds = shapes.training_clouds(args.seed, n=2048)
    loss = training.LossConfig(args.lambda1, args.lambda2, args.sigma_h, args.coupling_step)
    fc = flow.FilterConfig(args.couplings, args.euler_steps, 1, args.k_patch)
    cfg = training.TrainConfig(args.steps, args.seed, args.lr, loss, fc)
    init = flow.FlowModel.load(args.init) if args.init else None
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else (lambda m: None)
    model, report = training.train_stage(args.stage, clouds, cfg, init, args.log_every, log)
    model.save(args.output)
    if args.report:
        report.write_csv(args.report)
    print(f"stage {args.stage}: {len(report.losses)} steps, final loss {report.final_loss:.6g}, "
          f"{report.wall_time:.1f}s, {model.param_count()} parameters")
    return 0


def cmd_denoise(args) -> int:
    model = flow.FlowModel.load(args.model)
    if args.couplings is not None and args.couplings != model.K:
        raise UsageError(f"--couplings {args.couplings} does not match the model's K={model.K}")
    cfg = model.filter_config(args.repeats, args.euler_steps, args.k_patch)
    cloud = io.read_points(args.input)
    res = flow.filter_cloud_full(model.stack, model.distance, cloud, cfg, args.workers)
    io.write_xyz(args.output, res.points)
    if args.dump_trajectories:
        write_trajectories(args.dump_trajectories, res.point_trajectories(cloud))
    return 0


EVAL_HEADER = "shape,noise_kind,noise_scale,cd_x1e4,p2s_x1e4,straightness"


def cmd_eval(args) -> int:
    pts = io.read_points(args.input)
    clean = io.read_points(args.clean)
    cd = metrics.chamfer(pts, clean, reference=clean)
    p2s = "" if args.surface is None else f"{1e4 * metrics.point_to_surface(pts, args.surface, clean):.6f}"
    st = ""
    if args.dump_trajectories:
        st = f"{flow.straightness(list(read_trajectories(args.dump_trajectories))):.6f}"
    kind, scale = (args.noise.kind, f"{args.noise.scale:g}") if args.noise else ("", "")
    lines = [
        "# flowdenoise " + " ".join(shlex.quote(a) for a in args.argv),
        EVAL_HEADER,
        f"{args.shape},{kind},{scale},{1e4 * cd:.6f},{p2s},{st}",
    ]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.output:
        Path(args.output).write_text(text)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "denoise": cmd_denoise, "eval": cmd_eval}


def run(args) -> int:
    try:
        validate(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"flowdenoise: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, training.TrainingError) as exc:
        print(f"flowdenoise: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # model file errors and anything unexpected
        print(f"flowdenoise: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return run(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
