"""skillflow command line: gen-data, build-bank, train, plan, eval.

Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric, 5 degenerate input.
``SKILLFLOW_SEED`` overrides ``--seed``. Every data artifact embeds
``{"tool", "config"}`` with the full argument set, so a run can be repeated
from any file it wrote.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .errors import (DegenerateGeometry, NonFiniteLoss, NumericalBreakdown, SkillFlowError)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_DEGENERATE = 0, 2, 3, 4, 5
TOOL = {"name": "skillflow", "version": __version__}


class UsageError(Exception):
    pass


def _tool_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())}


def _dump(path, obj, indent=None) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=indent, separators=(",", ":") if indent is None else None)
        f.write("\n")


def _read(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise OSError(f"no such file: {path}") from None


def _ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)


def _positive(name):
    def conv(s):
        try:
            v = int(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v
    return conv


def _nonneg_float(name):
    def conv(s):
        v = float(s)
        if not v >= 0:
            raise argparse.ArgumentTypeError(f"{name} must be >= 0, got {s}")
        return v
    return conv


def _float_list(s):
    return [float(x) for x in s.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# Shared loading
# ---------------------------------------------------------------------------

def _manifest_demos(data_dir, split=None):
    from .synth import load_demo, load_manifest
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise OSError(f"no manifest at {path}")
    manifest, entries = load_manifest(path)
    demos = [load_demo(p) for p, s in entries if split is None or s == split]
    return manifest, demos


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .skillbank import SKILLS
    from .synth import DatasetSpec, NoiseSpec, gen_dataset
    if args.skills > len(SKILLS):
        raise UsageError(f"--skills must be <= {len(SKILLS)}")
    spec = DatasetSpec(counts={s.index: args.per_skill for s in SKILLS[:args.skills]}, T=args.T,
                       grid=(args.grid, args.grid), object_extent=args.object_extent, relief=args.relief,
                       noise=NoiseSpec(args.px_noise, args.depth_noise), eval_fraction=args.eval_fraction)
    manifest = gen_dataset(spec, args.seed, args.out, config=_tool_config(args))
    print(f"wrote {len(manifest['demos'])} demos to {args.out}")
    return EXIT_OK


def cmd_build_bank(args) -> int:
    from .evaluation import bank_from_demos
    from .skillbank import save_bank
    manifest, demos = _manifest_demos(args.data, "train")
    if not demos:
        raise UsageError("dataset has no train-split demos")
    bank = bank_from_demos(demos, demos[0].T, args.pseudo_depth_noise, args.seed)
    save_bank(bank, args.out, extra={"tool": TOOL, "config": _tool_config(args),
                                     "dataset_seed": manifest.get("seed")})
    print(f"wrote bank with {len(bank.skills)} skills, horizon {bank.horizon} to {args.out}")
    return EXIT_OK


def _model_config(args, T, N):
    from .diffusion import DenoiserConfig, ModelConfig
    from .encoder import EncoderConfig
    return ModelConfig(
        EncoderConfig(D=args.D, heads=args.heads, scaled_attention=not args.unscaled_attention),
        DenoiserConfig(T=T, N=N, H=args.H, heads=args.den_heads, m=args.m,
                       rescale_schedule=not args.literal_schedule))


def cmd_train(args) -> int:
    from . import diffusion as dif
    from .synth import task_input_from_demo
    if args.grad_check:
        errors = dif.grad_check(tcfg=dif.TrainConfig(teacher_forcing=not args.no_teacher_forcing))
        worst = max(errors, key=errors.get)
        print(f"grad-check: worst relative error {errors[worst]:.3e} ({worst})")
        if errors[worst] > 1e-4:
            print("grad-check failed", file=sys.stderr)
            return EXIT_NUMERIC
    _, demos = _manifest_demos(args.data, "train")
    if not demos:
        raise UsageError("dataset has no train-split demos")
    cfg = _model_config(args, demos[0].T, demos[0].N)
    tcfg = dif.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
                           w1=args.w1, w2=args.w2, tau=args.tau, teacher_forcing=not args.no_teacher_forcing,
                           seed=args.seed)
    data = dif.make_training_set([d.flow for d in demos], [task_input_from_demo(d) for d in demos], cfg,
                                 demos[0].cam)
    try:
        params, log = dif.train(data, cfg, tcfg, on_epoch=(lambda r: print(
            f"epoch {r.epoch}: l_mse={r.l_mse:.4f} l_ce={r.l_ce:.4f} l_con={r.l_con:.4f} acc={r.acc:.3f}"))
            if args.verbose else None)
    except NonFiniteLoss as exc:
        print(f"error: {exc} (epoch {exc.epoch}, step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    extra = {"tool": TOOL, "config": _tool_config(args), "train": asdict(tcfg)}
    dif.save_checkpoint(args.out, params, cfg, extra)
    dif.write_metrics_csv(args.metrics or os.path.splitext(args.out)[0] + "_metrics.csv", log)
    print(f"wrote checkpoint {args.out}")
    return EXIT_OK


def _load_flow_file(path):
    from .geometry import MotionFlow2D
    d = _read(path)
    if "flow" in d:
        d = d["flow"]
    if isinstance(d, dict):
        return MotionFlow2D.from_dict(d)
    return MotionFlow2D(np.asarray(d, dtype=float))


def _lifted_dict(lifted, cfg_echo) -> dict:
    return {
        "tool": TOOL, "config": cfg_echo,
        "anchor": lifted.anchor.tolist(),
        "transforms": [T.to_dict() for T in lifted.transforms],
        "costs": [float(c) for c in lifted.per_frame_cost],
        "prior": None if lifted.prior is None else {"skill": lifted.prior.skill.index,
                                                    "waypoints": lifted.prior.waypoints.tolist()},
    }


def cmd_plan(args) -> int:
    from . import diffusion as dif
    from .encoder import skill_aware_encode
    from .skillbank import load_bank, skill_by_index
    from .synth import load_demo, task_input_from_demo
    from .transform import LiftConfig, lift_flow, to_actions

    timings = {}
    t0 = time.perf_counter()
    params, cfg, _ = dif.load_checkpoint(args.checkpoint)
    bank = load_bank(args.bank)
    demo = load_demo(args.demo)
    task = task_input_from_demo(demo)
    timings["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    from .encoder import classify_skill, featurize
    v_i, v_l, _ = featurize(task, params, cfg.encoder)
    logits, predicted = classify_skill(v_i, v_l, params)
    if args.skill is not None:
        skill = skill_by_index(args.skill)
    else:
        if np.all(logits == logits[0]):
            print("error: skill logits are all equal; pass --skill to choose one", file=sys.stderr)
            return EXIT_DEGENERATE
        skill = skill_by_index(predicted)
    ctx = skill_aware_encode(task, params, cfg.encoder, skill)
    timings["encode"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if args.flow_from_file:
        flow = _load_flow_file(args.flow_from_file)
        source = "file"
    else:
        flow = dif.sample(ctx, cfg.denoiser.schedule(), params, args.seed, cfg, demo.cam)
        source = "sampled"
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    lcfg = LiftConfig(lambda_prior=args.lambda_, use_prior=True, warm_start=not args.cold_start,
                      prior_scale=args.scale)
    lifted = lift_flow(flow, demo.depth1, demo.cam, bank, skill, lcfg)
    actions = to_actions(lifted, demo.cam)
    timings["lift"] = time.perf_counter() - t0

    echo = _tool_config(args)
    _ensure_dir(args.out)
    _dump(os.path.join(args.out, "flow.json"),
          {"tool": TOOL, "config": echo, "source": source, "skill": skill.index,
           "logits": logits.tolist(), **flow.to_dict()})
    _dump(os.path.join(args.out, "lifted.json"), _lifted_dict(lifted, echo))
    _dump(os.path.join(args.out, "actions.json"),
          {"tool": TOOL, "config": echo, "frame": "robot_base", "poses": [p.to_dict() for p in actions.poses]})
    print(f"skill {skill.index} ({skill.name}), flow {source}, {flow.T} frames x {flow.N} points")
    for k, v in timings.items():
        print(f"time {k}: {v * 1e3:.1f} ms")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaluation as ev
    from .skillbank import load_bank
    from .synth import NoiseSpec
    from .transform import LiftConfig
    manifest, demos = _manifest_demos(args.data, "eval")
    if not demos:
        raise UsageError("dataset has no eval-split demos")
    bank = load_bank(args.bank)
    base_noise = (demos[0].noise.px, demos[0].noise.depth)
    levels = [NoiseSpec(f * args.sweep_px, f * args.sweep_depth) for f in args.noise_factors]
    lcfg = LiftConfig(warm_start=not args.cold_start, prior_scale=args.scale)
    records = ev.run_eval(demos, bank, args.lambdas, levels, args.sweep_lambda, lcfg)
    _ensure_dir(args.out)
    summary = {}
    for lam in args.lambdas:
        win, m_on, m_off, n = ev.paired_win_rate(records, lam, noise=base_noise)
        summary[repr(lam)] = {"win_rate": win, "mean_on": m_on, "mean_off": m_off, "pairs": n}
    report = {"tool": TOOL, "config": _tool_config(args), "dataset_seed": manifest.get("seed"),
              "records": [asdict(r) for r in records], "aggregates": ev.aggregate(records),
              "paired_traj_rmse": summary}
    _dump(os.path.join(args.out, "report.json"), report, indent=1)
    ev.write_records_csv(os.path.join(args.out, "records.csv"), records)
    if not args.no_plots:
        ev.plot_curves(records, base_noise, os.path.join(args.out, "error_vs_lambda.svg"),
                       os.path.join(args.out, "error_vs_noise.svg"))
    for lam, s in summary.items():
        print(f"lambda {lam}: prior-on mean {s['mean_on']:.5f} m, prior-off {s['mean_off']:.5f} m, "
              f"win rate {s['win_rate']:.2f} over {s['pairs']} demos")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skillflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"skillflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic demo dataset and manifest")
    g.add_argument("--skills", type=_positive("--skills"), default=5)
    g.add_argument("--per-skill", type=_positive("--per-skill"), default=40)
    g.add_argument("--T", type=_positive("--T"), default=32)
    g.add_argument("--grid", type=_positive("--grid"), default=5)
    g.add_argument("--object-extent", type=float, default=0.06)
    g.add_argument("--relief", type=float, default=0.0)
    g.add_argument("--px-noise", type=_nonneg_float("--px-noise"), default=0.0)
    g.add_argument("--depth-noise", type=_nonneg_float("--depth-noise"), default=0.0)
    g.add_argument("--eval-fraction", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-bank", help="build skill templates from the train split")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--pseudo-depth-noise", type=_nonneg_float("--pseudo-depth-noise"), default=0.0)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_build_bank)

    t = sub.add_parser("train", help="train encoder and denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint JSON")
    t.add_argument("--metrics", help="metrics CSV (default: <out>_metrics.csv)")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=_positive("--batch-size"), default=10)
    t.add_argument("--lr", type=_nonneg_float("--lr"), default=1e-2)
    t.add_argument("--momentum", type=_nonneg_float("--momentum"), default=0.9)
    t.add_argument("--w1", type=_nonneg_float("--w1"), default=0.01)
    t.add_argument("--w2", type=_nonneg_float("--w2"), default=0.02)
    t.add_argument("--tau", type=float, default=0.1)
    t.add_argument("--m", type=_positive("--m"), default=50, help="diffusion steps")
    t.add_argument("--literal-schedule", action="store_true",
                   help="use betas 1e-4..0.02 over m steps without rescaling")
    t.add_argument("--D", type=_positive("--D"), default=32)
    t.add_argument("--heads", type=_positive("--heads"), default=4)
    t.add_argument("--H", type=_positive("--H"), default=8, help="denoiser width")
    t.add_argument("--den-heads", type=_positive("--den-heads"), default=1)
    t.add_argument("--unscaled-attention", action="store_true")
    t.add_argument("--no-teacher-forcing", action="store_true")
    t.add_argument("--grad-check", action="store_true", help="finite-difference check before training")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    pl = sub.add_parser("plan", help="encode, generate or load a flow, lift it, emit actions")
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--bank", required=True)
    pl.add_argument("--demo", required=True, help="demo JSON providing the task input and frame-1 depth")
    pl.add_argument("--flow-from-file", help="JSON flow (or demo) to lift instead of sampling")
    pl.add_argument("--lambda", dest="lambda_", type=_nonneg_float("--lambda"), default=0.1)
    pl.add_argument("--cold-start", action="store_true")
    pl.add_argument("--skill", type=int, help="skill index, bypassing the classifier")
    pl.add_argument("--scale", type=float, help="prior scale in metres")
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plan)

    e = sub.add_parser("eval", help="paired prior-on / prior-off evaluation")
    e.add_argument("--data", required=True)
    e.add_argument("--bank", required=True)
    e.add_argument("--checkpoint", help="recorded in the report; lifting uses the true skill")
    e.add_argument("--lambdas", type=_float_list, default=[0.0, 0.01, 0.1, 1.0, 10.0])
    e.add_argument("--noise-factors", type=_float_list, default=[0.0, 0.5, 1.0, 2.0],
                   help="multiples of (--sweep-px, --sweep-depth) for the noise sweep")
    e.add_argument("--sweep-px", type=_nonneg_float("--sweep-px"), default=0.5)
    e.add_argument("--sweep-depth", type=_nonneg_float("--sweep-depth"), default=0.01)
    e.add_argument("--sweep-lambda", type=_nonneg_float("--sweep-lambda"), default=0.1)
    e.add_argument("--cold-start", action="store_true")
    e.add_argument("--scale", type=float)
    e.add_argument("--no-plots", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    env_seed = os.environ.get("SKILLFLOW_SEED")
    if env_seed is not None and hasattr(args, "seed"):
        try:
            args.seed = int(env_seed)
        except ValueError:
            print(f"error: SKILLFLOW_SEED must be an integer, got {env_seed!r}", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLoss, NumericalBreakdown) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateGeometry as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (SkillFlowError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
