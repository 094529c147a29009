"""Paired prior-on / prior-off lifting experiments against generator ground truth."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .geometry import rotation_angle
from .skillbank import SkillTemplateBank, build_bank, lift_demo_to_3d
from .synth import NoiseSpec, SyntheticDemo, render_demo
from .transform import LiftConfig, LiftedTrajectory, lift_flow

METRICS = ("rot_err", "trans_rmse", "traj_rmse", "final_err")


@dataclass(frozen=True)
class EvalRecord:
    demo: int
    skill: int
    seed: int
    prior: bool
    lam: float
    noise_px: float
    noise_depth: float
    rot_err: float  # mean over frames, rad
    trans_rmse: float  # m
    traj_rmse: float  # centroid waypoints, m
    final_err: float  # final centroid, m

    def condition(self) -> tuple:
        return (self.prior, self.lam, self.noise_px, self.noise_depth)


def demo_metrics(demo: SyntheticDemo, lifted: LiftedTrajectory) -> dict[str, float]:
    rot = [rotation_angle(E.rotation @ G.rotation.T) for E, G in zip(lifted.transforms, demo.truth_transforms)]
    dt = np.stack([E.translation - G.translation for E, G in zip(lifted.transforms, demo.truth_transforms)])
    dc = lifted.centroids() - demo.truth_traj
    return {
        "rot_err": float(np.mean(rot)),
        "trans_rmse": float(np.sqrt(np.mean(np.sum(dt * dt, axis=1)))),
        "traj_rmse": float(np.sqrt(np.mean(np.sum(dc * dc, axis=1)))),
        "final_err": float(np.linalg.norm(dc[-1])),
    }


def bank_from_demos(demos: Iterable[SyntheticDemo], T_out: int, pseudo_depth_noise: float = 0.0,
                    seed: int = 0) -> SkillTemplateBank:
    """Templates from per-frame centroids lifted with true (optionally noised) depth."""
    pairs = []
    for i, d in enumerate(demos):
        depth = d.true_depths()
        if pseudo_depth_noise > 0:
            rng = np.random.default_rng([int(seed), int(d.seed), 3])
            depth = depth + rng.normal(0.0, pseudo_depth_noise, depth.shape)
        pairs.append((d.skill, lift_demo_to_3d(d.flow, d.cam, depth)))
    return build_bank(pairs, T_out)


def with_noise(demo: SyntheticDemo, noise: NoiseSpec) -> SyntheticDemo:
    """Re-render a demo's ground truth under another noise level (same noise seed)."""
    return render_demo(demo.truth_traj, demo.truth_transforms, demo.cam, demo.skill, demo.grid,
                       demo.object_extent, noise, demo.seed, demo.relief)


def lift_pair(demo: SyntheticDemo, bank: SkillTemplateBank, lam: float, base: LiftConfig = LiftConfig()):
    """(prior-off, prior-on) lifts of one demo with the true skill."""
    off = lift_flow(demo.flow, demo.depth1, demo.cam, cfg=replace(base, use_prior=False))
    on = lift_flow(demo.flow, demo.depth1, demo.cam, bank, demo.skill,
                   cfg=replace(base, use_prior=True, lambda_prior=lam))
    return off, on


def _record(i, demo, prior, lam, lifted) -> EvalRecord:
    return EvalRecord(i, demo.skill.index, demo.seed, prior, float(lam), float(demo.noise.px),
                      float(demo.noise.depth), **demo_metrics(demo, lifted))


def run_eval(demos: Sequence[SyntheticDemo], bank: SkillTemplateBank, lambdas: Sequence[float] = (0.0, 0.01, 0.1, 1.0, 10.0),
             noise_levels: Sequence[NoiseSpec] = (), sweep_lambda: float = 0.1,
             base: LiftConfig = LiftConfig()) -> list[EvalRecord]:
    """Records in demo order: prior-off, then prior-on for each lambda, then the noise sweep.

    Prior-off records carry ``lam = 0``.
    """
    records = []
    for i, demo in enumerate(demos):
        off = lift_flow(demo.flow, demo.depth1, demo.cam, cfg=replace(base, use_prior=False))
        records.append(_record(i, demo, False, 0.0, off))
        for lam in lambdas:
            on = lift_flow(demo.flow, demo.depth1, demo.cam, bank, demo.skill,
                           cfg=replace(base, use_prior=True, lambda_prior=lam))
            records.append(_record(i, demo, True, lam, on))
        for noise in noise_levels:
            noisy = with_noise(demo, noise)
            off, on = lift_pair(noisy, bank, sweep_lambda, base)
            records.append(_record(i, noisy, False, 0.0, off))
            records.append(_record(i, noisy, True, sweep_lambda, on))
    return records


def _stats(values) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "median": float(np.median(v)), "p95": float(np.percentile(v, 95))}


def aggregate(records: Sequence[EvalRecord]) -> list[dict]:
    """mean / median / p95 of every metric per (skill, condition); skill "all" pools skills.

    Duplicate (demo, condition) records are counted once so the noise sweep
    does not double-weight the base noise level.
    """
    unique = {}
    for r in records:
        unique.setdefault((r.demo,) + r.condition(), r)
    groups: dict[tuple, list[EvalRecord]] = {}
    for r in unique.values():
        groups.setdefault((r.skill,) + r.condition(), []).append(r)
        groups.setdefault(("all",) + r.condition(), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (str(k[0]),) + k[1:]):
        rs = groups[key]
        row = {"skill": key[0], "prior": key[1], "lam": key[2], "noise_px": key[3], "noise_depth": key[4],
               "count": len(rs)}
        for m in METRICS:
            row[m] = _stats([getattr(r, m) for r in rs])
        out.append(row)
    return out


def paired_win_rate(records: Sequence[EvalRecord], lam: float, metric: str = "traj_rmse",
                    noise: tuple | None = None) -> tuple[float, float, float, int]:
    """(win rate, mean on, mean off, pairs) of prior-on vs prior-off at ``lam``."""
    off, on = {}, {}
    for r in records:
        if noise is not None and (r.noise_px, r.noise_depth) != noise:
            continue
        key = (r.demo, r.noise_px, r.noise_depth)
        if not r.prior:
            off[key] = getattr(r, metric)
        elif r.lam == lam:
            on[key] = getattr(r, metric)
    keys = sorted(set(off) & set(on))
    if not keys:
        return math.nan, math.nan, math.nan, 0
    a = np.array([on[k] for k in keys])
    b = np.array([off[k] for k in keys])
    return float(np.mean(a < b)), float(a.mean()), float(b.mean()), len(keys)


def write_records_csv(path, records: Sequence[EvalRecord]) -> None:
    fields = list(EvalRecord.__dataclass_fields__)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def plot_curves(records: Sequence[EvalRecord], base_noise: tuple, path_lambda, path_noise,
                metric: str = "traj_rmse") -> None:
    """Line plots of mean error vs lambda and vs pixel noise, written as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    at_base = [r for r in records if (r.noise_px, r.noise_depth) == base_noise]
    off = [getattr(r, metric) for r in at_base if not r.prior]
    lams = sorted({r.lam for r in at_base if r.prior})
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if lams:
        on = [np.mean([getattr(r, metric) for r in at_base if r.prior and r.lam == lam]) for lam in lams]
        xs = [max(lam, 1e-3) for lam in lams]
        ax.plot(xs, on, marker="o", label="prior on")
        ax.axhline(np.mean(off), color="gray", linestyle="--", label="prior off")
        ax.set_xscale("log")
    ax.set_xlabel("lambda (0 drawn at 1e-3)")
    ax.set_ylabel(f"mean {metric} [m]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path_lambda, format="svg", metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for prior, label in ((False, "prior off"), (True, "prior on")):
        levels = sorted({r.noise_px for r in records if r.prior == prior})
        ys = []
        for px in levels:
            rs = [getattr(r, metric) for r in records if r.prior == prior and r.noise_px == px
                  and (not prior or r.lam == _sweep_lambda(records))]
            ys.append(np.mean(rs) if rs else np.nan)
        ax.plot(levels, ys, marker="o", label=label)
    ax.set_xlabel("pixel noise sigma [px]")
    ax.set_ylabel(f"mean {metric} [m]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path_noise, format="svg", metadata={"Date": None})
    plt.close(fig)


def _sweep_lambda(records) -> float:
    """Lambda used by the noise sweep: the one present at more than one noise level."""
    by_lam: dict[float, set] = {}
    for r in records:
        if r.prior:
            by_lam.setdefault(r.lam, set()).add(r.noise_px)
    best = max(by_lam.items(), key=lambda kv: (len(kv[1]), kv[0]), default=(0.1, set()))
    return best[0]
