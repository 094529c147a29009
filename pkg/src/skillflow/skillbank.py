"""Per-skill 3D trajectory templates: build offline, store, retrieve and align."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateGeometry, EmptySkill, UnknownSkill
from .geometry import CameraModel, MotionFlow2D, back_project_points

BANK_FORMAT_VERSION = 1


@dataclass(frozen=True, order=True)
class SkillId:
    index: int
    name: str


SKILLS: tuple[SkillId, ...] = (
    SkillId(0, "Pouring"),
    SkillId(1, "Picking&Placing"),
    SkillId(2, "Pushing"),
    SkillId(3, "Slide Opening"),
    SkillId(4, "Hinge Opening"),
)


def skill_by_index(index: int) -> SkillId:
    for s in SKILLS:
        if s.index == index:
            return s
    raise UnknownSkill(index)


@dataclass(frozen=True, eq=False)
class SkillTemplate:
    waypoints: np.ndarray
    skill: SkillId


@dataclass(frozen=True, eq=False)
class TrajectoryPrior:
    waypoints: np.ndarray
    skill: SkillId

    @property
    def T(self) -> int:
        return self.waypoints.shape[0]


@dataclass(frozen=True, eq=False)
class SkillTemplateBank:
    templates: Mapping[int, SkillTemplate]
    horizon: int

    def __post_init__(self):
        for tpl in self.templates.values():
            if tpl.waypoints.shape != (self.horizon, 3):
                raise ValueError("all templates must share the bank horizon")

    @property
    def skills(self) -> list[SkillId]:
        return [self.templates[k].skill for k in sorted(self.templates)]

    def __getitem__(self, skill) -> SkillTemplate:
        idx = skill.index if isinstance(skill, SkillId) else int(skill)
        try:
            return self.templates[idx]
        except KeyError:
            raise UnknownSkill(f"skill {idx} is not in the bank") from None

    def __contains__(self, skill) -> bool:
        idx = skill.index if isinstance(skill, SkillId) else int(skill)
        return idx in self.templates


def lift_demo_to_3d(flow: MotionFlow2D, cam: CameraModel, pseudo_depth) -> np.ndarray:
    """Per-frame centroid of the back-projected keypoints, shape (T, 3)."""
    depth = np.asarray(pseudo_depth, dtype=float)
    if depth.shape != flow.tracks.shape[:2]:
        raise ValueError(f"pseudo_depth must be (T, N) = {flow.tracks.shape[:2]}, got {depth.shape}")
    pts = back_project_points(cam, flow.tracks, depth)
    return pts.mean(axis=1)


def resample(traj, T_out: int) -> np.ndarray:
    """Linear interpolation over normalised time [0, 1]."""
    traj = np.asarray(traj, dtype=float)
    if traj.shape[0] < 2:
        raise ValueError("need at least two waypoints to resample")
    if traj.shape[0] == T_out:
        return traj.copy()
    src = np.linspace(0.0, 1.0, traj.shape[0])
    dst = np.linspace(0.0, 1.0, T_out)
    return np.stack([np.interp(dst, src, traj[:, d]) for d in range(traj.shape[1])], axis=1)


def max_extent(points) -> float:
    p = np.asarray(points, dtype=float)
    diff = p[:, None, :] - p[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())


def normalize_trajectory(traj) -> np.ndarray:
    centered = np.asarray(traj, dtype=float) - np.mean(traj, axis=0)
    ext = max_extent(centered)
    if ext <= 1e-12:
        raise DegenerateGeometry("trajectory has zero spatial extent and cannot be normalised")
    return centered / ext


def build_bank(demos: Iterable[tuple[SkillId, np.ndarray]], T_out: int,
               skills: Sequence[SkillId] | None = None) -> SkillTemplateBank:
    """Average each skill's demos (time-resampled to ``T_out``) and normalise.

    ``skills`` declares which skills must be present; by default every skill
    that appears in ``demos``.
    """
    if T_out < 2:
        raise ValueError("template horizon must be >= 2")
    grouped: dict[int, list[np.ndarray]] = {}
    names: dict[int, SkillId] = {}
    for skill, traj in demos:
        traj = np.asarray(traj, dtype=float)
        if traj.ndim != 2 or traj.shape[1] != 3 or traj.shape[0] < 2:
            raise ValueError("each demo trajectory must be (L>=2, 3)")
        grouped.setdefault(skill.index, []).append(resample(traj, T_out))
        names[skill.index] = skill
    declared = list(skills) if skills is not None else [names[k] for k in sorted(names)]
    templates = {}
    for skill in declared:
        trajs = grouped.get(skill.index)
        if not trajs:
            raise EmptySkill(f"no demonstrations for skill {skill.index} ({skill.name})")
        mean = np.mean(np.stack(trajs), axis=0)
        templates[skill.index] = SkillTemplate(normalize_trajectory(mean), skill)
    return SkillTemplateBank(templates, T_out)


def retrieve_and_align(bank: SkillTemplateBank, skill, anchor, scale: float) -> TrajectoryPrior:
    """phi_t = anchor + scale * (psi_t - psi_1); phi_1 is exactly the anchor."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    tpl = bank[skill]
    anchor = np.asarray(anchor, dtype=float).reshape(3)
    wp = anchor + scale * (tpl.waypoints - tpl.waypoints[0])
    wp[0] = anchor
    return TrajectoryPrior(wp, tpl.skill)


def resample_prior(prior: TrajectoryPrior, T: int) -> TrajectoryPrior:
    if prior.T == T:
        return prior
    wp = resample(prior.waypoints, T)
    wp[0] = prior.waypoints[0]
    return TrajectoryPrior(wp, prior.skill)


def default_prior_scale(cloud_points) -> float:
    """Four times the frame-1 bounding-sphere diameter (centroid-centred sphere)."""
    p = np.asarray(cloud_points, dtype=float)
    radius = np.sqrt(((p - p.mean(axis=0)) ** 2).sum(-1)).max()
    return 4.0 * 2.0 * float(radius)


def bank_to_dict(bank: SkillTemplateBank, extra: dict | None = None) -> dict:
    d = {
        "version": BANK_FORMAT_VERSION,
        "horizon": bank.horizon,
        "skills": [
            {"index": s.index, "name": s.name, "waypoints": bank[s].waypoints.tolist()}
            for s in bank.skills
        ],
    }
    if extra:
        d.update(extra)
    return d


def bank_from_dict(d: dict) -> SkillTemplateBank:
    if d.get("version") != BANK_FORMAT_VERSION:
        raise ValueError(f"unsupported bank version {d.get('version')!r}")
    templates = {}
    for entry in d["skills"]:
        skill = SkillId(int(entry["index"]), str(entry["name"]))
        templates[skill.index] = SkillTemplate(np.asarray(entry["waypoints"], dtype=float), skill)
    return SkillTemplateBank(templates, int(d["horizon"]))


def save_bank(bank: SkillTemplateBank, path, extra: dict | None = None) -> None:
    with open(path, "w") as f:
        json.dump(bank_to_dict(bank, extra), f, indent=1)
        f.write("\n")


def load_bank(path) -> SkillTemplateBank:
    with open(path) as f:
        return bank_from_dict(json.load(f))
