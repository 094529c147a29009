"""Lift a 2D motion flow to per-frame SE(3) object motion and end-effector poses.

Each frame t solves, over a twist xi with ``T = se3_exp(xi) ∘ init``,

    sum_n ||P_tn - project(T P_1n)||^2  +  lam * sum_n ||T P_1n - phi_t||^2

where the second term is only present when a trajectory prior is used.
Pixel residuals are in pixels, prior residuals in metres.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateGeometry, NumericalBreakdown
from .geometry import (CameraModel, MotionFlow2D, PointCloud, RigidTransform, back_project_cloud,
                       se3_exp, se3_exp_batch, se3_left_jacobian)
from .nlls import ResidualProblem, SolverConfig, SolverReport, solve
from .skillbank import (SkillTemplateBank, TrajectoryPrior, default_prior_scale, resample_prior,
                        retrieve_and_align)


@dataclass(frozen=True)
class LiftConfig:
    lambda_prior: float = 0.1
    use_prior: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    warm_start: bool = True
    prior_scale: Optional[float] = None  # None: default_prior_scale of the frame-1 cloud

    def __post_init__(self):
        if self.lambda_prior < 0:
            raise ValueError("lambda_prior must be >= 0")


@dataclass(frozen=True, eq=False)
class LiftedTrajectory:
    transforms: list
    per_frame_cost: list  # final reprojection cost (px^2) of each frame
    anchor: np.ndarray  # frame-1 object centroid, camera frame
    prior: Optional[TrajectoryPrior] = None
    reports: list = field(default_factory=list, repr=False)

    @property
    def T(self) -> int:
        return len(self.transforms)

    def centroids(self) -> np.ndarray:
        return np.stack([T.apply(self.anchor) for T in self.transforms])


@dataclass(frozen=True, eq=False)
class ActionSequence:
    poses: list

    def __len__(self):
        return len(self.poses)


def check_geometry(cloud: PointCloud) -> None:
    if len(cloud) < 3:
        raise DegenerateGeometry("need at least 3 points")
    s = np.linalg.svd(cloud.points - cloud.centroid(), compute_uv=False)
    if s[1] <= 1e-9:
        raise DegenerateGeometry("points are collinear")


def _reprojection(cam: CameraModel, X: np.ndarray, obs: np.ndarray) -> np.ndarray:
    z = X[:, 2]
    if np.any(z <= 0):
        return np.full(obs.size, np.inf)
    u = cam.fx * X[:, 0] / z + cam.cx
    v = cam.fy * X[:, 1] / z + cam.cy
    return np.stack([u - obs[:, 0], v - obs[:, 1]], axis=1).ravel()


def frame_problem(obs, cloud1: PointCloud, cam: CameraModel, init: RigidTransform,
                  target=None, lam: float = 0.0) -> ResidualProblem:
    """Residuals of frame t in the left-composed twist xi, T = exp(xi) ∘ init, with analytic Jacobian.

    Reprojection rows come first; when ``target`` is given, sqrt(lam)(T p_j - phi_t) rows follow.
    """
    obs = np.asarray(obs, dtype=float).reshape(-1, 2)
    P = cloud1.points
    if obs.shape[0] != P.shape[0]:
        raise ValueError("flow frame and cloud must have the same number of points")
    X0 = init.apply(P)
    sqrt_lam = np.sqrt(lam)
    with_prior = target is not None
    phi = None if target is None else np.asarray(target, dtype=float).reshape(3)

    def points(xi):
        R, t = se3_exp_batch(xi)
        return X0 @ R.T + t

    def residual(xi):
        X = points(xi)
        z = X[:, 2]
        if np.any(z <= 0):
            r = np.full(2 * len(X), np.inf)
        else:
            r = np.column_stack([cam.fx * X[:, 0] / z + cam.cx - obs[:, 0],
                                 cam.fy * X[:, 1] / z + cam.cy - obs[:, 1]]).reshape(-1)
        if with_prior:
            r = np.concatenate([r, sqrt_lam * (X - phi).reshape(-1)])
        return r

    def jacobian(xi):
        # dX/d(left perturbation) = [I | -[X]x], chained through the SE(3) left Jacobian
        X = points(xi)
        dX = np.zeros((len(X), 3, 6))
        dX[:, :, :3] = np.eye(3)
        dX[:, 0, 4], dX[:, 0, 5] = X[:, 2], -X[:, 1]
        dX[:, 1, 3], dX[:, 1, 5] = -X[:, 2], X[:, 0]
        dX[:, 2, 3], dX[:, 2, 4] = X[:, 1], -X[:, 0]
        dX = dX @ se3_left_jacobian(xi)
        z = X[:, 2, None]
        du = cam.fx * (dX[:, 0] - X[:, 0, None] / z * dX[:, 2]) / z
        dv = cam.fy * (dX[:, 1] - X[:, 1, None] / z * dX[:, 2]) / z
        J = np.stack([du, dv], axis=1).reshape(-1, 6)
        if with_prior:
            J = np.concatenate([J, sqrt_lam * dX.reshape(-1, 6)])
        return J

    m = 2 * len(P) + (3 * len(P) if with_prior else 0)
    return ResidualProblem(residual, 6, m, jacobian_fn=jacobian)


def _solve_frame(obs, cloud1: PointCloud, cam: CameraModel, init: RigidTransform, cfg: SolverConfig,
                 target=None, lam: float = 0.0) -> tuple[RigidTransform, SolverReport]:
    check_geometry(cloud1)
    report = solve(frame_problem(obs, cloud1, cam, init, target, lam), np.zeros(6), cfg)
    return se3_exp(report.solution).compose(init), report


def estimate_transform(flow_frame_t, cloud1: PointCloud, cam: CameraModel,
                       init: RigidTransform | None = None,
                       cfg: SolverConfig = SolverConfig()) -> tuple[RigidTransform, float]:
    """Reprojection-only pose of frame t relative to frame 1; returns (T, cost)."""
    T, report = _solve_frame(flow_frame_t, cloud1, cam, init or RigidTransform.identity(), cfg)
    return T, report.final_cost


def estimate_transform_with_prior(flow_frame_t, cloud1: PointCloud, cam: CameraModel, prior_waypoint,
                                  lam: float, init: RigidTransform | None = None,
                                  cfg: SolverConfig = SolverConfig()) -> tuple[RigidTransform, float]:
    """Joint reprojection + prior pose; the cost includes the weighted prior term."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    T, report = _solve_frame(flow_frame_t, cloud1, cam, init or RigidTransform.identity(), cfg,
                             target=prior_waypoint, lam=lam)
    return T, report.final_cost


def reprojection_cost(flow_frame_t, cloud1: PointCloud, cam: CameraModel, T: RigidTransform) -> float:
    r = _reprojection(cam, T.apply(cloud1.points), np.asarray(flow_frame_t, dtype=float).reshape(-1, 2))
    return float(r @ r)


def lift_flow(flow: MotionFlow2D, depth1, cam: CameraModel, bank: SkillTemplateBank | None = None,
              skill=None, cfg: LiftConfig = LiftConfig()) -> LiftedTrajectory:
    """Back-project frame 1, align the skill prior, then solve every later frame."""
    cloud1 = back_project_cloud(cam, flow.tracks[0], depth1)
    check_geometry(cloud1)
    anchor = cloud1.centroid()
    prior = None
    if cfg.use_prior:
        if bank is None or skill is None:
            raise ValueError("use_prior requires a bank and a skill")
        scale = cfg.prior_scale if cfg.prior_scale is not None else default_prior_scale(cloud1.points)
        prior = resample_prior(retrieve_and_align(bank, skill, anchor, scale), flow.T)

    transforms = [RigidTransform.identity()]
    costs = [reprojection_cost(flow.tracks[0], cloud1, cam, transforms[0])]
    reports = [None]
    prev = transforms[0]
    for t in range(1, flow.T):
        init = prev if cfg.warm_start else RigidTransform.identity()
        if np.any(init.apply(cloud1.points)[:, 2] <= 0):
            init = RigidTransform.identity()  # previous pose is infeasible here; frame 1 never is
        target = prior.waypoints[t] if prior is not None else None
        try:
            T, report = _solve_frame(flow.tracks[t], cloud1, cam, init, cfg.solver,
                                     target=target, lam=cfg.lambda_prior)
        except NumericalBreakdown as exc:
            raise NumericalBreakdown(f"frame {t}: {exc}") from exc
        transforms.append(T)
        costs.append(reprojection_cost(flow.tracks[t], cloud1, cam, T))
        reports.append(report)
        prev = T
    return LiftedTrajectory(transforms, costs, anchor, prior, reports)


def object_pose_frame1(lifted: LiftedTrajectory) -> RigidTransform:
    return RigidTransform(np.eye(3), lifted.anchor)


def to_actions(lifted: LiftedTrajectory, cam: CameraModel,
               grasp_offset: RigidTransform | None = None) -> ActionSequence:
    """a_t = cam_to_base ∘ T_t ∘ object_pose_1 ∘ grasp_offset, in the robot base frame."""
    offset = grasp_offset or RigidTransform.identity()
    obj1 = object_pose_frame1(lifted)
    poses = [cam.cam_to_base.compose(T).compose(obj1).compose(offset) for T in lifted.transforms]
    return ActionSequence(poses)
