"""Pinhole camera, SE(3) rigid transforms and pixel <-> 3D conversions.

Conventions:
  * pixels are (u, v) = (column, row), origin at the top-left corner, continuous;
  * twists are ordered (v, w): translational part first, rotation vector last;
  * a RigidTransform maps x -> R @ x + t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidTransform, LogNearPi, NonPositiveDepth

_ORTHO_TOL = 1e-9
_NEAR_PI = 1e-6


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidTransform(f"expected (3,3) rotation and (3,) translation, got {R.shape} and {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidTransform("non-finite transform")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidTransform("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def rotation_angle(self) -> float:
        return rotation_angle(self.rotation)

    def to_dict(self) -> dict:
        return {"R": self.rotation.reshape(-1).tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "RigidTransform":
        return cls(np.asarray(d["R"], dtype=float).reshape(3, 3), d["t"])


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_base: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "cam_to_base": self.cam_to_base.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "CameraModel":
        c2b = RigidTransform.from_dict(d["cam_to_base"]) if "cam_to_base" in d else RigidTransform.identity()
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), c2b)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        p = _frozen(self.points)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 1:
            raise ValueError(f"point cloud must be (N>=1, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True, eq=False)
class MotionFlow2D:
    """Tracked pixel keypoints, ``tracks[t, n] = (u, v)``. Points may leave the image."""

    tracks: np.ndarray

    def __post_init__(self):
        tr = _frozen(self.tracks)
        if tr.ndim != 3 or tr.shape[2] != 2:
            raise ValueError(f"tracks must be (T, N, 2), got {tr.shape}")
        if tr.shape[0] < 2 or tr.shape[1] < 3:
            raise ValueError("a flow needs T >= 2 frames and N >= 3 keypoints")
        if not np.all(np.isfinite(tr)):
            raise ValueError("flow has non-finite coordinates")
        object.__setattr__(self, "tracks", tr)

    @property
    def T(self) -> int:
        return self.tracks.shape[0]

    @property
    def N(self) -> int:
        return self.tracks.shape[1]

    def to_dict(self) -> dict:
        return {"T": self.T, "N": self.N, "tracks": self.tracks.tolist()}

    @classmethod
    def from_dict(cls, d) -> "MotionFlow2D":
        return cls(np.asarray(d["tracks"], dtype=float))


def project_points(cam: CameraModel, points) -> np.ndarray:
    """Vectorised pinhole projection of (..., 3) camera-frame points."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("point behind or on the camera plane")
    u = cam.fx * p[..., 0] / z + cam.cx
    v = cam.fy * p[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def project(cam: CameraModel, p) -> tuple[float, float]:
    uv = project_points(cam, np.asarray(p, dtype=float).reshape(3))
    return float(uv[0]), float(uv[1])


def back_project_points(cam: CameraModel, uv, depth) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveDepth("depth must be positive")
    x = (uv[..., 0] - cam.cx) * d / cam.fx
    y = (uv[..., 1] - cam.cy) * d / cam.fy
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def back_project(cam: CameraModel, uv, depth) -> np.ndarray:
    return back_project_points(cam, np.asarray(uv, dtype=float).reshape(2), float(depth))


def back_project_cloud(cam: CameraModel, uv, depths) -> PointCloud:
    return PointCloud(back_project_points(cam, np.asarray(uv, dtype=float).reshape(-1, 2), np.asarray(depths).reshape(-1)))


def apply_transform(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    return PointCloud(T.apply(cloud.points))


def hat(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(W) -> np.ndarray:
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        a, b = 1.0 - theta**2 / 6.0, 0.5 - theta**2 / 24.0
    else:
        a, b = np.sin(theta) / theta, 2.0 * np.sin(theta / 2.0) ** 2 / theta**2
    return np.eye(3) + a * W + b * (W @ W)


# Below this angle the cancelling coefficients use their Taylor series;
# truncation is < 1e-16 there while the closed forms lose ~eps / theta^2.
_SERIES_ANGLE = 0.1


def _v_coeff(th2):
    """(theta - sin theta) / theta^3."""
    return 1 / 6 - th2 / 120 + th2**2 / 5040 - th2**3 / 362880 + th2**4 / 39916800


def _v_inv_coeff(th2):
    """(1 - (theta/2) cot(theta/2)) / theta^2."""
    return 1 / 12 + th2 / 720 + th2**2 / 30240 + th2**3 / 1209600 + th2**4 / 47900160


def rotation_angle(R) -> float:
    s = np.linalg.norm(vee(R - R.T)) / 2.0
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def se3_exp_batch(twists) -> tuple[np.ndarray, np.ndarray]:
    """Unvalidated exp of (..., 6) twists ordered (v, w); returns R (..., 3, 3) and t (..., 3)."""
    xi = np.asarray(twists, dtype=float)
    v, w = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    th2 = theta * theta
    a = np.where(small, 1.0 - th2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - th2 / 24.0, 2.0 * np.sin(th / 2.0) ** 2 / th**2)
    c = np.where(theta < _SERIES_ANGLE, _v_coeff(th2), (th - np.sin(th)) / th**3)
    zero = np.zeros_like(w[..., 0])
    W = np.stack([np.stack([zero, -w[..., 2], w[..., 1]], -1),
                  np.stack([w[..., 2], zero, -w[..., 0]], -1),
                  np.stack([-w[..., 1], w[..., 0], zero], -1)], -2)
    W2 = W @ W
    eye = np.eye(3)
    R = eye + a * W + b * W2
    V = eye + b * W + c * W2
    return R, (V @ v[..., None])[..., 0]


def _q_coeffs(theta):
    """Coefficients of the SE(3) left-Jacobian coupling block, series below _SERIES_ANGLE."""
    t2 = theta * theta
    if theta < _SERIES_ANGLE:
        c2 = 1 / 24 - t2 / 720 + t2**2 / 40320 - t2**3 / 3628800 + t2**4 / 479001600
        c3 = 1 / 120 - t2 / 2520 + t2**2 / 120960 - t2**3 / 9979200
    else:
        s, c = np.sin(theta), np.cos(theta)
        c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    return _v_coeff(t2) if theta < _SERIES_ANGLE else (theta - np.sin(theta)) / theta**3, c2, c3


def se3_left_jacobian(twist) -> np.ndarray:
    """6x6 J with exp(xi + d) = exp(J d) exp(xi) to first order, twist order (v, w)."""
    xi = np.asarray(twist, dtype=float).reshape(6)
    Vh, W = hat(xi[:3]), hat(xi[3:])
    theta = float(np.linalg.norm(xi[3:]))
    c1, c2, c3 = _q_coeffs(theta)
    WW = W @ W
    b = 0.5 - theta**2 / 24.0 if theta < 1e-6 else 2.0 * np.sin(theta / 2.0) ** 2 / theta**2
    Jw = np.eye(3) + b * W + c1 * WW
    WV, VW, WVW = W @ Vh, Vh @ W, W @ Vh @ W
    Q = (0.5 * Vh + c1 * (WV + VW + WVW) + c2 * (WW @ Vh + Vh @ WW - 3.0 * WVW)
         + c3 * (WVW @ W + W @ WVW))
    J = np.zeros((6, 6))
    J[:3, :3] = J[3:, 3:] = Jw
    J[:3, 3:] = Q
    return J


def se3_exp(twist) -> RigidTransform:
    R, t = se3_exp_batch(np.asarray(twist, dtype=float).reshape(6))
    return RigidTransform(R, t)


def se3_log(T: RigidTransform) -> np.ndarray:
    R = T.rotation
    theta = rotation_angle(R)
    if np.pi - theta < _NEAR_PI:
        raise LogNearPi(f"rotation angle {theta:.9f} is within {_NEAR_PI} of pi")
    A = vee(R - R.T) / 2.0  # = sin(theta) * axis
    w = A * (1.0 + theta**2 / 6.0) if theta < 1e-6 else A * theta / np.sin(theta)
    if theta < _SERIES_ANGLE:
        d = _v_inv_coeff(theta**2)
    else:
        d = (1.0 - theta / (2.0 * np.tan(theta / 2.0))) / theta**2
    W = hat(w)
    V_inv = np.eye(3) - 0.5 * W + d * (W @ W)
    return np.concatenate([V_inv @ T.translation, w])
