"""Synthetic demonstrations with exact ground truth.

Five geometric archetypes stand in for the manipulation skills. Every demo
is a pure function of its integer seed plus the render settings, so any file
written here can be regenerated bit-for-bit.

Camera frame: x right, y down, z forward (metres).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .errors import ObjectBehindCamera
from .geometry import CameraModel, MotionFlow2D, RigidTransform, project_points, so3_exp
from .skillbank import SKILLS, SkillId, skill_by_index

DEMO_FORMAT_VERSION = 1
SHAPES = ("Arc", "LiftMoveLower", "Line", "AxisSlide", "HingeArc")


def default_camera() -> CameraModel:
    # Camera 0.6 m above the base origin, 1 m behind it, pitched 30 degrees down.
    pitch = np.deg2rad(30.0)
    # camera axes expressed in the base frame (base: x forward, y left, z up)
    x_c = np.array([0.0, -1.0, 0.0])
    z_c = np.array([np.cos(pitch), 0.0, -np.sin(pitch)])
    y_c = np.cross(z_c, x_c)
    R = np.stack([x_c, y_c, z_c], axis=1)
    return CameraModel(500.0, 500.0, 320.0, 240.0, 640, 480,
                       RigidTransform(R, np.array([-1.0, 0.0, 0.6])))


@dataclass(frozen=True)
class SkillFamily:
    skill: SkillId
    shape: str
    extent: tuple[float, float] = (0.30, 0.38)  # max pairwise extent of the centroid path, m
    start_lo: tuple[float, float, float] = (-0.15, -0.05, 0.9)
    start_hi: tuple[float, float, float] = (0.0, 0.08, 1.1)
    frames: int = 32
    angle: tuple[float, float] = (1.0, 1.3)  # rotation sweep for Arc / HingeArc, rad
    jitter: float = 0.06  # direction jitter (unit-vector perturbation)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not (0 < self.extent[0] <= self.extent[1]):
            raise ValueError("extent range must be positive and ordered")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if any(lo > hi for lo, hi in zip(self.start_lo, self.start_hi)):
            raise ValueError("start region bounds out of order")


def default_families(T: int = 32, skills: Sequence[SkillId] = SKILLS) -> list[SkillFamily]:
    shape_of = dict(zip(range(len(SHAPES)), SHAPES))
    families = []
    for s in skills:
        shape = shape_of[s.index]
        kwargs = {}
        if shape == "HingeArc":
            kwargs["angle"] = (0.8, 1.05)
        families.append(SkillFamily(s, shape, frames=T, **kwargs))
    return families


@dataclass(frozen=True)
class NoiseSpec:
    px: float = 0.0
    depth: float = 0.0

    def to_dict(self) -> dict:
        return {"px": self.px, "depth": self.depth}


@dataclass(frozen=True, eq=False)
class SyntheticDemo:
    truth_traj: np.ndarray
    truth_transforms: list
    flow: MotionFlow2D
    depth1: np.ndarray
    skill: SkillId
    noise: NoiseSpec
    seed: int
    cam: CameraModel
    cloud1: np.ndarray  # true frame-1 keypoints
    grid: tuple[int, int] = (5, 5)
    object_extent: float = 0.06
    relief: float = 0.0

    @property
    def T(self) -> int:
        return self.flow.T

    @property
    def N(self) -> int:
        return self.flow.N

    def exact_tracks(self) -> np.ndarray:
        return np.stack([project_points(self.cam, T.apply(self.cloud1)) for T in self.truth_transforms])

    def true_depths(self) -> np.ndarray:
        """Per-frame per-point depth, shape (T, N)."""
        return np.stack([T.apply(self.cloud1)[:, 2] for T in self.truth_transforms])


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _jittered(rng, base, amount) -> np.ndarray:
    return _unit(_unit(base) + amount * rng.uniform(-1.0, 1.0, 3))


def _profile(T: int) -> np.ndarray:
    u = np.linspace(0.0, 1.0, T)
    return 0.5 * (1.0 - np.cos(np.pi * u))


def _rotation_about(axis, pivot, angle) -> RigidTransform:
    R = so3_exp(_unit(axis) * angle)
    return RigidTransform(R, pivot - R @ pivot)


def gen_trajectory(family: SkillFamily, seed: int) -> tuple[np.ndarray, list]:
    """Centroid path (T, 3) and frame-1 -> frame-t rigid transforms of one demo."""
    rng = np.random.default_rng([int(seed), 0])
    T = family.frames
    c1 = rng.uniform(family.start_lo, family.start_hi)
    extent = rng.uniform(*family.extent)
    s = _profile(T)
    shape = family.shape

    if shape in ("Arc", "HingeArc"):
        theta = rng.uniform(*family.angle)
        radius = extent / (2.0 * np.sin(theta / 2.0))
        if shape == "Arc":
            # roll about (roughly) the line of sight, pivot to the right: the object rises and tips
            axis = _jittered(rng, [0.0, 0.0, 1.0], family.jitter)
            toward = np.array([1.0, 0.0, 0.0])
        else:
            # door swinging about a vertical hinge to the right, opening toward the camera
            axis = _jittered(rng, [0.0, -1.0, 0.0], family.jitter)
            toward = np.array([1.0, 0.0, 0.0])
        d = _unit(toward - (toward @ axis) * axis)
        pivot = c1 + radius * d
        transforms = [_rotation_about(axis, pivot, theta * sk) for sk in s]
        transforms[0] = RigidTransform.identity()
    else:
        if shape == "LiftMoveLower":
            direction = _jittered(rng, [1.0, 0.0, 0.35], family.jitter)
            up = _jittered(rng, [0.0, -1.0, 0.0], family.jitter)
            lift = 0.25 * extent
            offsets = extent * s[:, None] * direction + lift * np.sin(np.pi * s)[:, None] * up
        elif shape == "Line":
            direction = _jittered(rng, [1.0, 0.0, -0.4], family.jitter)
            offsets = extent * s[:, None] * direction
        else:  # AxisSlide: drawer pulled toward the camera
            direction = _jittered(rng, [0.25, 0.1, -1.0], family.jitter)
            offsets = extent * s[:, None] * direction
        offsets[0] = 0.0
        transforms = [RigidTransform.from_translation(o) for o in offsets]

    traj = np.stack([Tr.apply(c1) for Tr in transforms])
    return traj, transforms


def object_grid(center, grid=(5, 5), object_extent: float = 0.06, relief: float = 0.0) -> np.ndarray:
    """Fronto-parallel square patch of grid keypoints; ``relief`` bulges it toward the camera."""
    nx, ny = grid
    half = object_extent / 2.0
    gx, gy = np.meshgrid(np.linspace(-half, half, nx), np.linspace(-half, half, ny), indexing="xy")
    gx, gy = gx.ravel(), gy.ravel()
    dz = -relief * np.cos(np.pi * gx / object_extent) * np.cos(np.pi * gy / object_extent)
    dz -= dz.mean()
    return np.asarray(center, dtype=float) + np.stack([gx, gy, dz], axis=1)


def render_demo(traj, transforms, cam: CameraModel, skill: SkillId, grid=(5, 5),
                object_extent: float = 0.06, noise: NoiseSpec = NoiseSpec(), seed: int = 0,
                relief: float = 0.0) -> SyntheticDemo:
    traj = np.asarray(traj, dtype=float)
    cloud1 = object_grid(traj[0], grid, object_extent, relief)
    moved = np.stack([Tr.apply(cloud1) for Tr in transforms])
    if np.any(moved[..., 2] <= 0):
        raise ObjectBehindCamera("object passes behind the camera")
    exact = project_points(cam, moved)
    rng = np.random.default_rng([int(seed), 1])
    px_noise = rng.normal(0.0, 1.0, exact.shape) * noise.px
    depth_noise = rng.normal(0.0, 1.0, cloud1.shape[0]) * noise.depth
    depth1 = cloud1[:, 2] + depth_noise
    return SyntheticDemo(traj, list(transforms), MotionFlow2D(exact + px_noise), depth1, skill, noise,
                         int(seed), cam, cloud1, tuple(grid), object_extent, relief)


def make_demo(family: SkillFamily, seed: int, cam: CameraModel | None = None, grid=(5, 5),
              object_extent: float = 0.06, noise: NoiseSpec = NoiseSpec(), relief: float = 0.0) -> SyntheticDemo:
    cam = cam or default_camera()
    traj, transforms = gen_trajectory(family, seed)
    return render_demo(traj, transforms, cam, family.skill, grid, object_extent, noise, seed, relief)


def demo_seed(base_seed: int, skill_index: int, i: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(skill_index), int(i)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Task inputs (image, instruction, boxes) derived from a demo
# ---------------------------------------------------------------------------

VOCAB = ("<pad>", "pour", "pick", "place", "push", "slide", "swing", "open", "the", "into", "on", "to",
         "cup", "mug", "bottle", "block", "box", "can", "drawer", "tray", "door", "cabinet", "lid",
         "bowl", "plate", "target", "shelf", "left", "right", "forward",
         "pouring", "picking", "placing", "pushing", "opening", "hinge")
TOKEN = {w: i for i, w in enumerate(VOCAB)}
INSTRUCTION_LEN = 6
IMAGE_SHAPE = (24, 32)  # low-resolution render (rows, cols)

_OBJECTS = {
    0: ("cup", "mug", "bottle"),
    1: ("block", "box", "can"),
    2: ("block", "box", "can"),
    3: ("drawer", "tray", "box"),
    4: ("door", "cabinet", "lid"),
}
# skill-name token sequences used for the fixed skill prompt bank
SKILL_NAME_TOKENS = {0: ("pouring",), 1: ("picking", "placing"), 2: ("pushing",), 3: ("slide", "opening"),
                     4: ("hinge", "opening")}


def instruction_tokens(skill_index: int, seed: int) -> list[int]:
    rng = np.random.default_rng([int(seed), 2])
    objs = _OBJECTS.get(skill_index, ("box",))
    obj = objs[int(rng.integers(len(objs)))]
    words = {
        0: ["pour", "the", obj, "into", "the", "bowl"],
        1: ["pick", "the", obj, "place", "on", "plate"],
        2: ["push", "the", obj, "to", "the", "target"],
        3: ["slide", "open", "the", obj],
        4: ["swing", "open", "the", obj],
    }.get(skill_index, ["the", obj])
    ids = [TOKEN[w] for w in words][:INSTRUCTION_LEN]
    return ids + [TOKEN["<pad>"]] * (INSTRUCTION_LEN - len(ids))


def _bbox(points_uv, width, height) -> np.ndarray:
    lo = np.clip(points_uv.min(axis=0), 0.0, [width - 2.0, height - 2.0])
    hi = np.clip(points_uv.max(axis=0), lo + 1.0, [width - 1.0, height - 1.0])
    return np.array([lo[0], lo[1], hi[0], hi[1]])


def task_boxes(tracks, cam: CameraModel) -> np.ndarray:
    """Object box at frame 1 and target box at the final frame, (2, 4) pixels."""
    tracks = np.asarray(tracks, dtype=float)
    return np.stack([_bbox(tracks[0], cam.width, cam.height), _bbox(tracks[-1], cam.width, cam.height)])


def render_image(boxes, cam: CameraModel, seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 3])
    h, w = IMAGE_SHAPE
    img = np.empty((h, w, 3))
    img[:] = rng.uniform(0.2, 0.5, 3)
    colors = [rng.uniform(0.5, 1.0, 3), np.array([0.1, 0.8, 0.2])]
    for box, color in zip(boxes, colors):
        x1, y1, x2, y2 = box
        c1, c2 = int(np.floor(x1 / cam.width * w)), int(np.ceil(x2 / cam.width * w))
        r1, r2 = int(np.floor(y1 / cam.height * h)), int(np.ceil(y2 / cam.height * h))
        img[r1:max(r2, r1 + 1), c1:max(c2, c1 + 1)] = color
    return img


@dataclass(frozen=True, eq=False)
class TaskInput:
    image: np.ndarray
    instruction: np.ndarray
    boxes: np.ndarray
    skill_label: SkillId | None = None
    image_size: tuple[int, int] = (640, 480)  # (width, height) the boxes refer to

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=float)
        w, h = self.image_size
        if boxes.ndim != 2 or boxes.shape[1] != 4 or boxes.shape[0] < 1:
            raise ValueError("boxes must be (N_o >= 1, 4)")
        if np.any(boxes[:, 0] >= boxes[:, 2]) or np.any(boxes[:, 1] >= boxes[:, 3]):
            raise ValueError("boxes need x1 < x2 and y1 < y2")
        if np.any(boxes < 0) or np.any(boxes[:, [0, 2]] > w) or np.any(boxes[:, [1, 3]] > h):
            raise ValueError("boxes must lie inside the image")


def task_input(skill: SkillId | None, seed: int, tracks, cam: CameraModel, skill_index: int | None = None) -> TaskInput:
    idx = skill.index if skill is not None else skill_index
    boxes = task_boxes(tracks, cam)
    return TaskInput(render_image(boxes, cam, seed), np.asarray(instruction_tokens(idx, seed)), boxes,
                     skill, (cam.width, cam.height))


def task_input_from_demo(demo: SyntheticDemo) -> TaskInput:
    return task_input(demo.skill, demo.seed, demo.flow.tracks, demo.cam)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def demo_to_dict(demo: SyntheticDemo, config: dict | None = None) -> dict:
    d = {
        "version": DEMO_FORMAT_VERSION,
        "tool": {"name": "skillflow", "version": __version__},
        "seed": demo.seed,
        "skill": {"index": demo.skill.index, "name": demo.skill.name},
        "T": demo.T,
        "N": demo.N,
        "cam": demo.cam.to_dict(),
        "flow": demo.flow.tracks.tolist(),
        "depth1": demo.depth1.tolist(),
        "truth": {
            "traj": demo.truth_traj.tolist(),
            "transforms": [T.to_dict() for T in demo.truth_transforms],
            "cloud1": demo.cloud1.tolist(),
        },
        "noise": demo.noise.to_dict(),
        "render": {"grid": list(demo.grid), "object_extent": demo.object_extent, "relief": demo.relief},
    }
    if config is not None:
        d["config"] = config
    return d


def demo_from_dict(d: dict) -> SyntheticDemo:
    truth = d["truth"]
    render = d.get("render", {})
    return SyntheticDemo(
        truth_traj=np.asarray(truth["traj"], dtype=float),
        truth_transforms=[RigidTransform.from_dict(t) for t in truth["transforms"]],
        flow=MotionFlow2D(np.asarray(d["flow"], dtype=float)),
        depth1=np.asarray(d["depth1"], dtype=float),
        skill=SkillId(int(d["skill"]["index"]), str(d["skill"]["name"])),
        noise=NoiseSpec(float(d["noise"]["px"]), float(d["noise"]["depth"])),
        seed=int(d["seed"]),
        cam=CameraModel.from_dict(d["cam"]),
        cloud1=np.asarray(truth["cloud1"], dtype=float),
        grid=tuple(render.get("grid", (5, 5))),
        object_extent=float(render.get("object_extent", 0.06)),
        relief=float(render.get("relief", 0.0)),
    )


def write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=None, separators=(",", ":"))
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def load_demo(path) -> SyntheticDemo:
    return demo_from_dict(read_json(path))


@dataclass(frozen=True)
class DatasetSpec:
    counts: dict  # skill index -> number of demos
    T: int = 32
    grid: tuple[int, int] = (5, 5)
    object_extent: float = 0.06
    relief: float = 0.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    eval_fraction: float = 0.2

    def __post_init__(self):
        if not self.counts or any(c < 1 for c in self.counts.values()):
            raise ValueError("every skill needs at least one demo")


def generate_demos(spec: DatasetSpec, seed: int, cam: CameraModel | None = None):
    """Yield ``(demo, split)`` in manifest order; pure function of (spec, seed)."""
    cam = cam or default_camera()
    families = {f.skill.index: f for f in default_families(spec.T, [skill_by_index(i) for i in spec.counts])}
    for skill_index in sorted(spec.counts):
        count = spec.counts[skill_index]
        n_eval = int(np.floor(count * spec.eval_fraction))
        for i in range(count):
            s = demo_seed(seed, skill_index, i)
            demo = make_demo(families[skill_index], s, cam, spec.grid, spec.object_extent, spec.noise, spec.relief)
            yield demo, ("eval" if i >= count - n_eval else "train")


def gen_dataset(spec: DatasetSpec, seed: int, out_dir, cam: CameraModel | None = None,
                config: dict | None = None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for demo, split in generate_demos(spec, seed, cam):
        name = f"demo_{demo.skill.index:02d}_{len(entries):05d}.json"
        path = os.path.join(out_dir, name)
        try:
            write_json(path, demo_to_dict(demo, config))
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        entries.append({"path": name, "split": split, "skill": demo.skill.index, "seed": demo.seed})
    manifest = {"version": DEMO_FORMAT_VERSION, "tool": {"name": "skillflow", "version": __version__},
                "seed": int(seed), "demos": entries}
    if config is not None:
        manifest["config"] = config
    mpath = os.path.join(out_dir, "manifest.json")
    try:
        with open(mpath, "w") as f:
            json.dump(manifest, f, indent=1)
            f.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write {mpath}: {exc}") from exc
    return manifest


def load_manifest(path) -> tuple[dict, list[tuple[str, str]]]:
    manifest = read_json(path)
    root = os.path.dirname(os.path.abspath(path))
    return manifest, [(os.path.join(root, e["path"]), e["split"]) for e in manifest["demos"]]
