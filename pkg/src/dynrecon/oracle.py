"""Analytic articulated-capsule scene with exact depth, normal and mask maps.

The scene replaces captured footage: a four-bone capsule figure (torso,
head, two arms) is posed per frame, sphere traced from a ring of cameras and
Lambert shaded under a fixed directional light.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deformation import JointTransformSet, rotation_about_axis, segment_distance
from .rendering import Camera, RayBatch

__all__ = [
    "CapsuleSkeleton",
    "FrameRecord",
    "GroundTruthHits",
    "default_skeleton",
    "swing_poses",
    "default_cameras",
    "sdf",
    "raymarch_gt",
    "ray_box_bounds",
    "add_image_noise",
    "generate_dataset",
    "render_ground_truth",
]

LIGHT_DIR = np.array([0.3, 0.8, 0.5]) / np.linalg.norm([0.3, 0.8, 0.5])
AMBIENT = 0.3
HIT_TOL = 1e-9
MAX_STEPS = 512
NORMAL_STEP = 1e-4


@dataclass
class CapsuleSkeleton:
    """K capsules in rest pose; joint k rotates capsule k about ``pivots[k]``."""

    starts: np.ndarray
    ends: np.ndarray
    radii: np.ndarray
    albedo: np.ndarray
    pivots: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("starts", "ends", "radii", "albedo", "pivots"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.radii <= 0):
            raise ValueError("capsule radii must be positive")

    @property
    def num_joints(self) -> int:
        return len(self.radii)

    def rest_pose(self, frame: int = 0) -> JointTransformSet:
        return JointTransformSet.identity(self.num_joints, frame)

    def posed_segments(self, pose: JointTransformSet) -> np.ndarray:
        """Bone axes under ``pose`` as (K, 2, 3)."""
        a = np.einsum("kij,kj->ki", pose.rotations, self.starts) + pose.translations
        b = np.einsum("kij,kj->ki", pose.rotations, self.ends) + pose.translations
        return np.stack([a, b], axis=1)

    def bounding_box(self, pose: JointTransformSet, inflate: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box around the posed capsules, grown by ``inflate`` of its size."""
        seg = self.posed_segments(pose)
        r = self.radii[:, None]
        lo = np.minimum(seg[:, 0], seg[:, 1]) - r
        hi = np.maximum(seg[:, 0], seg[:, 1]) + r
        lo, hi = lo.min(axis=0), hi.max(axis=0)
        pad = 0.5 * inflate * (hi - lo)
        return lo - pad, hi + pad

    def to_text(self) -> str:
        rows = []
        for k in range(self.num_joints):
            vals = [*self.starts[k], *self.ends[k], self.radii[k], *self.albedo[k], *self.pivots[k]]
            name = self.names[k] if self.names else f"bone{k}"
            rows.append(name + " " + " ".join(repr(float(v)) for v in vals))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CapsuleSkeleton":
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        names = tuple(r[0] for r in rows)
        v = np.array([[float(x) for x in r[1:]] for r in rows])
        return cls(v[:, 0:3], v[:, 3:6], v[:, 6], v[:, 7:10], v[:, 10:13], names)


def default_skeleton() -> CapsuleSkeleton:
    neck = [0.0, 0.3, 0.0]
    return CapsuleSkeleton(
        starts=[[0.0, -0.55, 0.0], neck, neck, neck],
        ends=[neck, [0.0, 0.55, 0.0], [0.6, -0.15, 0.0], [-0.6, -0.15, 0.0]],
        radii=[0.22, 0.15, 0.08, 0.08],
        albedo=[[0.8, 0.25, 0.2], [0.9, 0.75, 0.6], [0.2, 0.45, 0.85], [0.25, 0.8, 0.35]],
        pivots=[[0.0, -0.55, 0.0], neck, neck, neck],
        names=("torso", "head", "arm_l", "arm_r"),
    )


def swing_poses(
    skeleton: CapsuleSkeleton,
    num_frames: int = 30,
    amplitude: float = 0.6,
    head_amplitude: float = 0.2,
    phase: float = 0.0,
    start_frame: int = 0,
) -> list[JointTransformSet]:
    """Arms swing fore/aft in antiphase and the head nods; the torso stays put."""
    poses = []
    x_axis = np.array([1.0, 0.0, 0.0])
    for t in range(num_frames):
        s = np.sin(2 * np.pi * t / num_frames + phase)
        angles = [0.0, head_amplitude * s, amplitude * s, -amplitude * s]
        R = np.stack([rotation_about_axis(x_axis, a) for a in angles])
        tr = skeleton.pivots - np.einsum("kij,kj->ki", R, skeleton.pivots)
        poses.append(JointTransformSet(start_frame + t, R, tr))
    return poses


def default_cameras(
    width: int = 64,
    height: int = 64,
    radius: float = 3.0,
    azimuths_deg=(0.0, 120.0, 240.0, 60.0),
    elevation: float = 0.2,
) -> list[Camera]:
    """Cameras on a horizontal ring aimed at the origin; the last one is held out."""
    cams = []
    for az in np.deg2rad(azimuths_deg):
        pos = [radius * np.sin(az), elevation, radius * np.cos(az)]
        cams.append(Camera.look_at(pos, [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1.7 * width, width, height))
    return cams


def _capsule_distances(skeleton: CapsuleSkeleton, pose: JointTransformSet, x) -> np.ndarray:
    seg = skeleton.posed_segments(pose)
    return segment_distance(x, seg[:, 0], seg[:, 1]) - skeleton.radii


def sdf(skeleton: CapsuleSkeleton, pose: JointTransformSet, x) -> np.ndarray:
    """Signed distance to the union of posed capsules."""
    return _capsule_distances(skeleton, pose, x).min(axis=-1)


def sdf_normal(skeleton: CapsuleSkeleton, pose: JointTransformSet, x, h: float = NORMAL_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.stack(
        [sdf(skeleton, pose, x + h * e) - sdf(skeleton, pose, x - h * e) for e in np.eye(3)],
        axis=-1,
    )
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def ray_box_bounds(origins, directions, lo, hi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab test. Returns ``(near, far, hit)``; near is clamped to stay positive."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    near = np.maximum(tmin, 1e-3)
    hit = tmax > near
    return near, np.where(hit, tmax, near + 1.0), hit


@dataclass
class GroundTruthHits:
    hit: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    shade: np.ndarray


def raymarch_gt(skeleton: CapsuleSkeleton, pose: JointTransformSet, rays: RayBatch) -> GroundTruthHits:
    """Sphere trace the first surface crossing of each ray.

    Rays that do not converge to ``|sdf| < 1e-9`` within the iteration budget
    count as misses.
    """
    o, d = rays.origins, rays.directions
    n = len(o)
    t = rays.near.astype(np.float64).copy()
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(MAX_STEPS):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        dist = sdf(skeleton, pose, o[idx] + t[idx, None] * d[idx])
        done = np.abs(dist) < HIT_TOL
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, dist)
        gone = ~done & (t[idx] > rays.far[idx])
        active[idx[done | gone]] = False
    hit &= t <= rays.far
    depth = np.where(hit, t, 0.0)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    shade = np.zeros(n)
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        nrm = sdf_normal(skeleton, pose, p)
        normal[hit] = nrm
        part = _capsule_distances(skeleton, pose, p).argmin(axis=-1)
        albedo[hit] = skeleton.albedo[part]
        shade[hit] = AMBIENT + (1 - AMBIENT) * np.maximum(nrm @ LIGHT_DIR, 0.0)
    return GroundTruthHits(hit, depth, normal, albedo, shade)


@dataclass
class FrameRecord:
    """One rendered view: exact depth/normal/mask plus (possibly noisy) colors."""

    frame: int
    camera_index: int
    camera: Camera
    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    pose: JointTransformSet
    rgb_clean: np.ndarray | None = field(default=None, repr=False)


def _scene_bounds(skeleton, pose, cam: Camera, pixels):
    lo, hi = skeleton.bounding_box(pose, inflate=0.1)
    d = cam.directions(pixels)
    o = np.broadcast_to(cam.position, d.shape)
    near, far, _ = ray_box_bounds(o, d, lo, hi)
    n = len(d)
    return RayBatch(o.copy(), d, near, far, np.asarray(pixels), np.full(n, pose.frame))


def render_ground_truth(skeleton, pose, cam: Camera, background=(0.0, 0.0, 0.0)):
    """Clean ``(rgb, depth, normal, mask)`` maps for one camera and pose."""
    pixels = cam.pixel_grid()
    rays = _scene_bounds(skeleton, pose, cam, pixels)
    gt = raymarch_gt(skeleton, pose, rays)
    H, W = cam.height, cam.width
    rgb = np.where(gt.hit[:, None], gt.albedo * gt.shade[:, None], np.asarray(background))
    return (
        rgb.reshape(H, W, 3),
        gt.depth.reshape(H, W),
        gt.normal.reshape(H, W, 3),
        gt.hit.reshape(H, W),
    )


def add_image_noise(rgb, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Per-pixel, per-channel Gaussian noise, clamped to [0, 1]."""
    if sigma <= 0:
        return np.array(rgb, dtype=np.float64)
    return np.clip(rgb + rng.normal(0.0, sigma, size=np.shape(rgb)), 0.0, 1.0)


def generate_dataset(
    skeleton: CapsuleSkeleton,
    poses: list[JointTransformSet],
    cameras: list[Camera],
    noise_sigma: float = 0.0,
    seed: int = 0,
    background=(0.0, 0.0, 0.0),
) -> list[FrameRecord]:
    """One record per (pose, camera), ordered by pose then camera."""
    if not poses or not cameras:
        raise ValueError("need at least one pose and one camera")
    rng = np.random.default_rng(seed)
    records = []
    for pose in poses:
        for ci, cam in enumerate(cameras):
            rgb, depth, normal, mask = render_ground_truth(skeleton, pose, cam, background)
            noisy = add_image_noise(rgb, noise_sigma, rng)
            records.append(FrameRecord(pose.frame, ci, cam, noisy, depth, normal, mask, pose, rgb))
    return records


def write_cameras(path, cameras: list[Camera], roles: list[str]) -> None:
    lines = []
    for i, (cam, role) in enumerate(zip(cameras, roles)):
        vals = [cam.fx, cam.fy, cam.cx, cam.cy, *cam.rotation.reshape(-1), *cam.position]
        lines.append(f"{i} {role} {cam.width} {cam.height} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> tuple[list[Camera], list[str]]:
    cams, roles = [], []
    for ln in Path(path).read_text().splitlines():
        if not ln.strip():
            continue
        parts = ln.split()
        w, h = int(parts[2]), int(parts[3])
        v = [float(x) for x in parts[4:]]
        cams.append(Camera(v[0], v[1], v[2], v[3], w, h, np.array(v[4:13]).reshape(3, 3), v[13:16]))
        roles.append(parts[1])
    return cams, roles
