"""Inverse linear blend skinning between posed and canonical space."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "JointTransformSet",
    "DegeneratePoseError",
    "FrameDeformation",
    "blend_transforms",
    "deform_to_canonical",
    "blend_forward",
    "segment_distance",
    "posed_blend_weights",
    "weight_consistency_loss",
    "rotation_about_axis",
    "write_poses",
    "read_poses",
]

MAX_CONDITION = 1e8


class DegeneratePoseError(ValueError):
    """The blended skinning matrix is (numerically) singular."""


@dataclass
class JointTransformSet:
    """Per-joint rigid transforms ``G_k`` of one frame, mapping canonical to posed."""

    frame: int
    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if len(self.rotations) != len(self.translations):
            raise ValueError("rotation and translation counts differ")
        eye = np.eye(3)
        rtr = np.einsum("kji,kjl->kil", self.rotations, self.rotations)
        if np.any(np.abs(rtr - eye) > 1e-5) or np.any(
            np.abs(np.linalg.det(self.rotations) - 1.0) > 1e-5
        ):
            raise ValueError(f"frame {self.frame}: rotations must be orthonormal with det +1")

    @property
    def num_joints(self) -> int:
        return len(self.rotations)

    @classmethod
    def identity(cls, num_joints: int, frame: int = 0) -> "JointTransformSet":
        return cls(frame, np.tile(np.eye(3), (num_joints, 1, 1)), np.zeros((num_joints, 3)))

    def apply(self, joint: int, x) -> np.ndarray:
        return np.asarray(x) @ self.rotations[joint].T + self.translations[joint]


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def blend_transforms(pose: JointTransformSet, weights) -> tuple[np.ndarray, np.ndarray]:
    """Blended affine ``sum_k w_k G_k`` as ``(M (..., 3, 3), t (..., 3))``.

    The linear part is accumulated as ``I + sum_k w_k (R_k - I)``, equal for
    normalized weights, so identity rotations blend to exactly ``I``
    regardless of rounding in ``sum_k w_k``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[-1] != pose.num_joints:
        raise ValueError(f"weights have {w.shape[-1]} joints, pose has {pose.num_joints}")
    M = np.eye(3) + np.einsum("...k,kij->...ij", w, pose.rotations - np.eye(3))
    t = w @ pose.translations
    return M, t


def _inverse_checked(M: np.ndarray) -> np.ndarray:
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError:
        raise DegeneratePoseError("blended skinning matrix is singular") from None
    # Frobenius condition estimate; within a factor 3 of the 2-norm one
    cond = np.linalg.norm(M, axis=(-2, -1)) * np.linalg.norm(Minv, axis=(-2, -1))
    if not np.all(np.isfinite(cond)) or np.any(cond > MAX_CONDITION):
        raise DegeneratePoseError(f"blended skinning matrix condition {np.max(cond):.3g} > 1e8")
    return Minv


def deform_to_canonical(x_posed, pose: JointTransformSet, weights) -> np.ndarray:
    """``x_c = (sum_k w_k G_k)^{-1} x_p`` in homogeneous coordinates."""
    x = np.asarray(x_posed, dtype=np.float64)
    M, t = blend_transforms(pose, weights)
    Minv = _inverse_checked(M)
    return np.einsum("...ij,...j->...i", Minv, x - t)


def blend_forward(x_canonical, pose: JointTransformSet, weights) -> np.ndarray:
    x = np.asarray(x_canonical, dtype=np.float64)
    M, t = blend_transforms(pose, weights)
    return np.einsum("...ij,...j->...i", M, x) + t


def segment_distance(x, a, b) -> np.ndarray:
    """Distance from points (..., 3) to each of K segments ``a[k]-b[k]``; shape (..., K)."""
    x = np.asarray(x, dtype=np.float64)[..., None, :]
    a = np.asarray(a, dtype=np.float64)
    ab = np.asarray(b, dtype=np.float64) - a
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-12)
    s = np.clip(np.sum((x - a) * ab, axis=-1) / denom, 0.0, 1.0)
    closest = a + s[..., None] * ab
    return np.linalg.norm(x - closest, axis=-1)


def posed_blend_weights(segments, x, eps: float = 1e-6) -> np.ndarray:
    """Normalized inverse-squared distance to each posed bone segment.

    ``segments`` has shape (K, 2, 3).
    """
    seg = np.asarray(segments, dtype=np.float64)
    d = segment_distance(x, seg[:, 0], seg[:, 1])
    inv = 1.0 / (d * d + eps)
    return inv / inv.sum(axis=-1, keepdims=True)


@dataclass
class FrameDeformation:
    """Posed-to-canonical mapping for one frame.

    Skinning weights come from the posed bone segments and are held fixed
    when the mapping is differentiated with respect to the posed point.
    """

    pose: JointTransformSet
    segments: np.ndarray

    def weights(self, x_posed) -> np.ndarray:
        return posed_blend_weights(self.segments, x_posed)

    def to_canonical(self, x_posed) -> np.ndarray:
        return deform_to_canonical(x_posed, self.pose, self.weights(x_posed))

    def inverse_affine(self, x_posed) -> tuple[np.ndarray, np.ndarray]:
        M, t = blend_transforms(self.pose, self.weights(x_posed))
        return _inverse_checked(M), t

    def to_canonical_tensor(self, x_posed: Tensor) -> Tensor:
        Minv, t = self.inverse_affine(x_posed.data)
        return apply_inverse_affine(x_posed, Minv, t)


def apply_inverse_affine(x: Tensor, Minv: np.ndarray, t: np.ndarray) -> Tensor:
    """``Minv @ (x - t)`` per point, differentiable in ``x``."""
    v = ad.sub(x, t)
    lead = v.shape[:-1]
    return ad.sum_(ad.mul(Minv, ad.reshape(v, lead + (1, 3))), axis=-1)


def weight_consistency_loss(posed_weights, canonical_weights) -> Tensor:
    """Summed L1 difference between posed and canonical blend weights."""
    diff = ad.sub(canonical_weights, np.asarray(posed_weights, dtype=np.float64))
    return ad.sum_(ad.abs_(diff))


# -- pose file --------------------------------------------------------------


def write_poses(path, poses: list[JointTransformSet]) -> None:
    """One ``frame K`` header line per frame, then K rows of rotation(9) + translation(3)."""
    lines = []
    for pose in poses:
        lines.append(f"{pose.frame} {pose.num_joints}")
        for R, t in zip(pose.rotations, pose.translations):
            vals = list(R.reshape(-1)) + list(t)
            lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> list[JointTransformSet]:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    poses, i = [], 0
    while i < len(rows):
        frame, k = int(rows[i][0]), int(rows[i][1])
        block = np.array([[float(v) for v in r] for r in rows[i + 1 : i + 1 + k]])
        if block.shape != (k, 12):
            raise ValueError(f"{path}: frame {frame} expects {k} rows of 12 values")
        poses.append(JointTransformSet(frame, block[:, :9].reshape(k, 3, 3), block[:, 9:]))
        i += 1 + k
    return poses
