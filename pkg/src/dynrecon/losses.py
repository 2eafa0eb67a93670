"""Training objectives and the view-direction perturbation policy."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LossWeights",
    "ViewPerturbation",
    "NonFiniteLoss",
    "photometric_loss",
    "depth_loss",
    "normal_loss",
    "surface_loss",
    "surface_opacity",
    "perturb_direction",
    "total_loss",
    "COMPONENTS",
]

log = logging.getLogger(__name__)

COMPONENTS = ("photo", "weight", "depth", "normal", "surface")


class NonFiniteLoss(ArithmeticError):
    def __init__(self, component: str):
        self.component = component
        super().__init__(f"loss component {component!r} is not finite")


@dataclass
class LossWeights:
    depth: float = 1.0
    normal: float = 0.01
    surface: float = 0.01

    def __post_init__(self):
        if min(self.depth, self.normal, self.surface) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class ViewPerturbation:
    """Gaussian noise on the color branch's view-direction input.

    ``before_encoding`` perturbs and renormalizes the raw direction;
    ``after_encoding`` adds noise to its Fourier features.
    """

    enabled: bool = False
    placement: str = "after_encoding"
    mu: float = 0.2
    sigma_noise: float = 0.5
    active_at_test: bool = False

    def __post_init__(self):
        if self.placement not in ("before_encoding", "after_encoding"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be non-negative")

    def active(self, training: bool) -> bool:
        return self.enabled and (training or self.active_at_test)


def photometric_loss(pred, target) -> Tensor:
    """Sum over rays of the Euclidean color error."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"photometric_loss: shapes {pred.shape} and {target.shape}")
    diff = ad.sub(pred, target)
    return ad.sum_(ad.l2_norm(diff, axis=-1))


def depth_loss(pred, target, eps: float = 1e-6) -> Tensor | None:
    """Sum of |D_hat/mean(D_hat) - D/mean(D)| over rays.

    Returns None when either batch mean is below ``eps`` (nothing to compare).
    """
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"depth_loss: shapes {pred.shape} and {target.shape}")
    if pred.size == 0:
        return None
    pm = float(np.mean(pred.data))
    tm = float(np.mean(target))
    if pm <= eps or tm <= eps:
        return None
    rel_pred = ad.div(pred, ad.mean(pred))
    diff = ad.sub(rel_pred, (target / tm).astype(pred.data.dtype))
    # per-ray scalar: the 2-norm is the absolute value
    return ad.sum_(ad.abs_(diff))


def normal_loss(pred, target, tol: float = 1e-4) -> Tensor:
    """Mean of ``1 - cos`` between unit normals."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    for name, arr in (("pred", pred.data), ("target", target)):
        if np.any(np.abs(np.linalg.norm(arr, axis=-1) - 1.0) > tol):
            raise ValueError(f"normal_loss: {name} normals must be unit length")
    cos = ad.sum_(ad.mul(pred, target.astype(pred.data.dtype)), axis=-1)
    return ad.mean(ad.sub(1.0, cos))


def surface_opacity(sigma, spacing: float) -> Tensor:
    """Opacity ``1 - exp(-sigma * spacing)`` of a surface sample."""
    return ad.sub(1.0, ad.exp(ad.scale(sigma, -float(spacing))))


def surface_loss(occupancy) -> Tensor:
    """Mean of ``(1 - occupancy)^2``."""
    return ad.mean(ad.square(ad.sub(1.0, occupancy)))


def perturb_direction(x, policy: ViewPerturbation, rng: np.random.Generator, training: bool = True):
    """Apply ``policy`` to a batch of raw directions or encoded directions.

    The caller passes raw unit directions for ``before_encoding`` and their
    encoding for ``after_encoding``.
    """
    if not policy.active(training):
        return x
    arr = np.asarray(x)
    noise = rng.normal(policy.mu, policy.sigma_noise, size=arr.shape).astype(arr.dtype)
    if policy.placement == "before_encoding":
        moved = arr + noise
        return moved / np.linalg.norm(moved, axis=-1, keepdims=True)
    return arr + noise


def total_loss(components: dict, w: LossWeights) -> Tensor:
    """``photo + weight + l_depth*depth + l_normal*normal + l_surface*surface``.

    Missing components count as zero.
    """
    scale = {"photo": 1.0, "weight": 1.0, "depth": w.depth, "normal": w.normal, "surface": w.surface}
    total = None
    for name in COMPONENTS:
        value = components.get(name)
        if value is None:
            continue
        value = ad.as_tensor(value)
        if not np.all(np.isfinite(value.data)):
            raise NonFiniteLoss(name)
        term = ad.scale(value, scale[name])
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(0.0)
