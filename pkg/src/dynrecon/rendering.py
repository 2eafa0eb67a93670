"""Rays, stratified sampling and differentiable volume compositing."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .deformation import apply_inverse_affine

__all__ = [
    "Camera",
    "Ray",
    "RayBatch",
    "RaySamples",
    "RenderOutput",
    "generate_rays",
    "sample_stratified",
    "sample_deltas",
    "composite_weights",
    "composite_color",
    "composite_depth",
    "accumulated_opacity",
    "density_normal",
    "fd_density_normal",
    "surface_point",
    "PosedDensity",
    "render_rays",
]

log = logging.getLogger(__name__)


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``position`` map camera to world coordinates.

    Camera axes follow the x-right, y-down, z-forward convention.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-5 or abs(np.linalg.det(R) - 1) > 1e-5:
            raise ValueError("camera rotation must be orthonormal with det +1")

    @classmethod
    def look_at(cls, position, target, up, focal: float, width: int, height: int) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - position
        z /= np.linalg.norm(z)
        x = np.cross(-np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z], axis=1)
        return cls(focal, focal, width / 2.0, height / 2.0, width, height, R, position)

    def pixel_grid(self) -> np.ndarray:
        """All pixels as (u, v) integer pairs, row-major over v."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel(), v.ravel()], axis=1)

    def directions(self, pixels) -> np.ndarray:
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        d_cam = np.stack(
            [
                (px[:, 0] + 0.5 - self.cx) / self.fx,
                (px[:, 1] + 0.5 - self.cy) / self.fy,
                np.ones(len(px)),
            ],
            axis=1,
        )
        d = d_cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def project(self, x) -> np.ndarray:
        """World points to continuous pixel coordinates and camera-space z."""
        xc = (np.asarray(x, dtype=np.float64) - self.position) @ self.rotation
        u = self.fx * xc[..., 0] / xc[..., 2] + self.cx - 0.5
        v = self.fy * xc[..., 1] / xc[..., 2] + self.cy - 0.5
        return np.stack([u, v, xc[..., 2]], axis=-1)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple[int, int] = (0, 0)
    frame: int = 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    def at(self, tau) -> np.ndarray:
        return self.origin + np.asarray(tau)[..., None] * self.direction


@dataclass
class RayBatch:
    """Structure-of-arrays ray bundle."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    pixels: np.ndarray
    frames: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i) -> Ray:
        if isinstance(i, (int, np.integer)):
            return Ray(
                self.origins[i],
                self.directions[i],
                float(self.near[i]),
                float(self.far[i]),
                tuple(int(v) for v in self.pixels[i]),
                int(self.frames[i]),
            )
        return self.subset(i)

    def subset(self, index) -> "RayBatch":
        return RayBatch(
            self.origins[index],
            self.directions[index],
            self.near[index],
            self.far[index],
            self.pixels[index],
            self.frames[index],
        )

    @classmethod
    def from_rays(cls, rays: list[Ray]) -> "RayBatch":
        return cls(
            np.array([r.origin for r in rays]),
            np.array([r.direction for r in rays]),
            np.array([r.near for r in rays]),
            np.array([r.far for r in rays]),
            np.array([r.pixel for r in rays], dtype=np.int64),
            np.array([r.frame for r in rays], dtype=np.int64),
        )


def generate_rays(cam: Camera, pixels, frame: int, near: float, far: float) -> RayBatch:
    """Rays from the camera center through each pixel center."""
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    oob = (px[:, 0] < 0) | (px[:, 0] >= cam.width) | (px[:, 1] < 0) | (px[:, 1] >= cam.height)
    if np.any(oob):
        raise ValueError(f"pixel {tuple(px[np.argmax(oob)])} outside {cam.width}x{cam.height}")
    if not 0 < near < far:
        raise ValueError("need 0 < near < far")
    n = len(px)
    return RayBatch(
        np.broadcast_to(cam.position, (n, 3)).copy(),
        cam.directions(px),
        np.full(n, float(near)),
        np.full(n, float(far)),
        px,
        np.full(n, int(frame), dtype=np.int64),
    )


def sample_stratified(near, far, num_samples: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """One draw per equal-width bin of [near, far]; bin midpoints when ``rng`` is None."""
    if num_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    near = np.asarray(near, dtype=np.float64)[..., None]
    far = np.asarray(far, dtype=np.float64)[..., None]
    if rng is None:
        u = np.full(near.shape[:-1] + (num_samples,), 0.5)
    else:
        u = rng.uniform(size=near.shape[:-1] + (num_samples,))
    j = np.arange(num_samples)
    return near + (j + u) * (far - near) / num_samples


def sample_deltas(tau, far) -> np.ndarray:
    """Spacings ``tau[j+1] - tau[j]``; the last one runs to ``far``."""
    tau = np.asarray(tau, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)[..., None]
    return np.concatenate([np.diff(tau, axis=-1), far - tau[..., -1:]], axis=-1)


@dataclass
class RaySamples:
    tau: np.ndarray
    sigma: object
    color: object
    deltas: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau)
        if tau.shape[-1] > 1 and np.any(np.diff(tau, axis=-1) <= 0):
            raise ValueError("sample depths must be strictly increasing")
        if np.any(np.asarray(ad.as_tensor(self.sigma).data) < 0):
            raise ValueError("densities must be non-negative")


def composite_weights(sigma, deltas) -> Tensor:
    """Per-sample weights ``Gamma_j (1 - exp(-sigma_j delta_j))``."""
    sd = ad.mul(sigma, np.asarray(deltas, dtype=np.float64))
    before = ad.sub(ad.cumsum(sd, axis=-1), sd)
    return ad.mul(ad.exp(ad.neg(before)), ad.sub(1.0, ad.exp(ad.neg(sd))))


def _same_kind(out: Tensor, *inputs):
    return out if any(isinstance(x, Tensor) for x in inputs) else out.data


def composite_color(s: RaySamples):
    w = composite_weights(s.sigma, s.deltas)
    c = ad.as_tensor(s.color)
    out = ad.sum_(ad.mul(ad.reshape(w, w.shape + (1,)), c), axis=-2)
    return _same_kind(out, s.sigma, s.color)


def composite_depth(s: RaySamples):
    w = composite_weights(s.sigma, s.deltas)
    out = ad.sum_(ad.mul(w, np.asarray(s.tau, dtype=np.float64)), axis=-1)
    return _same_kind(out, s.sigma)


def accumulated_opacity(s: RaySamples):
    out = ad.sum_(composite_weights(s.sigma, s.deltas), axis=-1)
    return _same_kind(out, s.sigma)


DensityFn = Callable[..., Tensor]


def density_normal(density_fn: DensityFn, x, eps_grad: float = 1e-8) -> np.ndarray:
    """``-grad sigma / |grad sigma|`` by a spatial autodiff pass.

    Rows where the gradient norm is below ``eps_grad`` are NaN (no normal).
    """
    x = np.asarray(x, dtype=np.float64)
    tape = ad.Tape()
    xt = tape.watch(x)
    sigma = density_fn(xt)
    g = ad.backward(ad.sum_(sigma))[xt.node]
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = -g / n
    out[(n[..., 0] <= eps_grad)] = np.nan
    return out


_FD_OFFSETS = np.concatenate([np.eye(3), -np.eye(3)])


def fd_density_normal(
    density_fn: DensityFn, x: Tensor, step: float = 1e-3, eps_grad: float = 1e-8
) -> tuple[Tensor, np.ndarray]:
    """Density-gradient normal from central differences recorded on the tape.

    Six shifted density evaluations per point stay first-order differentiable,
    so parameters of ``density_fn`` receive gradients through the normal.
    Skinning weights are anchored at the unshifted point. Returns the normal
    tensor (N, 3) and a validity mask.
    """
    x = ad.as_tensor(x)
    n = x.shape[0]
    shifted = ad.add(ad.reshape(x, (1, n, 3)), (step * _FD_OFFSETS)[:, None, :])
    anchor = np.broadcast_to(x.data, (6, n, 3))
    sig = density_fn(ad.reshape(shifted, (6 * n, 3)), anchor=anchor.reshape(-1, 3))
    sig = ad.reshape(sig, (2, 3, n))
    grad = ad.scale(ad.sub(sig[0], sig[1]), 1.0 / (2 * step))
    grad = ad.reshape(grad, (3, n))
    grad_t = ad.concat([ad.reshape(grad[k], (n, 1)) for k in range(3)], axis=-1)
    valid = np.linalg.norm(grad_t.data, axis=-1) > eps_grad
    normal = ad.neg(ad.normalize(grad_t, axis=-1, eps=1e-20))
    return normal, valid


def surface_point(origins, directions, depth, near, far):
    """``o + D d`` with the depth clamped into [near, far].

    Returns ``(points, n_clamped)``; points are a Tensor when ``depth`` is.
    """
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    dval = ad.as_tensor(depth).data
    n_clamped = int(np.sum((dval < near) | (dval > far)))
    if n_clamped:
        log.debug("surface_point: clamped %d depths into [near, far]", n_clamped)
    clamped = ad.clip(depth, near, far)
    offset = ad.mul(ad.reshape(clamped, clamped.shape + (1,)), np.asarray(directions))
    pts = ad.add(np.asarray(origins, dtype=np.float64), offset)
    return (pts if isinstance(depth, Tensor) else pts.data), n_clamped


class PosedDensity:
    """Density at posed-space points: deform each point by its frame, then query the network.

    ``deformation`` is a single :class:`FrameDeformation` or a mapping from
    frame index to one; with a mapping, ``frames`` gives each point's frame
    and is tiled when the query stacks several copies of the point set.
    """

    def __init__(self, net, params: dict[str, Tensor], deformation, frames=None):
        self.net = net
        self.params = params
        self.deformation = deformation
        self.frames = None if frames is None else np.asarray(frames, dtype=np.int64)

    def inverse_affine(self, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.frames is None:
            return self.deformation.inverse_affine(ref)
        n = len(ref)
        if n % len(self.frames):
            raise ad.ShapeError(f"PosedDensity: {n} points for {len(self.frames)} frame labels")
        frames = np.tile(self.frames, n // len(self.frames))
        Minv = np.empty((n, 3, 3))
        t = np.empty((n, 3))
        for f in np.unique(frames):
            sel = frames == f
            Minv[sel], t[sel] = self.deformation[int(f)].inverse_affine(ref[sel])
        return Minv, t

    def __call__(self, x_posed: Tensor, anchor=None) -> Tensor:
        x_posed = ad.as_tensor(x_posed)
        ref = np.asarray(x_posed.data if anchor is None else anchor, dtype=np.float64)
        Minv, t = self.inverse_affine(ref)
        dtype = _compute_dtype(self.params)
        xc = apply_inverse_affine(x_posed, Minv.astype(dtype), t.astype(dtype))
        sigma, _ = self.net.density(self.params, xc)
        return sigma


def _compute_dtype(params: dict[str, Tensor]):
    first = next(iter(params.values()))
    return ad.as_tensor(first).data.dtype


@dataclass
class RenderOutput:
    rgb: Tensor
    depth: Tensor
    acc: Tensor
    tau: np.ndarray
    deltas: np.ndarray


def render_rays(
    net,
    params: dict[str, Tensor],
    rays: RayBatch,
    deformations: dict,
    num_samples: int,
    rng: np.random.Generator | None,
    view_input=None,
    background=(0.0, 0.0, 0.0),
    appearance_frames=None,
) -> RenderOutput:
    """Render color, expected depth and opacity for a ray batch.

    ``view_input`` is the encoded (and possibly perturbed) view direction per
    ray; it defaults to the plain encoding of the ray directions.
    ``deformations`` maps frame index to a :class:`FrameDeformation`.
    ``background`` is one color or one color per ray.
    """
    dtype = _compute_dtype(params)
    tau = sample_stratified(rays.near, rays.far, num_samples, rng)
    deltas = sample_deltas(tau, rays.far)
    pts = rays.origins[:, None, :] + tau[..., None] * rays.directions[:, None, :]
    xc = np.empty_like(pts)
    for f in np.unique(rays.frames):
        sel = rays.frames == f
        xc[sel] = deformations[int(f)].to_canonical(pts[sel])
    sigma, feat = net.density(params, xc.astype(dtype))
    if view_input is None:
        view_input = net.encode_direction(rays.directions.astype(dtype))
    tau, deltas = tau.astype(dtype), deltas.astype(dtype)
    frames = rays.frames if appearance_frames is None else appearance_frames
    color = net.color(params, feat, view_input, frames)
    w = composite_weights(sigma, deltas)
    acc = ad.sum_(w, axis=-1)
    rgb = ad.sum_(ad.mul(ad.reshape(w, w.shape + (1,)), color), axis=-2)
    bg = np.asarray(background, dtype=dtype)
    rgb = ad.add(rgb, ad.mul(ad.reshape(ad.sub(1.0, acc), acc.shape + (1,)), bg))
    depth = ad.sum_(ad.mul(w, tau), axis=-1)
    return RenderOutput(rgb, depth, acc, tau, deltas)
