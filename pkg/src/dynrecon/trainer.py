"""Two-stage optimization: the full field on training poses, then blend codes for novel poses.

Each stage-1 step draws a ray batch (mostly foreground pixels, the rest from
a band around the silhouette), renders it through the posed-to-canonical
deformation, assembles the weighted loss and applies one Adam update.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .deformation import FrameDeformation, JointTransformSet, weight_consistency_loss
from .fields import (
    CanonicalFieldNetwork,
    FieldConfig,
    FieldParameters,
    init_parameters,
    save_checkpoint,
)
from .fileio import Dataset
from .losses import (
    COMPONENTS,
    LossWeights,
    NonFiniteLoss,
    ViewPerturbation,
    depth_loss,
    normal_loss,
    perturb_direction,
    photometric_loss,
    surface_loss,
    surface_opacity,
    total_loss,
)
from .oracle import ray_box_bounds
from .rendering import (
    PosedDensity,
    RayBatch,
    density_normal,
    fd_density_normal,
    render_rays,
    surface_point,
)

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "DivergenceError",
    "Trainer",
    "StepRecord",
    "train_stage1",
    "train_stage2_novel_pose",
    "NovelPoseResult",
    "render_view",
    "RenderedView",
]

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Total loss exceeded its early reference by the configured factor."""

    def __init__(self, step: int, value: float, reference: float):
        self.step, self.value, self.reference = step, value, reference
        super().__init__(f"loss diverged at step {step}: {value:.4g} > reference {reference:.4g}")


# -- configuration ----------------------------------------------------------------


@dataclass
class TrainConfig:
    """Every knob of a training run; round-trips through a ``key=value`` file."""

    learning_rate: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 1.0
    batch_rays: int = 1024
    samples_per_ray: int = 64
    steps_stage1: int = 5000
    steps_stage2: int = 1000
    lr_stage2: float = 5e-4
    seed: int = 0
    foreground_fraction: float = 0.8
    band_pixels: int = 3
    box_samples: int = 1024
    box_inflate: float = 0.1
    lambda_depth: float = 1.0
    lambda_normal: float = 0.01
    lambda_surface: float = 0.01
    surface_mode: str = "opacity"
    normal_step: float = 1e-3
    min_opacity: float = 0.1
    perturb_enabled: bool = True
    perturb_placement: str = "after_encoding"
    perturb_mu: float = 0.2
    perturb_sigma: float = 0.5
    perturb_at_test: bool = False
    ray_direction_noise: float = 0.0
    ray_origin_noise: float = 0.0
    divergence_factor: float = 10.0
    divergence_reference_step: int = 100
    checkpoint_every: int = 0
    log_every: int = 100
    background: tuple = (0.0, 0.0, 0.0)
    random_background: bool = True
    compute_dtype: str = "float32"
    chunk_rays: int = 1024
    pos_freqs: int = 6
    dir_freqs: int = 4
    density_depth: int = 8
    density_width: int = 256
    skip_layer: int = 4
    color_depth: int = 1
    color_width: int = 128
    weight_depth: int = 4
    weight_width: int = 64
    code_dim: int = 128

    def __post_init__(self):
        self.background = tuple(float(v) for v in self.background)
        if self.surface_mode not in ("opacity", "density"):
            raise ValueError(f"surface_mode must be 'opacity' or 'density', got {self.surface_mode!r}")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")
        if self.batch_rays < 1 or self.samples_per_ray < 2:
            raise ValueError("need batch_rays >= 1 and samples_per_ray >= 2")
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise ValueError("foreground_fraction must lie in [0, 1]")
        self.loss_weights()
        self.perturbation()

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Scaled-down network for single-core CPU runs.

        The smaller network and batch train well at a tenfold learning rate;
        at the full-scale rate a 5000-step run is still far from converged.
        """
        base = dict(
            density_depth=4, density_width=64, skip_layer=2, color_width=64, batch_rays=128, learning_rate=5e-4
        )
        base.update(overrides)
        return cls(**base)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_depth, self.lambda_normal, self.lambda_surface)

    def perturbation(self) -> ViewPerturbation:
        return ViewPerturbation(
            self.perturb_enabled,
            self.perturb_placement,
            self.perturb_mu,
            self.perturb_sigma,
            self.perturb_at_test,
        )

    def field_config(self, num_frames: int, num_joints: int) -> FieldConfig:
        return FieldConfig(
            pos_freqs=self.pos_freqs,
            dir_freqs=self.dir_freqs,
            density_depth=self.density_depth,
            density_width=self.density_width,
            skip_layer=self.skip_layer,
            color_depth=self.color_depth,
            color_width=self.color_width,
            weight_depth=self.weight_depth,
            weight_width=self.weight_width,
            code_dim=self.code_dim,
            num_frames=num_frames,
            num_joints=num_joints,
        )

    @property
    def dtype(self):
        return np.dtype(self.compute_dtype)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # -- text form --

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse ``key=value`` lines; ``#`` starts a comment, unknown keys are errors."""
        base = base or cls()
        kinds = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        changes = {}
        for num, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {num}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"config line {num}: unknown key {key!r}")
            changes[key] = _parse_value(kinds[key], value, key)
        return dataclasses.replace(base, **changes)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), base)


def _parse_value(kind, value: str, key: str):
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        if kind is tuple:
            return tuple(float(v) for v in value.split(","))
        return kind(value)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from None


# -- optimizer -------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> bool:
    """Update ``params`` in place. Returns False (and changes nothing) on a non-finite gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient in %s; step skipped", name)
            return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        g = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p = params[name]
        p -= update.astype(p.dtype)
    return True


def _state_arrays(state: AdamState) -> dict[str, np.ndarray]:
    out = {"adam.step": np.array([state.step], dtype=np.float32)}
    for name in state.m:
        out[f"adam.m.{name}"] = state.m[name].astype(np.float32)
        out[f"adam.v.{name}"] = state.v[name].astype(np.float32)
    return out


# -- ray pools ----------------------------------------------------------------------------


@dataclass
class _RayPool:
    """Flat pixel index tables over all training records."""

    record: np.ndarray
    pixel: np.ndarray

    def draw(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if n == 0 or len(self.record) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        idx = rng.integers(0, len(self.record), size=n)
        return self.record[idx], self.pixel[idx]


@dataclass
class StepRecord:
    step: int
    losses: dict[str, float]
    total: float
    psnr: float
    applied: bool
    seconds: float

    def csv(self) -> str:
        vals = [f"{self.losses.get(c, 0.0):.8g}" for c in COMPONENTS]
        return f"{self.step}," + ",".join(vals) + f",{self.total:.8g}"


TRACE_HEADER = "step," + ",".join(COMPONENTS) + ",total"


class Trainer:
    """Stage-1 optimizer state over a dataset's training cameras."""

    def __init__(self, dataset: Dataset, config: TrainConfig, params: FieldParameters | None = None):
        self.dataset = dataset
        self.config = config
        cams = dataset.camera_indices("train")
        self.records = dataset.select(cams)
        if not self.records:
            raise ValueError("dataset has no training records")
        frames = sorted({r.frame for r in self.records})
        num_frames = max(p.frame for p in dataset.poses) + 1
        fcfg = config.field_config(num_frames, dataset.skeleton.num_joints)
        if params is None:
            params = init_parameters(fcfg, config.seed)
        params.arrays = {k: v.astype(config.dtype) for k, v in params.arrays.items()}
        self.params = params
        self.net = CanonicalFieldNetwork(params)
        self.frames = np.array(frames)
        self.poses = {p.frame: p for p in dataset.poses}
        self.deformations = {
            f: FrameDeformation(self.poses[f], dataset.skeleton.posed_segments(self.poses[f])) for f in frames
        }
        self.boxes = {f: dataset.skeleton.bounding_box(self.poses[f], config.box_inflate) for f in frames}
        self.rng = np.random.default_rng(config.seed + 1)
        self.adam = AdamState(config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.step_index = 0
        self.reference_loss: float | None = None
        self._build_pools()

    def _build_pools(self) -> None:
        self.rgb = np.stack([r.rgb.reshape(-1, 3) for r in self.records]).astype(np.float64)
        self.depth = np.stack([r.depth.reshape(-1) for r in self.records]).astype(np.float64)
        self.normal = np.stack([r.normal.reshape(-1, 3) for r in self.records]).astype(np.float64)
        self.mask = np.stack([r.mask.reshape(-1) for r in self.records])
        self.dirs = {}
        for r in self.records:
            if r.camera_index not in self.dirs:
                self.dirs[r.camera_index] = r.camera.directions(r.camera.pixel_grid())
        fg_rec, fg_pix, band_rec, band_pix = [], [], [], []
        for i, r in enumerate(self.records):
            m = r.mask.astype(bool)
            band = ndimage.binary_dilation(m, iterations=self.config.band_pixels) & ~m
            for sel, rec, pix in ((m, fg_rec, fg_pix), (band, band_rec, band_pix)):
                flat = np.flatnonzero(sel.reshape(-1))
                rec.append(np.full(len(flat), i))
                pix.append(flat)
        self.fg_pool = _RayPool(np.concatenate(fg_rec), np.concatenate(fg_pix))
        self.band_pool = _RayPool(np.concatenate(band_rec), np.concatenate(band_pix))
        if len(self.fg_pool.record) == 0:
            raise ValueError("training masks are empty; nothing to reconstruct")

    # -- one step --

    def _draw_batch(self):
        cfg = self.config
        n_fg = int(round(cfg.foreground_fraction * cfg.batch_rays))
        if len(self.band_pool.record) == 0:
            n_fg = cfg.batch_rays
        rec_a, pix_a = self.fg_pool.draw(n_fg, self.rng)
        rec_b, pix_b = self.band_pool.draw(cfg.batch_rays - n_fg, self.rng)
        return np.concatenate([rec_a, rec_b]), np.concatenate([pix_a, pix_b])

    def _make_rays(self, rec: np.ndarray, pix: np.ndarray):
        cfg = self.config
        cam_idx = np.array([self.records[i].camera_index for i in rec])
        frames = np.array([self.records[i].frame for i in rec], dtype=np.int64)
        origins = np.stack([self.records[i].camera.position for i in rec]) if len(rec) else np.zeros((0, 3))
        dirs = np.empty((len(rec), 3))
        for c in np.unique(cam_idx):
            sel = cam_idx == c
            dirs[sel] = self.dirs[int(c)][pix[sel]]
        if cfg.ray_direction_noise > 0:
            dirs = dirs + self.rng.normal(0.0, cfg.ray_direction_noise, size=dirs.shape)
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        if cfg.ray_origin_noise > 0:
            origins = origins + self.rng.normal(0.0, cfg.ray_origin_noise, size=origins.shape)
        near = np.empty(len(rec))
        far = np.empty(len(rec))
        hit = np.empty(len(rec), dtype=bool)
        for f in np.unique(frames):
            sel = frames == f
            lo, hi = self.boxes[int(f)]
            near[sel], far[sel], hit[sel] = ray_box_bounds(origins[sel], dirs[sel], lo, hi)
        px = np.stack([pix % self.records[0].camera.width, pix // self.records[0].camera.width], axis=1)
        return RayBatch(origins, dirs, near, far, px, frames), hit

    def _view_input(self, dirs: np.ndarray, training: bool = True):
        policy = self.config.perturbation()
        d = dirs.astype(self.config.dtype)
        if policy.placement == "before_encoding":
            d = perturb_direction(d, policy, self.rng, training)
            return self.net.encode_direction(d)
        return perturb_direction(self.net.encode_direction(d), policy, self.rng, training)

    def _box_samples(self, p, frames_pool: np.ndarray, deformations: dict, boxes: dict, codes=None, code_rows=None,
                     rng=None, n=None):
        """Posed-vs-canonical blend-weight mismatch at uniform samples inside the posed boxes."""
        rng = self.rng if rng is None else rng
        n = self.config.box_samples if n is None else n
        fr = frames_pool[rng.integers(0, len(frames_pool), size=n)]
        x = np.empty((n, 3))
        xc = np.empty((n, 3))
        w_posed = np.empty((n, self.net.config.num_joints))
        for f in np.unique(fr):
            sel = fr == f
            lo, hi = boxes[int(f)]
            x[sel] = rng.uniform(lo, hi, size=(int(sel.sum()), 3))
            w_posed[sel] = deformations[int(f)].weights(x[sel])
            xc[sel] = deformations[int(f)].to_canonical(x[sel])
        rows = fr if code_rows is None else code_rows[fr]
        w_can = self.net.canonical_weights(p, xc.astype(self.config.dtype), rows, codes=codes)
        return weight_consistency_loss(w_posed.astype(self.config.dtype), w_can)

    def loss_components(self, p, rec: np.ndarray, pix: np.ndarray):
        """All loss terms for a batch, as tensors on the tape of ``p``."""
        cfg = self.config
        rays, hit = self._make_rays(rec, pix)
        comps: dict[str, ad.Tensor] = {}
        idx = np.flatnonzero(hit)
        if len(idx) == 0:
            comps["weight"] = self._box_samples(p, self.frames, self.deformations, self.boxes)
            return comps, None
        rays = rays.subset(idx)
        rec_h, pix_h = rec[idx], pix[idx]
        view = self._view_input(rays.directions, training=True)
        target = self.rgb[rec_h, pix_h]
        bg = np.asarray(cfg.background)
        if cfg.random_background:
            # Off-mask pixels take a fresh color every step, so stray opacity
            # outside the silhouette can never match its target for free.
            bg = self.rng.uniform(size=(len(idx), 3))
            target = np.where(self.mask[rec_h, pix_h][:, None], target, bg)
        out = render_rays(self.net, p, rays, self.deformations, cfg.samples_per_ray, self.rng, view, bg)
        comps["photo"] = photometric_loss(out.rgb, target)
        comps["weight"] = self._box_samples(p, self.frames, self.deformations, self.boxes)

        fg = self.mask[rec_h, pix_h] & (out.acc.data >= cfg.min_opacity)
        fg_idx = np.flatnonzero(fg)
        if len(fg_idx):
            d_hat = ad.take(out.depth, fg_idx)
            if cfg.lambda_depth > 0:
                dl = depth_loss(d_hat, self.depth[rec_h[fg_idx], pix_h[fg_idx]])
                if dl is not None:
                    comps["depth"] = dl
            if cfg.lambda_normal > 0 or cfg.lambda_surface > 0:
                sub = rays.subset(fg_idx)
                pts, _ = surface_point(
                    sub.origins.astype(cfg.dtype),
                    sub.directions.astype(cfg.dtype),
                    d_hat,
                    sub.near.astype(cfg.dtype),
                    sub.far.astype(cfg.dtype),
                )
                dens = PosedDensity(self.net, p, self.deformations, sub.frames)
                if cfg.lambda_normal > 0:
                    n_hat, valid = fd_density_normal(dens, pts, cfg.normal_step)
                    if valid.any():
                        vi = np.flatnonzero(valid)
                        gt_n = self.normal[rec_h[fg_idx][vi], pix_h[fg_idx][vi]]
                        gt_n = gt_n / np.linalg.norm(gt_n, axis=1, keepdims=True)
                        comps["normal"] = normal_loss(ad.take(n_hat, vi), gt_n)
                if cfg.lambda_surface > 0:
                    sigma = dens(pts)
                    if cfg.surface_mode == "opacity":
                        spacing = float(np.mean(out.deltas))
                        occ = surface_opacity(sigma, spacing)
                    else:
                        occ = sigma
                    comps["surface"] = surface_loss(occ)
        return comps, (out.rgb.data, target)

    def step(self) -> StepRecord:
        cfg = self.config
        t0 = time.perf_counter()
        self.step_index += 1
        tape = ad.Tape()
        p = self.net.bind(tape)
        rec, pix = self._draw_batch()
        comps, colors = self.loss_components(p, rec, pix)
        for name, value in comps.items():
            if not np.all(np.isfinite(value.data)):
                raise NonFiniteLoss(name)
        total = total_loss(comps, cfg.loss_weights())
        losses = {k: float(v.data) for k, v in comps.items()}
        applied = False
        if total.tracked:
            g = ad.backward(total)
            grads = {name: g[t.node] for name, t in p.items() if t.tracked}
            lr = cfg.learning_rate * cfg.lr_decay ** (self.step_index / max(cfg.steps_stage1, 1))
            applied = adam_step(self.params.arrays, grads, self.adam, lr)
        psnr = float("nan")
        if colors is not None:
            mse = float(np.mean((colors[0] - colors[1]) ** 2))
            psnr = 10 * np.log10(1.0 / max(mse, 1e-10))
        value = float(total.data)
        if self.step_index == cfg.divergence_reference_step:
            self.reference_loss = value
        elif self.reference_loss is not None and value > cfg.divergence_factor * self.reference_loss:
            raise DivergenceError(self.step_index, value, self.reference_loss)
        return StepRecord(self.step_index, losses, value, psnr, applied, time.perf_counter() - t0)

    def save(self, path) -> None:
        """Parameters plus optimizer moments in one checkpoint file."""
        save_checkpoint(self.params, path, extra=_state_arrays(self.adam))


def train_stage1(
    dataset: Dataset,
    config: TrainConfig,
    out_dir=None,
    steps: int | None = None,
    callback: Callable[[StepRecord], None] | None = None,
) -> tuple[FieldParameters, list[StepRecord]]:
    """Optimize the full field; writes ``loss_trace.csv`` and checkpoints under ``out_dir``."""
    steps = config.steps_stage1 if steps is None else steps
    tr = Trainer(dataset, config)
    records: list[StepRecord] = []
    trace = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        config.save(out_dir / "config.txt")
        trace = open(out_dir / "loss_trace.csv", "w")
        trace.write(TRACE_HEADER + "\n")
    try:
        for _ in range(steps):
            rec = tr.step()
            records.append(rec)
            if trace is not None:
                trace.write(rec.csv() + "\n")
            if config.log_every and rec.step % config.log_every == 0:
                log.info("step %d total %.4f psnr %.2f (%.2fs)", rec.step, rec.total, rec.psnr, rec.seconds)
            if callback is not None:
                callback(rec)
            if out_dir is not None and config.checkpoint_every and rec.step % config.checkpoint_every == 0:
                tr.save(out_dir / f"checkpoint_{rec.step:06d}.ckpt")
    finally:
        if trace is not None:
            trace.close()
    if out_dir is not None:
        tr.save(out_dir / "checkpoint.ckpt")
    return tr.params, records


# -- stage 2 ------------------------------------------------------------------------------


@dataclass
class NovelPoseResult:
    """Fitted codes, the per-step sampled loss and the loss on a fixed probe set before and after."""

    poses: list[JointTransformSet]
    codes: np.ndarray
    losses: list[float]
    probe_initial: float = float("nan")
    probe_final: float = float("nan")


PROBE_SAMPLES_PER_POSE = 4096


def _novel_trainer(params: FieldParameters, dataset: Dataset, config: TrainConfig) -> Trainer:
    tr = Trainer.__new__(Trainer)
    tr.dataset, tr.config, tr.params = dataset, config, params
    tr.net = CanonicalFieldNetwork(params)
    tr.rng = np.random.default_rng(config.seed + 2)
    return tr


def train_stage2_novel_pose(
    params: FieldParameters,
    dataset: Dataset,
    novel_poses: list[JointTransformSet],
    config: TrainConfig,
    steps: int | None = None,
) -> NovelPoseResult:
    """Fit one blend code per novel pose with the weight-consistency loss only.

    The network and all training-frame codes stay frozen; the new codes start
    from the mean training blend code.
    """
    steps = config.steps_stage2 if steps is None else steps
    if not novel_poses:
        return NovelPoseResult([], np.zeros((0, params["blend_codes"].shape[1]), params["blend_codes"].dtype), [])
    tr = _novel_trainer(params, dataset, config)
    skel = dataset.skeleton
    deformations = {i: FrameDeformation(p, skel.posed_segments(p)) for i, p in enumerate(novel_poses)}
    boxes = {i: skel.bounding_box(p, config.box_inflate) for i, p in enumerate(novel_poses)}
    start = params["blend_codes"].astype(np.float64).mean(axis=0)
    codes = {"codes": np.tile(start, (len(novel_poses), 1)).astype(params["blend_codes"].dtype)}
    state = AdamState(config.adam_beta1, config.adam_beta2, config.adam_eps)
    frozen = tr.net.bind()
    pool = np.arange(len(novel_poses))

    def probe(c):
        # the same points every time, so before/after values are comparable
        rng = np.random.default_rng(config.seed + 4)
        n = PROBE_SAMPLES_PER_POSE * len(novel_poses)
        return float(tr._box_samples(frozen, pool, deformations, boxes, codes=c, rng=rng, n=n).data) / n

    initial = probe(codes["codes"])
    losses = []
    for _ in range(steps):
        tape = ad.Tape()
        c = tape.watch(codes["codes"])
        loss = tr._box_samples(frozen, pool, deformations, boxes, codes=c)
        losses.append(float(loss.data))
        g = ad.backward(loss)[c.node]
        adam_step(codes, {"codes": g}, state, config.lr_stage2)
    return NovelPoseResult(list(novel_poses), codes["codes"], losses, initial, probe(codes["codes"]))


# -- rendering whole views ------------------------------------------------------------------


@dataclass
class RenderedView:
    rgb: np.ndarray
    depth: np.ndarray
    acc: np.ndarray
    normal: np.ndarray | None = None


def render_view(
    params: FieldParameters,
    skeleton,
    pose: JointTransformSet,
    camera,
    config: TrainConfig,
    appearance_frame: int | None = None,
    blend_code: np.ndarray | None = None,
    with_normals: bool = False,
    rng: np.random.Generator | None = None,
) -> RenderedView:
    """Render every pixel of ``camera`` at ``pose``; rays missing the posed box show background.

    Samples sit at bin midpoints, so the output is deterministic unless a
    test-time view perturbation draws from ``rng``. ``blend_code`` is unused
    by rendering (the deformation is analytic) and is accepted so novel-pose
    renders can carry their fitted code alongside.
    """
    del blend_code
    net = CanonicalFieldNetwork(params)
    p = net.bind()
    dtype = next(iter(params.arrays.values())).dtype
    H, W = camera.height, camera.width
    pixels = camera.pixel_grid()
    dirs = camera.directions(pixels)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    lo, hi = skeleton.bounding_box(pose, config.box_inflate)
    near, far, hit = ray_box_bounds(origins, dirs, lo, hi)
    deformation = FrameDeformation(pose, skeleton.posed_segments(pose))
    frame = pose.frame if appearance_frame is None else appearance_frame
    frame = int(np.clip(frame, 0, params["appearance_codes"].shape[0] - 1))
    bg = np.asarray(config.background, dtype=np.float64)
    rgb = np.tile(bg, (H * W, 1))
    depth = np.zeros(H * W)
    acc = np.zeros(H * W)
    normal = np.full((H * W, 3), np.nan) if with_normals else None
    policy = config.perturbation()
    idx = np.flatnonzero(hit)
    for start in range(0, len(idx), config.chunk_rays):
        sel = idx[start : start + config.chunk_rays]
        rays = RayBatch(origins[sel], dirs[sel], near[sel], far[sel], pixels[sel], np.zeros(len(sel), dtype=np.int64))
        view = net.encode_direction(dirs[sel].astype(dtype))
        if policy.active(training=False):
            if rng is None:
                rng = np.random.default_rng(config.seed + 3)
            if policy.placement == "before_encoding":
                view = net.encode_direction(perturb_direction(dirs[sel].astype(dtype), policy, rng, False))
            else:
                view = perturb_direction(view, policy, rng, False)
        out = render_rays(
            net,
            p,
            rays,
            {0: deformation},
            config.samples_per_ray,
            None,
            view,
            config.background,
            appearance_frames=np.full(len(sel), frame),
        )
        rgb[sel] = out.rgb.data
        depth[sel] = out.depth.data
        acc[sel] = out.acc.data
        if with_normals:
            pts, _ = surface_point(origins[sel], dirs[sel], out.depth.data, near[sel], far[sel])
            dens = PosedDensity(net, p, deformation)
            normal[sel] = density_normal(dens, pts)
    return RenderedView(
        rgb.reshape(H, W, 3),
        depth.reshape(H, W),
        acc.reshape(H, W),
        None if normal is None else normal.reshape(H, W, 3),
    )
