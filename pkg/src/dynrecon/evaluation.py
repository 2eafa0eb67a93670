"""Rendering held-out views, scoring them, and the named ablation configurations."""

from __future__ import annotations

import logging
import subprocess
from pathlib import Path

import numpy as np

from . import __version__
from .fields import FieldParameters
from .fileio import Dataset, MissingInputError, read_pfm, read_png, write_pfm, write_png
from .metrics import MetricsReport, ViewMetrics, config_hash
from .trainer import TrainConfig, render_view

__all__ = [
    "ABLATION_GRIDS",
    "ablation_configs",
    "revision",
    "select_frames",
    "render_views",
    "evaluate_model",
    "evaluate_renders",
    "write_rendered",
]

log = logging.getLogger(__name__)

_NO_CUES = dict(lambda_depth=0.0, lambda_normal=0.0, lambda_surface=0.0, perturb_enabled=False)

# Rows of the geometric-cue / physical-prior ablation. The defaults of
# TrainConfig supply lambda values for the rows that switch a term on.
ABLATION_ROWS = {
    "baseline": dict(_NO_CUES),
    "+depth": dict(_NO_CUES, lambda_depth=1.0),
    "+normal": dict(_NO_CUES, lambda_normal=0.01),
    "+depth+normal": dict(_NO_CUES, lambda_depth=1.0, lambda_normal=0.01),
    "+vnoise": dict(_NO_CUES, perturb_enabled=True),
    "+dmax": dict(_NO_CUES, lambda_surface=0.01),
    "+all": dict(lambda_depth=1.0, lambda_normal=0.01, lambda_surface=0.01, perturb_enabled=True),
}

ABLATION_GRIDS = {
    "default": list(ABLATION_ROWS),
    "geometry": ["baseline", "+depth+normal"],
    "smoke": ["baseline", "+all"],
}


def ablation_configs(base: TrainConfig, grid: str = "default") -> list[tuple[str, TrainConfig]]:
    if grid not in ABLATION_GRIDS:
        raise KeyError(f"unknown grid {grid!r}; choose from {sorted(ABLATION_GRIDS)}")
    return [(name, base.replace(**ABLATION_ROWS[name])) for name in ABLATION_GRIDS[grid]]


def revision() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def select_frames(dataset: Dataset, stride: int = 1) -> list[int]:
    frames = sorted(p.frame for p in dataset.poses)
    return frames[:: max(stride, 1)]


def render_views(
    params: FieldParameters, dataset: Dataset, config: TrainConfig, camera="test", frames=None, with_normals=False
):
    """Yield ``(record, RenderedView)`` for every requested (frame, camera) pair."""
    cams = dataset.camera_indices(str(camera))
    frames = select_frames(dataset) if frames is None else list(frames)
    poses = {p.frame: p for p in dataset.poses}
    rng = np.random.default_rng(config.seed + 3)
    by_key = {(r.frame, r.camera_index): r for r in dataset.records}
    for f in frames:
        for c in cams:
            rec = by_key[(f, c)]
            cam = dataset.cameras[c]
            yield rec, render_view(params, dataset.skeleton, poses[f], cam, config, with_normals=with_normals, rng=rng)


def _report(views: list[ViewMetrics], config: TrainConfig, **meta) -> MetricsReport:
    return MetricsReport(views, config_hash(config.to_text()), config.seed, revision(), meta)


def evaluate_model(
    params: FieldParameters, dataset: Dataset, config: TrainConfig, camera="test", frames=None
) -> MetricsReport:
    """Score renders of a trained field against the clean ground truth."""
    views = []
    for rec, out in render_views(params, dataset, config, camera, frames):
        gt = rec.rgb if rec.rgb_clean is None else rec.rgb_clean
        views.append(ViewMetrics.compute(rec.frame, rec.camera_index, out.rgb, gt, out.depth, rec.depth, rec.mask))
    return _report(views, config, source="model", camera=camera)


def write_rendered(out_dir, rec, out) -> None:
    out_dir = Path(out_dir)
    stem = f"{rec.frame:04d}_cam{rec.camera_index}"
    for sub in ("frames", "depth"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    write_png(out_dir / "frames" / f"{stem}.png", np.clip(out.rgb, 0.0, 1.0))
    write_pfm(out_dir / "depth" / f"{stem}.pfm", out.depth)
    if out.normal is not None:
        (out_dir / "normal").mkdir(exist_ok=True)
        write_pfm(out_dir / "normal" / f"{stem}.pfm", np.nan_to_num(out.normal))


def evaluate_renders(render_dir, dataset: Dataset, config: TrainConfig, camera="test", frames=None) -> MetricsReport:
    """Score a directory of renders laid out like a dataset (``frames/`` and ``depth/``)."""
    render_dir = Path(render_dir)
    cams = dataset.camera_indices(str(camera))
    frames = select_frames(dataset) if frames is None else list(frames)
    by_key = {(r.frame, r.camera_index): r for r in dataset.records}
    views = []
    for f in frames:
        for c in cams:
            rec = by_key[(f, c)]
            stem = f"{f:04d}_cam{c}"
            png = render_dir / "frames" / f"{stem}.png"
            pfm = render_dir / "depth" / f"{stem}.pfm"
            for path in (png, pfm):
                if not path.exists():
                    raise MissingInputError(f"missing file: {path}")
            gt = rec.rgb if rec.rgb_clean is None else rec.rgb_clean
            # compare at the 8-bit precision the renders were stored with
            gt = np.round(np.clip(gt, 0.0, 1.0) * 255.0) / 255.0
            views.append(
                ViewMetrics.compute(f, c, read_png(png), gt, read_pfm(pfm).astype(np.float64), rec.depth, rec.mask)
            )
    return _report(views, config, source="renders", camera=camera)
