"""Image and geometry metrics plus the flat ``key=value`` evaluation report."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "PSNR_CAP",
    "DEPTH_UNDEFINED",
    "mse_psnr",
    "ssim",
    "to_luma",
    "depth_error",
    "ViewMetrics",
    "MetricsReport",
    "config_hash",
]

PSNR_CAP = 99.0
DEPTH_UNDEFINED = float("nan")
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DEPTH_ERROR_DEFINITION = "masked_mean_abs"
REPORT_KEYS = ("frame", "camera", "mse", "psnr", "ssim", "depth_error")


def _check_same(pred, target, name: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return a, b


def mse_psnr(pred, target) -> tuple[float, float]:
    """Mean squared error over all pixels and channels, and PSNR in dB for unit-range images."""
    a, b = _check_same(pred, target, "mse_psnr")
    mse = float(np.mean((a - b) ** 2))
    return mse, psnr_from_mse(mse)


def psnr_from_mse(mse: float) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return -10.0 * math.log10(mse)


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 2:
        return img
    raise ValueError(f"expected an (H, W) or (H, W, 3) image, got shape {img.shape}")


def ssim(pred, target) -> float:
    """Mean structural similarity over fully contained 11x11 Gaussian windows.

    Color inputs are reduced to luma first; the dynamic range is taken as 1.
    """
    a, b = _check_same(pred, target, "ssim")
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim: image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")

    def blur(v):
        # truncate chosen so the kernel spans exactly 11 taps
        return ndimage.gaussian_filter(v, SSIM_SIGMA, truncate=3.5, mode="reflect")

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    r = SSIM_WINDOW // 2
    return float(np.mean((num / den)[r:-r, r:-r]))


def depth_error(pred_depth, gt_depth, mask) -> float:
    """Mean absolute depth difference over mask pixels; NaN when the mask is empty."""
    a, b = _check_same(pred_depth, gt_depth, "depth_error")
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ValueError(f"depth_error: mask shape {m.shape} differs from {a.shape}")
    if not m.any():
        return DEPTH_UNDEFINED
    return float(np.mean(np.abs(a[m] - b[m])))


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class ViewMetrics:
    frame: int
    camera: int
    mse: float
    psnr: float
    ssim: float
    depth_error: float

    @classmethod
    def compute(cls, frame, camera, rgb, rgb_gt, depth, depth_gt, mask) -> "ViewMetrics":
        rgb = np.clip(rgb, 0.0, 1.0)
        mse, psnr = mse_psnr(rgb, rgb_gt)
        return cls(int(frame), int(camera), mse, psnr, ssim(rgb, rgb_gt), depth_error(depth, depth_gt, mask))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{float(v):.6f}"


@dataclass
class MetricsReport:
    """Per-view metrics ordered by (frame, camera) plus an aggregate block.

    The aggregate PSNR is recomputed from the aggregate MSE, so the
    PSNR/MSE relation holds on every line of the report.
    """

    views: list[ViewMetrics]
    config_hash: str = ""
    seed: int = 0
    revision: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.views = sorted(self.views, key=lambda v: (v.frame, v.camera))

    def aggregate(self) -> dict[str, float]:
        if not self.views:
            nan = float("nan")
            return {"views": 0, "mse": nan, "psnr": nan, "mean_view_psnr": nan, "ssim": nan, "depth_error": nan}
        mse = float(np.mean([v.mse for v in self.views]))
        depths = [v.depth_error for v in self.views if not math.isnan(v.depth_error)]
        return {
            "views": len(self.views),
            "mse": mse,
            "psnr": psnr_from_mse(mse),
            "mean_view_psnr": float(np.mean([v.psnr for v in self.views])),
            "ssim": float(np.mean([v.ssim for v in self.views])),
            "depth_error": float(np.mean(depths)) if depths else DEPTH_UNDEFINED,
        }

    def to_record(self) -> str:
        """Machine-readable form: header, one line per view, then the aggregate line."""
        head = {"config_hash": self.config_hash, "seed": self.seed, "revision": self.revision}
        head["depth_error_definition"] = DEPTH_ERROR_DEFINITION
        head.update(self.meta)
        lines = ["[run] " + " ".join(f"{k}={v}" for k, v in head.items())]
        for v in self.views:
            lines.append("[view] " + " ".join(f"{k}={_fmt(getattr(v, k))}" for k in REPORT_KEYS))
        lines.append("[aggregate] " + " ".join(f"{k}={_fmt(v)}" for k, v in self.aggregate().items()))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        """Human-readable table."""
        out = [
            f"depth error: {DEPTH_ERROR_DEFINITION} over ground-truth mask pixels (scene units)",
            f"{'frame':>5} {'cam':>3} {'MSE':>10} {'PSNR':>7} {'SSIM':>7} {'DepErr':>8}",
        ]
        for v in self.views:
            out.append(f"{v.frame:5d} {v.camera:3d} {v.mse:10.6f} {v.psnr:7.2f} {v.ssim:7.4f} {v.depth_error:8.4f}")
        a = self.aggregate()
        out.append(f"{'all':>5} {'':>3} {a['mse']:10.6f} {a['psnr']:7.2f} {a['ssim']:7.4f} {a['depth_error']:8.4f}")
        return "\n".join(out) + "\n"

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.txt").write_text(self.to_record())
        (out_dir / "metrics_table.txt").write_text(self.to_table())

    @classmethod
    def from_record(cls, text: str) -> "MetricsReport":
        views, head = [], {}
        for line in text.splitlines():
            tag, _, rest = line.partition(" ")
            kv = dict(item.split("=", 1) for item in rest.split())
            if tag == "[run]":
                head = kv
            elif tag == "[view]":
                views.append(
                    ViewMetrics(
                        int(kv["frame"]),
                        int(kv["camera"]),
                        float(kv["mse"]),
                        float(kv["psnr"]),
                        float(kv["ssim"]),
                        float(kv["depth_error"]),
                    )
                )
        known = ("config_hash", "seed", "revision", "depth_error_definition")
        return cls(
            views,
            head.get("config_hash", ""),
            int(head.get("seed", 0)),
            head.get("revision", ""),
            {k: v for k, v in head.items() if k not in known},
        )
