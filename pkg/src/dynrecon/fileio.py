"""PNG / PFM image files and the on-disk dataset layout."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .deformation import read_poses, write_poses
from .oracle import CapsuleSkeleton, FrameRecord, read_cameras, write_cameras

__all__ = [
    "write_png",
    "read_png",
    "write_pfm",
    "read_pfm",
    "Dataset",
    "write_dataset",
    "read_dataset",
    "MissingInputError",
]


class MissingInputError(FileNotFoundError):
    pass


def write_png(path, img) -> None:
    """8-bit PNG from values in [0, 1]; 2-D arrays become grayscale."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.dtype == bool or arr.ndim == 2 and img.dtype == bool:
        arr = arr.astype(np.float64)
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path)


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"missing file: {path}")
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def write_pfm(path, img) -> None:
    """Little-endian single-precision PFM; 'Pf' for one channel, 'PF' for three."""
    arr = np.asarray(img, dtype="<f4")
    if arr.ndim == 2:
        header = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        # PFM stores rows bottom to top
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"missing file: {path}")
    data = path.read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=m.end())
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape)[::-1].astype(np.float32)


class Dataset:
    """Frame records plus the rig, skeleton and roles needed to train on them."""

    def __init__(self, records, cameras, roles, skeleton, poses, seed=0, noise_sigma=0.0):
        self.records: list[FrameRecord] = records
        self.cameras = cameras
        self.roles: list[str] = roles
        self.skeleton: CapsuleSkeleton = skeleton
        self.poses = poses
        self.seed = seed
        self.noise_sigma = noise_sigma

    def camera_indices(self, which: str = "train") -> list[int]:
        """Indices for ``train``, ``test`` or a single numeric index."""
        if which in ("train", "test"):
            return [i for i, r in enumerate(self.roles) if r == which]
        idx = int(which)
        if not 0 <= idx < len(self.cameras):
            raise ValueError(f"camera index {idx} out of range")
        return [idx]

    def select(self, cameras: list[int]) -> list[FrameRecord]:
        return [r for r in self.records if r.camera_index in cameras]


def write_dataset(root, ds: Dataset) -> None:
    root = Path(root)
    for sub in ("frames", "depth", "normal", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for r in ds.records:
        stem = f"{r.frame:04d}_cam{r.camera_index}"
        write_png(root / "frames" / f"{stem}.png", r.rgb)
        write_pfm(root / "depth" / f"{stem}.pfm", r.depth)
        write_pfm(root / "normal" / f"{stem}.pfm", r.normal)
        write_png(root / "mask" / f"{stem}.png", r.mask.astype(np.float64))
        if ds.noise_sigma > 0 and r.rgb_clean is not None:
            (root / "frames_clean").mkdir(exist_ok=True)
            write_png(root / "frames_clean" / f"{stem}.png", r.rgb_clean)
    write_poses(root / "poses.txt", ds.poses)
    write_cameras(root / "cameras.txt", ds.cameras, ds.roles)
    (root / "skeleton.txt").write_text(ds.skeleton.to_text())
    manifest = {
        "frames": len(ds.poses),
        "cameras": len(ds.cameras),
        "records": len(ds.records),
        "seed": ds.seed,
        "noise_sigma": ds.noise_sigma,
        "width": ds.cameras[0].width,
        "height": ds.cameras[0].height,
    }
    (root / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"missing file: {path}")
    out = {}
    for ln in path.read_text().splitlines():
        if "=" in ln:
            k, v = ln.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise MissingInputError(f"missing dataset directory: {root}")
    manifest = read_manifest(root / "manifest.txt")
    for name in ("poses.txt", "cameras.txt", "skeleton.txt"):
        if not (root / name).exists():
            raise MissingInputError(f"missing file: {root / name}")
    poses = read_poses(root / "poses.txt")
    cameras, roles = read_cameras(root / "cameras.txt")
    skeleton = CapsuleSkeleton.from_text((root / "skeleton.txt").read_text())
    records = []
    for pose in poses:
        for ci, cam in enumerate(cameras):
            stem = f"{pose.frame:04d}_cam{ci}"
            rgb = read_png(root / "frames" / f"{stem}.png")
            depth = read_pfm(root / "depth" / f"{stem}.pfm").astype(np.float64)
            normal = read_pfm(root / "normal" / f"{stem}.pfm").astype(np.float64)
            mask = read_png(root / "mask" / f"{stem}.png") > 0.5
            clean_path = root / "frames_clean" / f"{stem}.png"
            clean = read_png(clean_path) if clean_path.exists() else rgb
            records.append(FrameRecord(pose.frame, ci, cam, rgb, depth, normal, mask, pose, clean))
    return Dataset(
        records,
        cameras,
        roles,
        skeleton,
        poses,
        seed=int(manifest.get("seed", 0)),
        noise_sigma=float(manifest.get("noise_sigma", 0.0)),
    )
