"""Render the capsule figure from all four cameras and save a contact sheet.

Rows are cameras (the last one is the held-out test camera); columns are
color, depth and normals, which all come out of the same sphere-traced hits.

    python3 demos/synthetic_scene.py [out.png]
"""

import sys

import numpy as np

from dynrecon.fileio import write_png
from dynrecon.oracle import default_cameras, default_skeleton, generate_dataset, swing_poses


def main(out="scene_contact_sheet.png"):
    skel = default_skeleton()
    pose = swing_poses(skel, 30)[7]
    cams = default_cameras(64, 64)
    rows = []
    for rec in generate_dataset(skel, [pose], cams):
        depth = np.where(rec.mask, rec.depth, 0.0)
        if rec.mask.any():
            lo, hi = depth[rec.mask].min(), depth[rec.mask].max()
            depth = np.where(rec.mask, 1.0 - (depth - lo) / max(hi - lo, 1e-6), 0.0)
        normal = np.where(rec.mask[..., None], 0.5 * (rec.normal + 1.0), 0.0)
        rows.append(np.concatenate([rec.rgb, np.repeat(depth[..., None], 3, -1), normal], axis=1))
        print(f"camera {rec.camera_index}: {rec.mask.mean():5.1%} foreground, "
              f"depth {rec.depth[rec.mask].min():.3f}..{rec.depth[rec.mask].max():.3f}")
    write_png(out, np.concatenate(rows, axis=0))
    print(f"wrote {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
