"""
Synthetic RGB-D scenes and their depth holes
============================================

Generate one scene, look at how the three hole generators split the
missing-pixel budget, and write the sample to disk as 16-bit PGM / 8-bit PPM.
"""
import os
import tempfile

import numpy as np

from aggnet import netpbm
from aggnet.synth import SceneSpec, carve_holes, discontinuities, generate_scene

spec = SceneSpec(seed=3)
sample = generate_scene(spec)
print("objects:", len(sample.objects))
print("depth range: %.2f .. %.2f m" % (sample.gt_depth.min(), sample.gt_depth.max()))
print("hole fraction: %.3f" % sample.hole_mask.mean())

# Each generator on its own, with the full budget.
for name, weights in [("speckle", (1, 0, 0)), ("edge shadow", (0, 1, 0)), ("blobs", (0, 0, 1))]:
    only = SceneSpec(seed=3, speckle_weight=weights[0], edge_shadow_weight=weights[1],
                     blob_weight=weights[2])
    _, mask = carve_holes(sample.gt_depth, sample.rgb, only)
    print("%-12s holes %.3f" % (name, mask.mean()))

# Shadow holes sit on depth discontinuities.
edges = discontinuities(sample.gt_depth, spec.edge_threshold)
print("discontinuity pixels: %d" % edges.sum())

# Depth is stored in millimetres, so a round trip quantizes to 1 mm.
out = tempfile.mkdtemp()
netpbm.write_depth(os.path.join(out, "raw.pgm"), sample.raw_depth, ["seed=3"])
netpbm.write_rgb(os.path.join(out, "rgb.ppm"), sample.rgb)
back = netpbm.read_depth(os.path.join(out, "raw.pgm"))
print("max round-trip error: %.4f m" % np.abs(back - sample.raw_depth).max())
print("files in", out, sorted(os.listdir(out)))
