"""
Looking inside the gates
========================

The depth branch is modulated by two kinds of gates: the contextual
attention inside AG-GConv (driven by colour and depth together) and the AG-SC
gate that filters colour skip features in the decoder. Here we run an
untrained model on one scene and summarize the gate values per level.
"""
import numpy as np

from aggnet import tensor as T
from aggnet.model import AGGNet, ModelConfig
from aggnet.synth import SceneSpec, generate_scene

cfg = ModelConfig(scheme="G")
model = AGGNet(cfg)
model.eval()
s = generate_scene(SceneSpec(seed=1))
raw, rgb = s.raw_depth[None], s.rgb[None]

with T.no_grad():
    depth = model.prefill_depth(raw, rgb)
    colors = model.color_features(T.Tensor(rgb.astype(np.float32)))
    x = T.scale(depth, 1.0 / cfg.max_depth)
    for level, f_c in enumerate(colors, start=1):
        agg = model.enc._children[str(level)].agg
        f_d = agg.features(x)
        gate = agg.gate_values(f_d, f_c).data
        print("level %d  AG-GConv gate mean %.3f  std %.3f  shape %s"
              % (level, gate.mean(), gate.std(), gate.shape[1:]))
        x = agg(x, f_c)

# Pre-filled pixels versus measured ones.
filled = depth.data[0, 0]
holes = s.hole_mask
print("pre-fill: %d holes, filled values %.3f .. %.3f m"
      % (holes.sum(), filled[holes].min(), filled[holes].max()))
print("measured pixels untouched:", np.array_equal(filled[~holes], raw[0][~holes].astype(np.float32)))
