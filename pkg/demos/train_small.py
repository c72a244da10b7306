"""
Training a small model
======================

Train scheme G on a few dozen synthetic scenes and compare it against the
trivial baseline that fills every hole with the mean measured depth.
Takes about a minute on one CPU core.
"""
import numpy as np

from aggnet.losses import evaluate
from aggnet.model import ModelConfig
from aggnet.synth import SceneSpec, generate_dataset
from aggnet.training import TrainConfig, evaluate_model, train

spec = SceneSpec(seed=11)
train_set = generate_dataset(spec, "train", 64)
test_set = generate_dataset(spec, "test", 16)

cfg = ModelConfig(scheme="G")
result = train(cfg, train_set, TrainConfig(epochs=60, batch=8, seed=0))
for line in result.log_lines[::10]:
    print(line)

report, _ = evaluate_model(result.model, test_set)
print("model    ", report.to_line())

# Same predictions with the measured pixels copied back in, as `aggnet infer` does.
result.model.eval()
pred = result.model.predict(test_set.raw, test_set.rgb)
kept = np.where(test_set.raw > 0, test_set.raw, pred)
print("kept     ", evaluate(kept, test_set.gt).to_line())

# Baseline: holes filled with the mean of the measured pixels.
baseline = np.array([np.where(r > 0, r, r[r > 0].mean()) for r in test_set.raw])
print("baseline ", evaluate(baseline, test_set.gt).to_line())
