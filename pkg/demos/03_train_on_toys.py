# Supervised training on the toy benchmark, compared with argmax sharpness.
#
# Takes about a minute on one core.

import numpy as np

from focalattn import ModelConfig, TrainConfig, baseline_argmax_dff, build_model, compute_metrics
from focalattn import evaluate, toy_samples, train

data = toy_samples(seed=0, count=64, size=32, frames=5, kappa=2.0)
train_set, val = data[:48], data[48:]

model = build_model(ModelConfig(levels=2, base_channels=4, seed=0))
print("parameters", model.num_parameters())
print("untrained val MAE", evaluate(model, val).metrics.mae)

config = TrainConfig(mode="supervised", steps=2000, batch_size=4, lr=2e-3, crop=16, val_every=500, seed=0)
model, history = train(model, train_set, config, val=val)
for entry in history:
    if "val" in entry:
        print(f"step {entry['step'] + 1}: loss {entry['total']:.4f}, val MAE {entry['val']['mae']:.4f}")

# The classical baseline can only answer with a focus position.
base = np.mean([compute_metrics(baseline_argmax_dff(s.stack), s.gt_depth).mae for s in val])
print("argmax sharpness val MAE", base)

report = evaluate(model, val).metrics
print(report.to_text())
