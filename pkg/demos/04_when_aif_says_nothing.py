# Why unsupervised training cannot find depth on the kappa = 2 toy stacks.
#
# With depths in [0, 1], focus positions evenly spaced over [0, 1] and blur
# radius 2 * |d - p|, the slice focused at 0.5 never blurs anything: the
# largest radius it sees is under one pixel, and a binary disc under one
# pixel is the identity.  That slice *is* the all-in-focus image, so an
# objective that only asks for a sharp image is solved by always picking
# it, whatever the depth.  A larger blur gain removes the shortcut.

import numpy as np

from focalattn import ModelConfig, TrainConfig, build_model, evaluate, toy_samples, train
from focalattn.fusion import softmax_normalize
from focalattn.net import forward

for kappa in (2.0, 4.0):
    data = toy_samples(seed=0, count=64, size=32, frames=5, kappa=kappa)
    train_set, val = data[:48], data[48:]
    exact = [np.abs(s.stack.slice(2) - s.gt_aif).max() for s in val]
    print(f"kappa {kappa}: worst |middle slice - AiF| = {max(exact):.2e}")

    model = build_model(ModelConfig(levels=2, base_channels=4, seed=0))
    before = evaluate(model, val).metrics.mae
    cfg = TrainConfig(mode="unsupervised", steps=1000, batch_size=4, lr=2e-3, crop=16, seed=0)
    model, _ = train(model, train_set, cfg)
    after = evaluate(model, val)
    picks = softmax_normalize(np.stack([forward(model, s.stack).data for s in val])).mean((0, 1, 2, 3))
    print(f"  MAE {before:.3f} -> {after.metrics.mae:.3f}, AiF L1 {after.aif_l1:.5f}")
    print("  mean softmax weight per slice", picks.round(3))
