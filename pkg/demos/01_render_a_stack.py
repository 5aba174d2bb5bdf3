# Rendering a focal stack from a toy scene.
#
# A scene is an all-in-focus image plus a depth map.  Each slice of the
# stack is the scene photographed with the lens focused at one position;
# pixels whose depth is far from that position get blurred by a disc whose
# radius grows linearly with the mismatch.

import tempfile
from pathlib import Path

import numpy as np

from focalattn import FocusAxis, synth_stack, toy_samples
from focalattn.defocus import Scene, coc_radius, disc_kernel
from focalattn.stackio import write_sample

rng = np.random.default_rng(0)

# A disc of radius 1 is a five-tap plus; anything under 1 keeps the pixel sharp.
print(disc_kernel(1.0).taps)
print(disc_kernel(0.9).taps)

# Blur gain kappa maps focus mismatch to pixels.  With kappa = 2 a point at
# depth 0.9 viewed from focus 0.25 gets a radius of 1.3 pixels.
print(coc_radius(0.9, 0.25, 2.0))

# Two planes, near on the left and far on the right.
aif = rng.uniform(0.1, 0.9, size=(32, 32, 3))
depth = np.where(np.arange(32) < 16, 0.1, 0.9) * np.ones((32, 1))
sample = synth_stack(Scene(aif, depth, kappa=3.0), FocusAxis([0.0, 0.5, 1.0]))

for t, p in enumerate(sample.stack.axis.positions):
    s = sample.stack.slice(t)
    left = np.abs(s[:, :12] - aif[:, :12]).mean()
    right = np.abs(s[:, 20:] - aif[:, 20:]).mean()
    print(f"focus {p:.1f}: left error {left:.3f}, right error {right:.3f}")

# The toy generator does the same for random rectangles over a ramp.
toy = toy_samples(seed=1, count=1, size=32, frames=5, kappa=2.0)[0]
print(toy.stack.slices.shape, toy.gt_depth.min(), toy.gt_depth.max())

# Save it the way the CLI does: PNG slices, PFM depth and a JSON manifest.
with tempfile.TemporaryDirectory() as tmp:
    path = write_sample(Path(tmp) / "scene", toy)
    print(sorted(p.name for p in path.parent.iterdir()))
