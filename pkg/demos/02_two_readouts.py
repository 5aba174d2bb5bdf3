# One attention volume, two readouts.
#
# The network emits one score per pixel per slice.  Depth comes from
# softplus-normalized weights (flat, so it can interpolate between focus
# positions); the all-in-focus image comes from softmax weights (peaked, so
# it picks the sharp slice).

import numpy as np

from focalattn import expected_depth, softmax_normalize, softplus_normalize
from focalattn.fusion import weight_entropy

positions = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
scores = np.array([-1.0, 2.0, 1.5, -0.5, -2.0]).reshape(1, 1, 1, 5)

w_plus = softplus_normalize(scores)
w_max = softmax_normalize(scores)
print("softplus weights", w_plus.ravel().round(3))
print("softmax weights ", w_max.ravel().round(3))
print("entropy", weight_entropy(w_plus).item(), ">=", weight_entropy(w_max).item())

# Softplus depth lands between slices; sharper softmax snaps to a slice.
print("softplus depth", expected_depth(w_plus, positions).item())
for tau in (1, 10, 100):
    print(f"softmax depth at temperature {tau}:", expected_depth(softmax_normalize(scores, tau), positions).item())

# Softmax ignores a constant added to every score.  Softplus does not.
shifted = scores + 20
print(np.abs(softmax_normalize(shifted) - w_max).max())
print("softplus depth after +20 shift", expected_depth(softplus_normalize(shifted), positions).item())
