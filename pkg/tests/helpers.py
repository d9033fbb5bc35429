"""Shared test utilities."""
import numpy as np


def rescale_layer(lp, rng):
    """Re-randomize a block's weights at unit-ish scale.

    The teacher's 0.02 production init leaves some parameter gradients orders
    of magnitude below the loss scale, where central differences at h=1e-5
    are dominated by float64 roundoff. Gradient correctness is checked at
    well-conditioned scales instead.
    """
    for k, t in lp.items():
        if t.data.ndim == 2:
            t.data = rng.normal(size=t.data.shape) / np.sqrt(t.data.shape[0])
        elif k.endswith("_g"):
            t.data = 1.0 + 0.2 * rng.normal(size=t.data.shape)
        else:
            t.data = 0.3 * rng.normal(size=t.data.shape)
