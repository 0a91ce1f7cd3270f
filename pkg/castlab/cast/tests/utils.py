import os
import unittest

import numpy as np

from cast import autodiff as ad
from cast.crop_sampler import SaliencyMask

slow = unittest.skipUnless(os.environ.get('CAST_RUN_SLOW') == '1', "set CAST_RUN_SLOW=1 to run")


def numeric_grad(fn, arrays, index, eps=1e-2, track=False):
    """Central differences of the scalar ``fn(*tensors)`` w.r.t. ``arrays[index]``.

    The forward runs in float32; the differences are taken in float64.
    ``track`` keeps graph recording on, for functions that take gradients
    internally (Grad-CAM).
    """
    base = [np.asarray(a, dtype=np.float64) for a in arrays]
    out = np.zeros_like(base[index])
    it = np.nditer(base[index], flags=['multi_index'])
    for _ in it:
        i = it.multi_index
        values = []
        for sign in (1.0, -1.0):
            shifted = [a.copy() for a in base]
            shifted[index][i] += sign * eps
            with ad.set_grad_enabled(track):
                values.append(float(fn(*[ad.Tensor(a, requires_grad=track) for a in shifted]).item()))
        out[i] = (values[0] - values[1]) / (2 * eps)
    return out


def analytic_grad(fn, arrays, index):
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    return ad.grad(fn(*tensors), tensors[index]).data.astype(np.float64)


def relative_error(analytic, numeric, floor=1e-2):
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(case, fn, arrays, tolerance=1e-3, eps=1e-2, track=False, indices=None):
    """Assert that the engine's gradient of ``fn`` matches finite differences for every argument."""
    for index in range(len(arrays)) if indices is None else indices:
        err = relative_error(analytic_grad(fn, arrays, index), numeric_grad(fn, arrays, index, eps, track))
        case.assertLessEqual(err, tolerance, f"argument {index}: relative error {err:.2e}")


def random_mask(rng, size, density=0.3):
    return SaliencyMask((rng.random((size, size)) < density).astype(np.uint8))
