"""Central finite-difference checks for network parameter gradients."""
from __future__ import annotations

import numpy as np

from .network import CellFunction, NetworkSpec, backward_params, forward, parameter_arrays


def numerical_gradient(loss, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss()`` with respect to ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = loss()
        flat[k] = orig - h
        down = loss()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """Max abs difference scaled by the larger of the two sup-norms."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return 0.0
    return float(diff / scale)


def check_network(net: NetworkSpec, inp: CellFunction, tensors: dict, seed: int = 0, h: float = 1e-5) -> dict:
    """Compare analytic and numerical gradients of ``L = sum(r * output)`` for random ``r``.

    Returns ``{key: relative error}`` with one key per parameterized layer
    index and ``"input"`` for the input gradient.
    """
    out = forward(net, inp, tensors)
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(out.values.shape)
    grads = backward_params(net, inp, r, tensors)

    values = inp.values.copy()

    def loss():
        return float(np.sum(r * forward(net, CellFunction(inp.partition, values), tensors).values))

    report = {}
    for i, arr in parameter_arrays(net).items():
        report[i] = relative_error(grads.params[i], numerical_gradient(loss, arr, h))
    report["input"] = relative_error(grads.input, numerical_gradient(loss, values, h))
    return report
