"""Shared test utilities: central finite-difference gradient checking."""

import numpy as np


def numerical_grad(forward, arrays, h=1e-5):
    """Central differences of a scalar-valued ``forward`` with respect to each
    array, perturbing the arrays in place."""
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = forward()
            flat[i] = orig - h
            down = forward()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


def max_rel_error(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def assert_grads_close(analytic_list, numeric_list, tol=1e-4):
    for analytic, numeric in zip(analytic_list, numeric_list):
        err = max_rel_error(analytic, numeric)
        assert err < tol, f"gradient mismatch: max relative error {err:.3e}"
