"""Shared test oracles: finite differences and brute-force references."""
from __future__ import annotations

import numpy as np

from moefix import autodiff as ad


def finite_difference_grad(loss_fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn()`` w.r.t. the array ``x``.

    ``loss_fn`` must recompute the loss from scratch, reading ``x`` in place.
    """
    grad = np.zeros_like(x)
    flat, gflat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fplus = loss_fn()
        flat[i] = orig - h
        fminus = loss_fn()
        flat[i] = orig
        gflat[i] = (fplus - fminus) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(build, params: list[ad.Tensor], tol: float = 1e-4, h: float = 1e-5) -> None:
    """Assert analytic gradients of ``build()`` match central differences.

    ``build`` runs the forward pass and returns a scalar Tensor; every Tensor
    in ``params`` must be float64 with requires_grad set.
    """
    ad.zero_grads(params)
    with ad.Graph():
        loss = build()
        ad.backward(loss)
    for p in params:
        assert p.data.dtype == np.float64, "gradcheck needs float64 parameters"
        numeric = finite_difference_grad(lambda: float(build().data), p.data, h=h)
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        err = max_rel_err(analytic, numeric)
        assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol}"


def matmul_reference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product, the independent oracle for matmul."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def edit_distance_bruteforce(a, b) -> int:
    """Memoized recursive Levenshtein distance over arbitrary sequences."""
    from functools import lru_cache

    a = tuple(a)
    b = tuple(b)

    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        if a[i] == b[j]:
            return go(i + 1, j + 1)
        return 1 + min(go(i + 1, j + 1), go(i + 1, j), go(i, j + 1))

    return go(0, 0)
