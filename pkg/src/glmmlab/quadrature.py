"""Gauss-Hermite quadrature in the probabilists' convention.

Rules integrate against the standard normal density: sum_k w_k f(z_k)
approximates the integral of f(z) phi(z) dz and is exact for polynomials
of degree <= 2Q - 1.  Nodes come from a Golub-Welsch eigen-decomposition
of the Jacobi matrix, computed in-repo with the implicit QL algorithm so
rule construction has no dependency beyond numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["QuadratureRule", "gauss_hermite", "tensor_grid", "adaptive_recenter"]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class QuadratureRule:
    """Immutable node/weight rule; dim is 1 or 2 (tensor grid)."""

    nodes: np.ndarray  # (Q,) for dim 1, (Q*Q, 2) for dim 2
    weights: np.ndarray  # sums to 1 for plain rules
    order: int
    dim: int = 1

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)


def _tridiag_ql(diag: np.ndarray, offdiag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and first eigenvector components of a symmetric tridiagonal.

    Implicit QL with Wilkinson shifts.  Only the first row of the
    accumulated rotation matrix is tracked, which is all Golub-Welsch
    weights need.  Returns (eigenvalues, first_components) unsorted.
    """
    n = len(diag)
    d = diag.astype(float).copy()
    e = np.zeros(n)
    e[: n - 1] = offdiag
    w = np.zeros(n)
    w[0] = 1.0
    eps = np.finfo(float).eps

    for l in range(n):
        iterations = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= eps * dd:
                    break
                m += 1
            if m == l:
                break
            iterations += 1
            if iterations > 50:
                raise RuntimeError("implicit QL failed to converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            underflow = False
            for i in range(m - 1, l - 1, -1):
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                f = w[i + 1]
                w[i + 1] = s * w[i] + c * f
                w[i] = c * w[i] - s * f
            if underflow:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return d, w


def gauss_hermite(order: int) -> QuadratureRule:
    """One-dimensional rule with the given number of nodes (1..100)."""
    if not 1 <= order <= 100:
        raise ValueError(f"order must be in 1..100, got {order}")
    if order == 1:
        return QuadratureRule(np.zeros(1), np.ones(1), 1)
    # Jacobi matrix of the probabilists' Hermite recurrence:
    # He_{k+1}(z) = z He_k(z) - k He_{k-1}(z).
    diag = np.zeros(order)
    offdiag = np.sqrt(np.arange(1, order, dtype=float))
    nodes, first = _tridiag_ql(diag, offdiag)
    weights = first**2
    idx = np.argsort(nodes)
    nodes = nodes[idx]
    weights = weights[idx]
    # Enforce the exact symmetry the eigen-solver only approximates.
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    weights = weights / weights.sum()
    return QuadratureRule(nodes, weights, order)


def tensor_grid(order: int) -> QuadratureRule:
    """Two-dimensional tensor product rule with order**2 node pairs."""
    if not 1 <= order <= 40:
        raise ValueError(f"order must be in 1..40, got {order}")
    rule = gauss_hermite(order)
    z0, z1 = np.meshgrid(rule.nodes, rule.nodes, indexing="ij")
    nodes = np.column_stack([z0.ravel(), z1.ravel()])
    weights = np.outer(rule.weights, rule.weights).ravel()
    return QuadratureRule(nodes, weights, order, dim=2)


def adaptive_recenter(rule: QuadratureRule, mode: float, curvature: float) -> QuadratureRule:
    """Recenter a 1-D rule on an integrand peak at `mode` with the given curvature.

    Nodes map to mode + z / sqrt(curvature); weights pick up the change of
    measure phi(mapped) / (phi(z) * sqrt(curvature)) so the rule still
    targets integrals against phi.  Sharply peaked integrands are then
    sampled where their mass actually is.
    """
    if rule.dim != 1:
        raise ValueError("adaptive recentering applies to 1-D rules")
    if not curvature > 0.0:
        raise ValueError(f"curvature must be positive, got {curvature}")
    root = math.sqrt(curvature)
    nodes = mode + rule.nodes / root
    log_adjust = 0.5 * (rule.nodes**2 - nodes**2) - math.log(root)
    weights = rule.weights * np.exp(log_adjust)
    return QuadratureRule(nodes, weights, rule.order)
