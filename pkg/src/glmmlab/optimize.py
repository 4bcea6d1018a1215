"""In-repo unconstrained optimizers and finite-difference derivatives.

Deliberately dependency-free so fitting behaves identically everywhere:
a Nelder-Mead simplex for derivative-free warm-up and BFGS driven by
central finite differences for the quasi-Newton phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "OptimizeOptions",
    "OptimizeResult",
    "FiniteDifferenceError",
    "nelder_mead",
    "bfgs_fd",
    "finite_diff_grad",
    "finite_diff_hessian",
]


class FiniteDifferenceError(ValueError):
    """Objective returned a non-finite value during differencing."""


@dataclass
class OptimizeOptions:
    max_evals: int = 10_000
    max_iters: int = 500
    f_tol: float = 1e-9
    g_tol: float = 1e-4
    fd_step_scale: float = 1e-5

    def __post_init__(self):
        if min(self.f_tol, self.g_tol, self.fd_step_scale) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class OptimizeResult:
    x: np.ndarray
    f: float
    gradient_norm: float
    n_iters: int
    n_evals: int
    converged: bool
    message: str = ""


def finite_diff_grad(f, x, step_scale: float = 1e-5) -> np.ndarray:
    """Central-difference gradient with per-coordinate step scale*(1+|x_i|)."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = step_scale * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FiniteDifferenceError(
                f"non-finite objective while differencing coordinate {i}"
            )
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_hessian(f, x, step_scale: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian, symmetrized as (H + H') / 2."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = step_scale * (1.0 + np.abs(x))
    f0 = f(x)
    if not np.isfinite(f0):
        raise FiniteDifferenceError("non-finite objective at expansion point")
    hess = np.empty((d, d))

    def at(delta):
        val = f(x + delta)
        if not np.isfinite(val):
            idx = int(np.argmax(delta != 0.0))
            raise FiniteDifferenceError(
                f"non-finite objective while differencing coordinate {idx}"
            )
        return val

    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        hess[i, i] = (at(ei) - 2.0 * f0 + at(-ei)) / (h[i] * h[i])
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h[j]
            hess[i, j] = (at(ei + ej) - at(ei - ej) - at(-ei + ej) + at(-ei - ej)) / (
                4.0 * h[i] * h[j]
            )
            hess[j, i] = hess[i, j]
    return 0.5 * (hess + hess.T)


def nelder_mead(f, x0, opts: OptimizeOptions | None = None) -> OptimizeResult:
    """Simplex descent with standard (1, 2, 0.5, 0.5) coefficients.

    Terminates when the simplex f-spread drops below f_tol or the
    evaluation cap is hit; the cap is reported via status, not an error.
    """
    opts = opts or OptimizeOptions()
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    alpha, gamma, rho, sigma = 1.0, 2.0, 0.5, 0.5

    simplex = [x0.copy()]
    for i in range(d):
        step = 0.05 * (1.0 + abs(x0[i]))
        vertex = x0.copy()
        vertex[i] += step
        simplex.append(vertex)
    simplex = np.array(simplex)

    evals = 0

    def call(x):
        nonlocal evals
        evals += 1
        val = f(x)
        return val if np.isfinite(val) else np.inf

    fvals = np.array([call(v) for v in simplex])
    iters = 0
    converged = False
    while evals < opts.max_evals:
        order = np.argsort(fvals, kind="stable")
        simplex = simplex[order]
        fvals = fvals[order]
        spread = fvals[-1] - fvals[0]
        # A symmetric simplex straddling the optimum has zero f-spread, so
        # require the vertices to have collapsed in x as well.
        diameter = np.max(np.abs(simplex - simplex[0]))
        if spread < opts.f_tol and diameter <= 1e-6 * (1.0 + np.max(np.abs(simplex[0]))):
            converged = True
            break
        iters += 1
        centroid = simplex[:-1].mean(axis=0)
        reflected = centroid + alpha * (centroid - simplex[-1])
        f_r = call(reflected)
        if f_r < fvals[0]:
            expanded = centroid + gamma * (reflected - centroid)
            f_e = call(expanded)
            if f_e < f_r:
                simplex[-1], fvals[-1] = expanded, f_e
            else:
                simplex[-1], fvals[-1] = reflected, f_r
        elif f_r < fvals[-2]:
            simplex[-1], fvals[-1] = reflected, f_r
        else:
            if f_r < fvals[-1]:
                contracted = centroid + rho * (reflected - centroid)
            else:
                contracted = centroid + rho * (simplex[-1] - centroid)
            f_c = call(contracted)
            if f_c < min(f_r, fvals[-1]):
                simplex[-1], fvals[-1] = contracted, f_c
            else:
                for k in range(1, d + 1):
                    simplex[k] = simplex[0] + sigma * (simplex[k] - simplex[0])
                    fvals[k] = call(simplex[k])

    best = int(np.argmin(fvals))
    return OptimizeResult(
        x=simplex[best].copy(),
        f=float(fvals[best]),
        gradient_norm=float("nan"),
        n_iters=iters,
        n_evals=evals,
        converged=converged,
        message="simplex spread below f_tol" if converged else "evaluation cap hit",
    )


def bfgs_fd(f, x0, opts: OptimizeOptions | None = None) -> OptimizeResult:
    """BFGS with central finite differences and Armijo backtracking.

    Line-search failure triggers one steepest-descent fallback step before
    the inverse Hessian is reset to the identity; the same reset handles
    curvature-condition failures.  Never raises on non-convergence.
    """
    opts = opts or OptimizeOptions()
    c1 = 1e-4
    x = np.asarray(x0, dtype=float).copy()
    d = x.size
    evals = 0

    def call(z):
        nonlocal evals
        evals += 1
        val = f(z)
        return val if np.isfinite(val) else np.inf

    def grad(z):
        nonlocal evals
        evals += 2 * d
        return finite_diff_grad(f, z, opts.fd_step_scale)

    fx = call(x)
    if not np.isfinite(fx):
        return OptimizeResult(x, fx, np.inf, 0, evals, False, "non-finite start")
    g = grad(x)
    gnorm = float(np.linalg.norm(g))
    if gnorm < opts.g_tol:
        return OptimizeResult(x, fx, gnorm, 0, evals, True, "stationary start")

    h_inv = np.eye(d)
    iters = 0
    converged = False
    message = "iteration cap hit"

    def backtrack(direction, slope, max_halvings):
        t = 1.0
        for _ in range(max_halvings):
            candidate = x + t * direction
            fc = call(candidate)
            if fc <= fx + c1 * t * slope:
                return candidate, fc, t
            t *= 0.5
        return None

    while iters < opts.max_iters:
        iters += 1
        direction = -h_inv @ g
        slope = float(direction @ g)
        if slope >= 0.0:
            h_inv = np.eye(d)
            direction = -g
            slope = -float(g @ g)
        hit = backtrack(direction, slope, 40)
        if hit is None:
            # One steepest-descent attempt, then reset curvature state.
            direction = -g
            slope = -float(g @ g)
            hit = backtrack(direction, slope, 60)
            h_inv = np.eye(d)
            if hit is None:
                converged = gnorm < opts.g_tol
                message = "line search failed"
                break
        x_new, f_new, _ = hit
        g_new = grad(x_new)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            rho_k = 1.0 / sy
            v = np.eye(d) - rho_k * np.outer(s, y)
            h_inv = v @ h_inv @ v.T + rho_k * np.outer(s, s)
        else:
            h_inv = np.eye(d)
        rel_change = abs(fx - f_new) / max(1.0, abs(fx))
        x, fx, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        if gnorm < opts.g_tol and rel_change < opts.f_tol:
            converged = True
            message = "gradient and objective tolerances met"
            break

    return OptimizeResult(x, float(fx), gnorm, iters, evals, converged, message)
