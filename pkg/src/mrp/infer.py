"""MAP estimation and Hamiltonian Monte Carlo for a bound posterior."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, NumericError
from .model import Layout, Model, Posterior

log = logging.getLogger(__name__)

_EPS = np.finfo(np.float64).eps
ARMIJO = 1e-4
NOISE_ULPS = 8
PARAMETERIZATIONS = ("noncentered", "centered")


@dataclass
class FitResult:
    """Posterior mode in centred unconstrained coordinates.

    ``log_posterior_at_mode`` and ``final_grad_norm`` refer to the objective
    in the coordinates named by ``parameterization``.
    """

    mode: np.ndarray
    log_posterior_at_mode: float
    iterations: int
    converged: bool
    final_grad_norm: float
    parameterization: str = "centered"
    trace: list[float] = field(default_factory=list, repr=False)

    def to_dict(self, layout: Layout | None = None) -> dict:
        out = {
            "log_posterior_at_mode": self.log_posterior_at_mode,
            "iterations": self.iterations,
            "converged": self.converged,
            "final_grad_norm": self.final_grad_norm,
            "parameterization": self.parameterization,
            "mode": [float(v) for v in self.mode],
        }
        if layout is not None:
            out["names"] = layout.names()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(
            np.asarray(d["mode"], dtype=np.float64),
            float(d["log_posterior_at_mode"]),
            int(d["iterations"]),
            bool(d["converged"]),
            float(d["final_grad_norm"]),
            d.get("parameterization", "centered"),
        )


@dataclass
class SampleSet:
    draws: np.ndarray
    acceptance_rate: float
    seed: int
    n_accepted: int = 0
    n_divergent: int = 0
    layout: Layout | None = field(default=None, repr=False)


def _lbfgs_direction(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def maximize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    max_iter: int = 2000,
    tol: float = 1e-8,
    memory: int = 10,
) -> FitResult:
    """Limited-memory BFGS ascent with a backtracking line search.

    Steps must satisfy the Armijo condition.  Once the Armijo margin drops
    below the rounding noise of ``f`` the test switches to the approximate
    Wolfe condition on the directional derivative, and ``f`` may then move
    by at most ``NOISE_ULPS * eps * |f|`` in either direction.  Stops when
    the max-norm of the gradient is below ``tol``.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericError("objective is not finite at the starting point")
    trace = [f]
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    it = 0
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    while gnorm >= tol and it < max_iter:
        it += 1
        d = -_lbfgs_direction(-g, s_hist, y_hist)
        slope = g @ d
        if slope <= 0:
            s_hist.clear(); y_hist.clear()
            d, slope = g.copy(), g @ g
        step = 1.0 if s_hist else min(1.0, 1.0 / max(gnorm, 1e-300))
        noise = NOISE_ULPS * _EPS * abs(f)
        accepted = False
        for _ in range(60):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and np.all(np.isfinite(g_new)):
                gain = ARMIJO * step * slope
                if f_new >= f + gain:
                    accepted = True
                elif gain <= noise and f_new >= f - noise:
                    accepted = g_new @ d >= (2 * ARMIJO - 1) * slope
                if accepted:
                    break
            step *= 0.5
        if not accepted:
            if s_hist:
                # memory produced a poor direction; retry from steepest ascent
                s_hist.clear(); y_hist.clear()
                continue
            log.debug("line search failed at iteration %d", it)
            break
        s_vec, y_vec = x_new - x, g - g_new
        if s_vec @ y_vec > 1e-12 * np.sqrt((s_vec @ s_vec) * (y_vec @ y_vec)):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    return FitResult(x, float(f), it, gnorm < tol, gnorm, trace=trace)


def _bind(data_or_post, model):
    if isinstance(data_or_post, Posterior):
        return data_or_post
    if model is None:
        raise TypeError("a Model is needed to bind a Dataset")
    return model.bind(data_or_post)


def _objective(post: Posterior, parameterization: str):
    if parameterization not in PARAMETERIZATIONS:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    if parameterization == "centered":
        return post.value_and_grad, (lambda w: w), (lambda u: u)
    return post.noncentered_value_and_grad, post.to_centered, post.to_noncentered


def fit_map(
    data_or_post,
    model: Model | None = None,
    max_iter: int = 2000,
    tol: float = 1e-8,
    seed: int = 0,
    init_jitter: float = 0.0,
    parameterization: str = "noncentered",
) -> FitResult:
    """Posterior mode by L-BFGS ascent.

    Starts from ``mu = logit(pooled rate)``, zero effects, uniform shares and
    unit scale, optionally jittered with a seeded normal perturbation.  The
    default non-centred coordinates (effects divided by their prior scale)
    have a proper mode; the centred density can grow without bound as a
    prior scale shrinks to zero.  The returned ``mode`` is always in centred
    coordinates.  Non-convergence is reported through ``converged``.
    """
    post = _bind(data_or_post, model)
    if len(post.data) == 0:
        raise DataError("cannot fit an empty dataset")
    fun, to_u, to_w = _objective(post, parameterization)
    x0 = post.model.initial_point(post.data)
    if init_jitter:
        x0 = x0 + init_jitter * np.random.default_rng(seed).standard_normal(x0.shape)
    res = maximize(fun, to_w(x0), max_iter=max_iter, tol=tol)
    res.mode = to_u(res.mode)
    res.parameterization = parameterization
    log.info(
        "MAP fit: %d iterations, converged=%s, grad max-norm %.3g",
        res.iterations, res.converged, res.final_grad_norm,
    )
    return res


def check_gradient(fun, grad, u, h: float = 1e-5) -> float:
    """Worst-coordinate relative error of ``grad`` against central differences.

    The error for coordinate ``i`` is ``|a - n| / max(1, |a|, |n|)``.
    """
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(grad(u), dtype=np.float64)
    n = np.empty_like(a)
    for i in range(u.size):
        e = np.zeros_like(u)
        e[i] = h
        n[i] = (fun(u + e) - fun(u - e)) / (2.0 * h)
    err = np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo


def _trajectory(value_and_grad, x, p, g, step_size, n_steps):
    """Leapfrog from ``(x, p)`` given the gradient ``g`` at ``x``.

    Returns ``(x, p, lp, g, ok)``; ``ok`` is false when a non-finite density
    or gradient was hit, in which case the other outputs are meaningless.
    """
    x = np.array(x, dtype=np.float64)
    p = p + 0.5 * step_size * g
    lp = np.nan
    for i in range(n_steps):
        x += step_size * p
        lp, g = value_and_grad(x)
        if not np.isfinite(lp) or not np.all(np.isfinite(g)):
            return x, p, lp, g, False
        p += (step_size if i != n_steps - 1 else 0.5 * step_size) * g
    return x, p, lp, g, True


def leapfrog(value_and_grad, x, p, step_size: float, n_steps: int):
    """Leapfrog integration of position ``x`` and momentum ``p`` (unit mass)."""
    _, g = value_and_grad(np.asarray(x, dtype=np.float64))
    x, p, _, _, _ = _trajectory(value_and_grad, x, np.asarray(p, dtype=np.float64), g, step_size, n_steps)
    return x, p


def hmc(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    step_size: float = 0.05,
    leapfrog_steps: int = 20,
    draws: int = 1000,
    warmup: int = 500,
    seed: int = 0,
) -> SampleSet:
    """Static-trajectory HMC with identity mass matrix and Metropolis correction.

    A trajectory that reaches a non-finite Hamiltonian is rejected and counted
    as divergent.  Warmup draws are discarded.
    """
    if step_size <= 0 or leapfrog_steps < 1 or draws < 1 or warmup < 0:
        raise ValueError("step_size, leapfrog_steps and draws must be positive")
    rng = np.random.default_rng(seed)
    x = np.array(x0, dtype=np.float64)
    lp, g = value_and_grad(x)
    if not np.isfinite(lp):
        raise NumericError("log density is not finite at the initial point")
    out = np.empty((draws, x.size))
    n_acc = n_div = 0
    for it in range(warmup + draws):
        p0 = rng.standard_normal(x.size)
        log_u = np.log(rng.uniform())
        with np.errstate(all="ignore"):
            xn, pn, lpn, gn, ok = _trajectory(value_and_grad, x, p0, g, step_size, leapfrog_steps)
            h0 = -lp + 0.5 * p0 @ p0
            h1 = -lpn + 0.5 * pn @ pn if ok else np.inf
        if not np.isfinite(h1):
            accept = False
            if it >= warmup:
                n_div += 1
        else:
            accept = log_u < h0 - h1
        if accept:
            x, lp, g = xn, lpn, gn
        if it >= warmup:
            out[it - warmup] = x
            n_acc += int(accept)
    return SampleSet(out, n_acc / draws, seed, n_acc, n_div)


def hmc_sample(
    data_or_post,
    model: Model | None = None,
    step_size: float = 0.05,
    leapfrog_steps: int = 20,
    draws: int = 1000,
    warmup: int = 500,
    seed: int = 0,
    init=None,
    parameterization: str = "noncentered",
) -> SampleSet:
    """HMC on a model posterior; draws are returned in centred coordinates."""
    post = _bind(data_or_post, model)
    fun, to_u, to_w = _objective(post, parameterization)
    x0 = post.model.initial_point(post.data) if init is None else np.asarray(init, dtype=np.float64)
    s = hmc(fun, to_w(x0), step_size, leapfrog_steps, draws, warmup, seed)
    s.draws = np.array([to_u(w) for w in s.draws]).reshape(s.draws.shape)
    s.layout = post.layout
    return s


def posterior_means(s: SampleSet, layout: Layout | None = None):
    """Coordinate-wise mean of the draws in unconstrained space, then
    constrained.  Without a layout the raw mean vector is returned."""
    if s.draws.shape[0] == 0:
        raise DataError("empty sample set")
    mean = s.draws.mean(axis=0)
    layout = layout or s.layout
    return layout.constrain(mean) if layout is not None else mean


def mean_cell_probabilities(s: SampleSet, model: Model, design) -> np.ndarray:
    """Average over draws of the per-draw cell probabilities."""
    if s.draws.shape[0] == 0:
        raise DataError("empty sample set")
    acc = np.zeros(design.flat_idx.shape[0])
    for u in s.draws:
        acc += model.predict(u, design)
    return acc / s.draws.shape[0]
