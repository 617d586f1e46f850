"""Pure NumPy implementations of the per-cell likelihood kernels.

``flat_idx[i, k]`` is the position in the flat effect vector of the coefficient
that effect column ``k`` applies to cell ``i``; ``mult[i, k]`` is 1 for a
varying intercept and the covariate value for a varying slope.
"""

import numpy as np


def _expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def linear_predictor(base, flat_idx, mult, beta):
    base = np.asarray(base, dtype=np.float64)
    if flat_idx.shape[1] == 0:
        return base.copy()
    return base + np.einsum("ik,ik->i", beta[flat_idx], mult)


def loglik_grad(base, flat_idx, mult, beta, successes, trials):
    """Binomial log-likelihood (no binomial coefficient) and its gradients.

    Returns ``(loglik, resid, grad_beta)`` with ``resid = s - n * expit(eta)``,
    the derivative of the log-likelihood with respect to each cell's linear
    predictor.
    """
    eta = linear_predictor(base, flat_idx, mult, beta)
    s = successes.astype(np.float64)
    f = trials.astype(np.float64) - s
    # log expit(x) = -log(1 + exp(-x)), evaluated without overflow
    ll = -(s @ np.logaddexp(0.0, -eta)) - (f @ np.logaddexp(0.0, eta))
    resid = s - (s + f) * _expit(eta)
    if flat_idx.shape[1] == 0:
        grad_beta = np.zeros(beta.shape[0])
    else:
        grad_beta = np.bincount(
            flat_idx.ravel(),
            weights=(resid[:, None] * mult).ravel(),
            minlength=beta.shape[0],
        )
    return float(ll), resid, grad_beta
