"""Hierarchical binomial logistic model over demographic cells.

The linear predictor for cell ``g`` is

    eta_g = mu + sum_j fixed_j * x_gj + sum_k beta^k[group_k(g)] * m_gk

where ``m_gk`` is 1 for a varying intercept column and the covariate value for
a varying slope column.  Each effect column ``k`` has prior
``beta^k ~ Normal(0, tau_k)`` with ``tau_k = sqrt(share_k * K) * scale``,
``shares ~ Dirichlet(1)`` and ``scale ~ Gamma(1, 1)``; ``mu`` and the fixed
slopes have flat priors.

Everything is evaluated in unconstrained coordinates: shares through a
stick-breaking transform and the scale through its logarithm, with the
log-Jacobians of both included.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .errors import DataError, DimensionError, FormulaError
from .formula import Formula
from .frame import FactorSpec, Frame, _read_text, interaction_index

LOG_2PI = math.log(2.0 * math.pi)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def expit(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def log_expit(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# covariates and data


@dataclass(frozen=True)
class CovariateSpec:
    """A real covariate defined as a function of one factor's level."""

    name: str
    factor: str
    values: Mapping[str, float]
    center: float = 0.0

    @classmethod
    def from_config(cls, name, cfg) -> "CovariateSpec":
        if not isinstance(cfg, Mapping) or "factor" not in cfg or "values" not in cfg:
            raise DataError(f"covariate {name!r} needs 'factor' and 'values'")
        return cls(
            name,
            cfg["factor"],
            {str(k): float(v) for k, v in cfg["values"].items()},
            float(cfg.get("center", 0.0)),
        )

    def evaluate(self, keys: np.ndarray, specs: Sequence[FactorSpec]) -> np.ndarray:
        pos = [s.name for s in specs].index(self.factor)
        spec = specs[pos]
        missing = [lv for lv in spec.levels if lv not in self.values]
        table = np.array([self.values.get(lv, np.nan) for lv in spec.levels])
        out = table[keys[:, pos]]
        if np.isnan(out).any():
            raise DataError(f"covariate {self.name!r} has no value for levels {missing}")
        return out


@dataclass
class Dataset:
    """Training cells: factor level indices, covariates, successes and trials."""

    factors: tuple[FactorSpec, ...]
    keys: np.ndarray
    successes: np.ndarray
    trials: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.factors = tuple(self.factors)
        self.keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, len(self.factors))
        self.successes = np.asarray(self.successes, dtype=np.int64).reshape(-1)
        self.trials = np.asarray(self.trials, dtype=np.int64).reshape(-1)
        n = self.keys.shape[0]
        if self.successes.shape[0] != n or self.trials.shape[0] != n:
            raise DataError("dataset column lengths differ")
        if n and (self.successes.min() < 0 or (self.successes > self.trials).any()):
            raise DataError("dataset needs 0 <= successes <= trials")
        for j, spec in enumerate(self.factors):
            col = self.keys[:, j]
            if n and (col.min() < 0 or col.max() >= spec.n_levels):
                raise DataError(f"level index out of range for factor {spec.name!r}")
        self.covariates = {
            k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in self.covariates.items()
        }
        for k, v in self.covariates.items():
            if v.shape[0] != n:
                raise DataError(f"covariate {k!r} length differs from dataset")

    def __len__(self):
        return self.keys.shape[0]

    @property
    def total_trials(self) -> int:
        return int(self.trials.sum())

    @property
    def total_successes(self) -> int:
        return int(self.successes.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cov = sorted(self.covariates)
        w.writerow([f.name for f in self.factors] + cov + ["successes", "trials"])
        for i in range(len(self)):
            labels = [f.levels[k] for f, k in zip(self.factors, self.keys[i])]
            w.writerow(
                labels
                + [repr(float(self.covariates[c][i])) for c in cov]
                + [int(self.successes[i]), int(self.trials[i])]
            )
        return buf.getvalue()


def build_dataset(specs: Sequence[FactorSpec], rows, covariate_columns=()) -> Dataset:
    """Build a :class:`Dataset` from mapping rows (factor labels, covariates,
    ``successes`` and ``trials``)."""
    specs = tuple(specs)
    keys, succ, trials = [], [], []
    cov = {c: [] for c in covariate_columns}
    for row in rows:
        try:
            keys.append([s.index(str(row[s.name])) for s in specs])
            s_val, t_val = float(row["successes"]), float(row["trials"])
            for c in cov:
                cov[c].append(float(row[c]))
        except KeyError as exc:
            raise DataError(f"malformed dataset row, missing column {exc}") from None
        except ValueError:
            raise DataError(f"malformed dataset row {dict(row)!r}") from None
        if s_val != int(s_val) or t_val != int(t_val):
            raise DataError("successes and trials must be whole numbers")
        succ.append(int(s_val))
        trials.append(int(t_val))
    return Dataset(specs, np.array(keys, dtype=np.int64), succ, trials, cov)


def read_dataset_csv(path_or_text, specs: Sequence[FactorSpec], response: Sequence[str] | None = None) -> Dataset:
    """Read a dataset file.

    Counts come from ``successes`` and ``trials`` columns, or, when
    ``response`` names a (successes, failures) pair present in the header,
    from those two columns.  Any other non-factor column is a covariate.
    """
    reader = csv.DictReader(io.StringIO(_read_text(path_or_text)))
    header = reader.fieldnames or []
    names = {s.name for s in specs}
    rows = reader
    counts = ("successes", "trials")
    if response is not None and all(c in header for c in response):
        counts = tuple(response)
        rows = [_pair_to_trials(r, *response) for r in reader]
    missing = [c for c in [*names, *counts] if c not in header]
    if missing:
        raise DataError(f"dataset file is missing columns {missing}")
    extra = [c for c in header if c not in names and c not in counts]
    return build_dataset(specs, rows, extra)


def _pair_to_trials(row, succ_col, fail_col):
    row = dict(row)
    try:
        s, f = float(row.pop(succ_col)), float(row.pop(fail_col))
    except ValueError:
        raise DataError(f"malformed dataset row {row!r}") from None
    row["successes"], row["trials"] = s, s + f
    return row


# ---------------------------------------------------------------------------
# simplex transform


def stick_breaking(y: np.ndarray):
    """Map ``K-1`` reals to ``log`` of a point on the ``K``-simplex.

    Returns ``(log_x, log_jacobian, z)`` where ``z`` are the break fractions.
    ``y = 0`` maps to the uniform simplex.
    """
    y = np.asarray(y, dtype=np.float64)
    K = y.shape[0] + 1
    a = y - np.log(K - 1.0 - np.arange(K - 1))
    log_z = log_expit(a)
    log_1mz = log_expit(-a)
    log_r = np.concatenate([[0.0], np.cumsum(log_1mz)])
    log_x = np.concatenate([log_r[:-1] + log_z, log_r[-1:]])
    log_j = float(np.sum(log_z + log_1mz + log_r[:-1]))
    return log_x, log_j, np.exp(log_z)


def stick_breaking_grad(z: np.ndarray, g_logx: np.ndarray) -> np.ndarray:
    """Gradient with respect to ``y`` of ``g_logx . log_x(y) + log_jacobian(y)``."""
    K = g_logx.shape[0]
    j = np.arange(K - 1)
    # tail[j] = sum of g_logx[k] for k > j
    tail = np.cumsum(g_logx[::-1])[::-1][1:]
    return g_logx[:-1] * (1.0 - z) - z * tail + (1.0 - 2.0 * z) - z * (K - 2.0 - j)


def simplex_to_unconstrained(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    K = x.shape[0]
    # remaining stick summed from the back: 1 - cumsum cancels once it is small
    tail = np.cumsum(x[::-1])[::-1]
    with np.errstate(divide="ignore"):
        return np.log(x[:-1]) - np.log(tail[1:]) + np.log(K - 1.0 - np.arange(K - 1))


def effect_scale(shares, scale: float, n_terms: int) -> np.ndarray:
    """Prior standard deviation of each effect column: ``sqrt(share * n) * scale``."""
    shares = np.asarray(shares, dtype=np.float64)
    return np.sqrt(shares * n_terms) * scale


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamVector:
    mu: float
    fixed: np.ndarray
    effects: list[np.ndarray]
    shares: np.ndarray
    scale: float

    def tau(self) -> np.ndarray:
        return effect_scale(self.shares, self.scale, len(self.shares))


@dataclass(frozen=True)
class EffectColumn:
    label: str
    term: int
    positions: tuple[int, ...]
    radices: tuple[int, ...]
    covariate: str | None
    offset: int

    @property
    def cardinality(self) -> int:
        return int(np.prod(self.radices))


class Layout:
    """Positions of each parameter block in the unconstrained vector."""

    def __init__(self, has_mu: bool, fixed: Sequence[str], columns: Sequence[EffectColumn]):
        self.has_mu = has_mu
        self.fixed_names = tuple(fixed)
        self.columns = tuple(columns)
        self.n_fixed = len(self.fixed_names)
        self.n_effects = sum(c.cardinality for c in self.columns)
        self.K = len(self.columns)
        o = 0
        self.mu = slice(o, o + int(has_mu)); o += int(has_mu)
        self.fixed = slice(o, o + self.n_fixed); o += self.n_fixed
        self.effects = slice(o, o + self.n_effects); o += self.n_effects
        n_stick = self.K - 1 if self.K else 0
        self.stick = slice(o, o + n_stick); o += n_stick
        self.log_scale = slice(o, o + (1 if self.K else 0)); o += 1 if self.K else 0
        self.size = o
        sizes = np.array([c.cardinality for c in self.columns], dtype=np.int64)
        self.column_of_effect = np.repeat(np.arange(self.K), sizes)
        self.sizes = sizes

    def names(self) -> list[str]:
        out = ["mu"] if self.has_mu else []
        out += [f"fixed[{n}]" for n in self.fixed_names]
        for c in self.columns:
            out += [f"effect[{c.label}][{i}]" for i in range(c.cardinality)]
        out += [f"stick[{i}]" for i in range(self.stick.stop - self.stick.start)]
        if self.K:
            out.append("log_scale")
        return out

    def constrain(self, u) -> ParamVector:
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.size,):
            raise DimensionError(f"expected {self.size} parameters, got {u.shape}")
        beta = u[self.effects]
        effects = [beta[c.offset : c.offset + c.cardinality].copy() for c in self.columns]
        if self.K:
            log_x, _, _ = stick_breaking(u[self.stick])
            shares, scale = np.exp(log_x), float(np.exp(u[self.log_scale][0]))
        else:
            shares, scale = np.zeros(0), 1.0
        return ParamVector(
            float(u[self.mu][0]) if self.has_mu else 0.0,
            u[self.fixed].copy(),
            effects,
            shares,
            scale,
        )

    def unconstrain(self, p: ParamVector) -> np.ndarray:
        u = np.zeros(self.size)
        if self.has_mu:
            u[self.mu] = p.mu
        u[self.fixed] = p.fixed
        if len(p.effects) != self.K:
            raise DimensionError("effect column count mismatch")
        for c, b in zip(self.columns, p.effects):
            if len(b) != c.cardinality:
                raise DimensionError(f"effect vector for {c.label!r} has wrong length")
            u[self.effects.start + c.offset : self.effects.start + c.offset + c.cardinality] = b
        if self.K:
            if p.scale <= 0:
                raise DataError("scale must be positive")
            u[self.stick] = simplex_to_unconstrained(p.shares)
            u[self.log_scale] = math.log(p.scale)
        return u


@dataclass(frozen=True)
class Design:
    base_X: np.ndarray
    flat_idx: np.ndarray
    mult: np.ndarray


class Model:
    """A formula compiled against factor specs and covariate definitions."""

    def __init__(
        self,
        formula: Formula,
        specs: Sequence[FactorSpec],
        covariates: Mapping[str, CovariateSpec] | None = None,
        center_covariates: bool = True,
    ):
        self.formula = formula
        self.specs = tuple(specs)
        self.covariates = dict(covariates or {})
        self.center_covariates = center_covariates
        names = [s.name for s in self.specs]
        cols = []
        offset = 0
        for ti, term in enumerate(formula.varying):
            for g in term.grouping:
                if g not in names:
                    raise FormulaError(f"unknown factor {g!r} in {term.render()}")
            pos = tuple(names.index(g) for g in term.grouping)
            rad = tuple(self.specs[p].n_levels for p in pos)
            for cov in term.columns:
                label = term.group_label if cov is None else f"{cov}|{term.group_label}"
                col = EffectColumn(label, ti, pos, rad, cov, offset)
                cols.append(col)
                offset += col.cardinality
        self.layout = Layout(formula.has_intercept, formula.covariates, cols)

    # -- design -------------------------------------------------------------

    def covariate_values(self, keys, supplied: Mapping[str, np.ndarray] | None = None):
        supplied = supplied or {}
        out = {}
        for name in self.formula.covariates:
            spec = self.covariates.get(name)
            if name in supplied:
                v = np.asarray(supplied[name], dtype=np.float64)
            elif spec is not None:
                v = spec.evaluate(keys, self.specs)
            else:
                raise DataError(f"no values or definition for covariate {name!r}")
            if self.center_covariates and spec is not None and spec.center:
                v = v - spec.center
            out[name] = v
        return out

    def design(self, keys, supplied_covariates=None) -> Design:
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, len(self.specs))
        n = keys.shape[0]
        cov = self.covariate_values(keys, supplied_covariates)
        X = np.column_stack([cov[c] for c in self.layout.fixed_names]) if self.layout.n_fixed else np.zeros((n, 0))
        K = self.layout.K
        flat_idx = np.zeros((n, K), dtype=np.int64)
        mult = np.ones((n, K))
        for k, c in enumerate(self.layout.columns):
            flat_idx[:, k] = c.offset + interaction_index(keys[:, list(c.positions)], c.radices)
            if c.covariate is not None:
                mult[:, k] = cov[c.covariate]
        return Design(np.ascontiguousarray(X), flat_idx, mult)

    def frame_design(self, frame: Frame) -> Design:
        if tuple(frame.factors) != self.specs:
            missing = [g for g in self.formula.grouping_factors if g not in frame.factor_names]
            if missing:
                raise DataError(f"frame lacks grouping factors {missing}")
            pos = [frame.factor_position(s.name) for s in self.specs]
            return self.design(frame.keys[:, pos])
        return self.design(frame.keys)

    def bind(self, data: Dataset) -> "Posterior":
        if tuple(data.factors) != self.specs:
            raise DataError("dataset factors differ from model factors")
        return Posterior(self, data)

    # -- prediction ---------------------------------------------------------

    def linear_predictor(self, u, design: Design) -> np.ndarray:
        lay = self.layout
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (lay.size,):
            raise DimensionError(f"expected {lay.size} parameters, got {u.shape}")
        base = design.base_X @ u[lay.fixed] + (u[lay.mu][0] if lay.has_mu else 0.0)
        return kernels.linear_predictor(base, design.flat_idx, design.mult, u[lay.effects])

    def predict(self, u, design: Design) -> np.ndarray:
        return _clip_prob(expit(self.linear_predictor(u, design)))

    def initial_point(self, data: Dataset) -> np.ndarray:
        u = np.zeros(self.layout.size)
        if self.layout.has_mu and data.total_trials > 0:
            rate = (data.total_successes + 0.5) / (data.total_trials + 1.0)
            u[self.layout.mu] = logit(rate)
        return u


def _clip_prob(p):
    lo = np.finfo(np.float64).tiny
    return np.clip(p, lo, np.nextafter(1.0, 0.0))


class Posterior:
    """Log posterior density of a model bound to a dataset."""

    def __init__(self, model: Model, data: Dataset):
        self.model = model
        self.data = data
        self.layout = model.layout
        self.design = model.design(data.keys, data.covariates)
        self.dim = self.layout.size
        self._log_dirichlet_norm = math.lgamma(self.layout.K) if self.layout.K else 0.0

    def _check(self, u):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.dim,):
            raise DimensionError(f"expected {self.dim} parameters, got {u.shape}")
        return u

    def value_and_grad(self, u):
        u = self._check(u)
        lay, d = self.layout, self.design
        grad = np.zeros(self.dim)
        mu = u[lay.mu][0] if lay.has_mu else 0.0
        beta = u[lay.effects]
        base = d.base_X @ u[lay.fixed] + mu
        ll, resid, g_beta = kernels.loglik_grad(
            base, d.flat_idx, d.mult, beta, self.data.successes, self.data.trials
        )
        if lay.has_mu:
            grad[lay.mu] = resid.sum()
        grad[lay.fixed] = d.base_X.T @ resid
        value = ll
        if lay.K:
            K = lay.K
            log_x, log_j, z = stick_breaking(u[lay.stick])
            log_s = u[lay.log_scale][0]
            log_tau = 0.5 * log_x + 0.5 * math.log(K) + log_s
            inv_tau2 = np.exp(-2.0 * log_tau)
            sq = np.bincount(lay.column_of_effect, weights=beta * beta, minlength=K)
            n = lay.sizes
            value += float(np.sum(-n * (0.5 * LOG_2PI + log_tau) - 0.5 * sq * inv_tau2))
            value += self._log_dirichlet_norm + log_j
            value += -math.exp(log_s) + log_s
            # d(prior)/d(log tau_k)
            q = -n + sq * inv_tau2
            grad[lay.effects] = g_beta - beta * inv_tau2[lay.column_of_effect]
            grad[lay.stick] = stick_breaking_grad(z, 0.5 * q)
            grad[lay.log_scale] = q.sum() - math.exp(log_s) + 1.0
        return float(value), grad

    def log_posterior(self, u) -> float:
        return self.value_and_grad(u)[0]

    def grad(self, u) -> np.ndarray:
        return self.value_and_grad(u)[1]

    # -- non-centred coordinates -------------------------------------------
    #
    # w equals u except that the effect block holds z = beta / tau.  The
    # density of w is the posterior times the Jacobian prod_k tau_k^n_k, which
    # removes the unbounded growth of the centred density as tau_k -> 0.

    def _log_tau(self, w):
        lay = self.layout
        log_x, log_j, zf = stick_breaking(w[lay.stick])
        log_tau = 0.5 * log_x + 0.5 * math.log(lay.K) + w[lay.log_scale][0]
        return log_tau, log_j, zf

    def to_centered(self, w) -> np.ndarray:
        w = self._check(w)
        lay = self.layout
        u = w.copy()
        if lay.K:
            log_tau, _, _ = self._log_tau(w)
            u[lay.effects] = w[lay.effects] * np.exp(log_tau)[lay.column_of_effect]
        return u

    def to_noncentered(self, u) -> np.ndarray:
        u = self._check(u)
        lay = self.layout
        w = u.copy()
        if lay.K:
            log_tau, _, _ = self._log_tau(u)
            w[lay.effects] = u[lay.effects] * np.exp(-log_tau)[lay.column_of_effect]
        return w

    def noncentered_value_and_grad(self, w):
        w = self._check(w)
        lay = self.layout
        if not lay.K:
            return self.value_and_grad(w)
        d = self.design
        grad = np.zeros(self.dim)
        z = w[lay.effects]
        log_tau, log_j, zf = self._log_tau(w)
        tau = np.exp(log_tau)[lay.column_of_effect]
        beta = tau * z
        mu = w[lay.mu][0] if lay.has_mu else 0.0
        base = d.base_X @ w[lay.fixed] + mu
        ll, resid, g_beta = kernels.loglik_grad(
            base, d.flat_idx, d.mult, beta, self.data.successes, self.data.trials
        )
        if lay.has_mu:
            grad[lay.mu] = resid.sum()
        grad[lay.fixed] = d.base_X.T @ resid
        log_s = w[lay.log_scale][0]
        value = ll - 0.5 * LOG_2PI * lay.n_effects - 0.5 * float(z @ z)
        value += self._log_dirichlet_norm + log_j - math.exp(log_s) + log_s
        # d(value)/d(log tau_k) through beta = tau * z
        q = np.bincount(lay.column_of_effect, weights=g_beta * beta, minlength=lay.K)
        grad[lay.effects] = g_beta * tau - z
        grad[lay.stick] = stick_breaking_grad(zf, 0.5 * q)
        grad[lay.log_scale] = q.sum() - math.exp(log_s) + 1.0
        return float(value), grad


def _posterior_for(data, model, formula=None) -> Posterior:
    if formula is not None and formula != model.formula:
        raise DimensionError("formula does not match the model")
    return model.bind(data) if isinstance(data, Dataset) else data


def log_posterior(u, data, model: Model, formula: Formula | None = None) -> float:
    return _posterior_for(data, model, formula).log_posterior(u)


def grad_log_posterior(u, data, model: Model, formula: Formula | None = None) -> np.ndarray:
    return _posterior_for(data, model, formula).grad(u)


def predict_prob(p: ParamVector, assignments: Sequence[int], covariates: Mapping[str, float], model: Model) -> float:
    """Probability for one cell given per-column group indices.

    ``assignments[k]`` is the group index within effect column ``k`` (slope
    and intercept columns of the same term share the same group index).
    """
    lay = model.layout
    if len(assignments) != lay.K:
        raise DimensionError(f"expected {lay.K} assignments, got {len(assignments)}")
    eta = p.mu if lay.has_mu else 0.0
    for name, coef in zip(lay.fixed_names, p.fixed):
        eta += coef * covariates[name]
    for c, g, b in zip(lay.columns, assignments, p.effects):
        if not 0 <= g < c.cardinality:
            raise DataError(f"group index {g} out of range for {c.label!r}")
        eta += b[g] * (1.0 if c.covariate is None else covariates[c.covariate])
    return float(_clip_prob(expit(eta)))
