"""Synthetic electorates with known truth, and polls drawn from them.

Selection bias enters only through how often each cell is sampled; within a
cell every respondent's outcome is an independent Bernoulli draw with the
cell's true probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .formula import Formula, parse_formula
from .frame import FactorSpec, Frame, load_factor_specs
from .model import CovariateSpec, Dataset, Model, ParamVector, effect_scale
from .poststrat import CellPredictions, StateTargets, aggregate


@dataclass
class SynthSpec:
    factors: Sequence[FactorSpec]
    formula: str | Formula
    turnout_formula: str | Formula | None = None
    truth_seed: int = 0
    population_range: tuple[int, int] = (100, 1000)
    poll_size: int = 10_000
    turnout_poll_size: int | None = None
    bias: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    intercept: float = 0.0
    turnout_intercept: float = 0.5
    fixed: Mapping[str, float] = field(default_factory=dict)
    covariates: Mapping[str, CovariateSpec] = field(default_factory=dict)
    cell_fraction: float = 1.0

    def __post_init__(self):
        self.factors = tuple(self.factors)
        if isinstance(self.formula, str):
            self.formula = parse_formula(self.formula)
        if self.turnout_formula is None:
            self.turnout_formula = self.formula
        elif isinstance(self.turnout_formula, str):
            self.turnout_formula = parse_formula(self.turnout_formula)
        lo, hi = self.population_range
        if lo < 1 or hi < lo:
            raise DataError("population range must be positive and ordered")
        if self.poll_size < 1:
            raise DataError("poll size must be at least 1")
        if not 0 < self.cell_fraction <= 1:
            raise DataError("cell_fraction must lie in (0, 1]")
        names = {f.name: f for f in self.factors}
        for fac, levels in self.bias.items():
            if fac not in names:
                raise DataError(f"bias given for unknown factor {fac!r}")
            for lv in levels:
                names[fac].index(lv)

    @classmethod
    def from_config(cls, cfg: Mapping) -> "SynthSpec":
        cfg = dict(cfg)
        factors = load_factor_specs(cfg.pop("factors"))
        cov = {
            k: CovariateSpec.from_config(k, v) for k, v in (cfg.pop("covariates", None) or {}).items()
        }
        if "population_range" in cfg:
            cfg["population_range"] = tuple(int(v) for v in cfg["population_range"])
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise DataError(f"unknown synth keys {sorted(unknown)}")
        return cls(factors=factors, covariates=cov, **cfg)

    def model(self, kind: str = "preference", center_covariates: bool = True) -> Model:
        f = self.formula if kind == "preference" else self.turnout_formula
        return Model(f, self.factors, self.covariates, center_covariates)


@dataclass
class TruthBundle:
    frame: Frame
    params_preference: ParamVector
    params_turnout: ParamVector
    preference: np.ndarray
    turnout: np.ndarray
    u_preference: np.ndarray = field(repr=False, default=None)
    u_turnout: np.ndarray = field(repr=False, default=None)

    @property
    def params(self) -> ParamVector:
        return self.params_preference

    def predictions(self) -> CellPredictions:
        return CellPredictions(self.frame, self.turnout, self.preference)


def _draw_params(model: Model, rng, intercept: float, fixed: Mapping[str, float]):
    lay = model.layout
    K = lay.K
    if K:
        shares = rng.dirichlet(np.ones(K))
        scale = float(rng.gamma(1.0, 1.0))
        tau = effect_scale(shares, scale, K)
        effects = [rng.normal(0.0, t, size=c.cardinality) for c, t in zip(lay.columns, tau)]
    else:
        shares, scale, effects = np.zeros(0), 1.0, []
    # tiny shares can underflow the stick-breaking inverse
    shares = np.clip(shares, 1e-300, None)
    shares = shares / shares.sum()
    p = ParamVector(
        intercept,
        np.array([fixed.get(n, 0.0) for n in lay.fixed_names], dtype=np.float64),
        effects,
        shares,
        scale,
    )
    return p, lay.unconstrain(p)


def simulate_electorate(spec: SynthSpec, seed: int | None = None) -> TruthBundle:
    """Draw a frame and true parameters for both models from their priors."""
    rng = np.random.default_rng(spec.truth_seed if seed is None else seed)
    radices = [f.n_levels for f in spec.factors]
    full = np.array(np.unravel_index(np.arange(int(np.prod(radices))), radices)).T
    if spec.cell_fraction < 1:
        keep = rng.uniform(size=len(full)) < spec.cell_fraction
        keep[rng.integers(len(full))] = True
        full = full[keep]
    lo, hi = spec.population_range
    pop = rng.integers(lo, hi + 1, size=len(full))
    frame = Frame(spec.factors, full, pop)
    out = {}
    for kind, intercept in (("preference", spec.intercept), ("turnout", spec.turnout_intercept)):
        model = spec.model(kind)
        p, u = _draw_params(model, rng, intercept, spec.fixed)
        out[kind] = (p, u, model.predict(u, model.frame_design(frame)))
    return TruthBundle(
        frame,
        out["preference"][0],
        out["turnout"][0],
        out["preference"][2],
        out["turnout"][2],
        out["preference"][1],
        out["turnout"][1],
    )


def selection_weights(bundle: TruthBundle, spec: SynthSpec) -> np.ndarray:
    """Relative sampling weight of each cell: ``N * exp(bias score)``."""
    frame = bundle.frame
    score = np.zeros(len(frame))
    for fac, levels in spec.bias.items():
        f = frame.factor(fac)
        table = np.array([float(levels.get(lv, 0.0)) for lv in f.levels])
        score += table[frame.column(fac)]
    return frame.population * np.exp(score)


def simulate_poll(bundle: TruthBundle, spec: SynthSpec, seed: int, kind: str = "preference") -> Dataset:
    """Sample respondents across cells, then outcomes within each cell.

    Exactly ``poll_size`` respondents (``turnout_poll_size`` for turnout) are
    drawn; cells with no respondents are left out of the dataset.
    """
    if kind not in ("preference", "turnout"):
        raise ValueError(f"unknown poll kind {kind!r}")
    rng = np.random.default_rng(seed)
    n = spec.poll_size if kind == "preference" else (spec.turnout_poll_size or spec.poll_size)
    w = selection_weights(bundle, spec)
    counts = rng.multinomial(n, w / w.sum())
    prob = bundle.preference if kind == "preference" else bundle.turnout
    succ = rng.binomial(counts, prob)
    keep = counts > 0
    return Dataset(bundle.frame.factors, bundle.frame.keys[keep], succ[keep], counts[keep])


def state_targets(bundle: TruthBundle, state_factor: str = "state") -> StateTargets:
    """True per-state turnout and voter-weighted share, usable as calibration targets."""
    preds = bundle.predictions()
    t = aggregate(preds, bundle.frame, (state_factor,), "voters")
    out = StateTargets()
    for i, (s,) in enumerate(t.labels):
        out.share[s] = float(t.vote_share[i])
        out.turnout[s] = float(t.turnout_rate[i])
    return out


def recovery_report(truth: TruthBundle, est: CellPredictions) -> dict[str, float]:
    """RMSE and max absolute error of the estimated cell probabilities."""
    if not (est.frame is truth.frame or est.frame == truth.frame):
        raise DataError("estimate was made on a different frame")
    w = truth.frame.population.astype(np.float64)
    out = {}
    for name, true, got in (
        ("preference", truth.preference, est.preference),
        ("turnout", truth.turnout, est.turnout),
    ):
        if got is None:
            continue
        err = got - true
        out[f"{name}_rmse"] = math.sqrt(float(np.mean(err**2)))
        out[f"{name}_max_abs"] = float(np.max(np.abs(err)))
        out[f"{name}_weighted_rmse"] = math.sqrt(float(np.sum(w * err**2) / w.sum()))
    return out
