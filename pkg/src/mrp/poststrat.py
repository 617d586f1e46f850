"""Cell predictions, expected vote counts, state-margin calibration and
aggregation along demographic axes."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, NumericError
from .frame import Frame, _read_text
from .infer import FitResult, SampleSet, mean_cell_probabilities
from .model import Model, expit, logit

WEIGHTINGS = ("population", "voters")


@dataclass
class CellPredictions:
    """Per-cell turnout probability and/or preference probability among voters."""

    frame: Frame
    turnout: np.ndarray | None = None
    preference: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.frame)
        for name in ("turnout", "preference"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.float64).reshape(-1)
            if v.shape[0] != n:
                raise DataError(f"{name} has {v.shape[0]} values for {n} cells")
            if np.any(v < 0) or np.any(v > 1) or np.any(np.isnan(v)):
                raise DataError(f"{name} probabilities must lie in [0, 1]")
            setattr(self, name, v)

    @property
    def expected_voters(self) -> np.ndarray | None:
        if self.turnout is None:
            return None
        return self.frame.population * self.turnout

    @property
    def expected_votes(self) -> np.ndarray | None:
        if self.turnout is None or self.preference is None:
            return None
        return self.expected_voters * self.preference

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["population"]
        if self.turnout is not None:
            cols += ["turnout", "expected_voters"]
        if self.preference is not None:
            cols += ["preference"]
        if self.expected_votes is not None:
            cols += ["expected_votes"]
        w.writerow(self.frame.factor_names + cols)
        ev, evotes = self.expected_voters, self.expected_votes
        for i in range(len(self.frame)):
            row = list(self.frame.labels(i)) + [int(self.frame.population[i])]
            if self.turnout is not None:
                row += [_fmt(self.turnout[i]), _fmt(ev[i])]
            if self.preference is not None:
                row += [_fmt(self.preference[i])]
            if evotes is not None:
                row += [_fmt(evotes[i])]
            w.writerow(row)
        return buf.getvalue()


def _fmt(x) -> str:
    return repr(float(x))


def read_predictions_csv(path_or_text, frame: Frame) -> CellPredictions:
    reader = csv.DictReader(io.StringIO(_read_text(path_or_text)))
    cols = {"turnout": [], "preference": []}
    header = reader.fieldnames or []
    order = []
    for row in reader:
        try:
            key = tuple(f.index(row[f.name]) for f in frame.factors)
        except KeyError as exc:
            raise DataError(f"predictions file is missing column {exc}") from None
        if key not in frame.index:
            raise DataError(f"prediction row {key} is not a frame cell")
        order.append(frame.index[key])
        for c in cols:
            if c in header:
                cols[c].append(float(row[c]))
    if sorted(order) != list(range(len(frame))):
        raise DataError("predictions do not cover the frame cells exactly once")
    out = {}
    for c, vals in cols.items():
        if c in header:
            arr = np.empty(len(frame))
            arr[order] = vals
            out[c] = arr
    return CellPredictions(frame, out.get("turnout"), out.get("preference"))


def predict_cells(fit, frame: Frame, model: Model, kind: str) -> CellPredictions:
    """Per-cell probabilities from a MAP fit, a sample set, or a raw vector.

    Groups never seen in training keep whatever value the fit holds for them,
    which at the mode is their prior mean of zero.
    """
    if kind not in ("turnout", "preference"):
        raise ValueError(f"kind must be 'turnout' or 'preference', not {kind!r}")
    design = model.frame_design(frame)
    if isinstance(fit, SampleSet):
        p = mean_cell_probabilities(fit, model, design)
    else:
        u = fit.mode if isinstance(fit, FitResult) else np.asarray(fit, dtype=np.float64)
        p = model.predict(u, design)
    return CellPredictions(frame, **{kind: p})


def _same_frame(a: Frame, b: Frame) -> bool:
    return a is b or a == b


def combine(turnout: CellPredictions, preference: CellPredictions, frame: Frame) -> CellPredictions:
    """Join turnout and preference predictions for the same frame."""
    if not (_same_frame(turnout.frame, frame) and _same_frame(preference.frame, frame)):
        raise DataError("predictions were made on a different frame")
    if turnout.turnout is None or preference.preference is None:
        raise DataError("combine needs turnout and preference predictions")
    return CellPredictions(frame, turnout.turnout, preference.preference)


# ---------------------------------------------------------------------------
# aggregation


def _group_cells(frame: Frame, by: Sequence[str]):
    """Yield ``(labels, cell_indices)`` in lexicographic level order."""
    pos = [frame.factor_position(a) for a in by]
    if not pos:
        yield (), np.arange(len(frame))
        return
    sub = frame.keys[:, pos]
    order = np.lexsort(sub.T[::-1])
    sub_sorted = sub[order]
    if len(order) == 0:
        return
    breaks = np.flatnonzero(np.any(np.diff(sub_sorted, axis=0) != 0, axis=1)) + 1
    for chunk in np.split(np.arange(len(order)), breaks):
        idx = np.sort(order[chunk])
        key = sub_sorted[chunk[0]]
        yield tuple(frame.factors[p].levels[k] for p, k in zip(pos, key)), idx


@dataclass
class AggregateTable:
    """Weighted sums and rates for each combination of the chosen axes.

    ``pref_mass`` holds the numerator of the vote share under the table's
    weighting (``sum N * alpha`` or ``sum N * phi * alpha``) and
    ``weight_mass`` its denominator.
    """

    axes: tuple[str, ...]
    weighting: str
    labels: list[tuple[str, ...]]
    population: np.ndarray
    expected_voters: np.ndarray | None
    expected_votes: np.ndarray | None
    pref_mass: np.ndarray | None
    weight_mass: np.ndarray

    @property
    def turnout_rate(self):
        if self.expected_voters is None:
            return None
        return self.expected_voters / self.population

    @property
    def vote_share(self):
        if self.pref_mass is None:
            return None
        return self.pref_mass / self.weight_mass

    def row(self, labels) -> int:
        return self.labels.index(tuple(labels))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.axes) + ["population", "expected_voters", "expected_votes", "turnout_rate", "vote_share"])
        tr, vs = self.turnout_rate, self.vote_share
        for i, lab in enumerate(self.labels):
            w.writerow(
                list(lab)
                + [
                    int(self.population[i]),
                    _fmt(self.expected_voters[i]) if self.expected_voters is not None else "",
                    _fmt(self.expected_votes[i]) if self.expected_votes is not None else "",
                    _fmt(tr[i]) if tr is not None else "",
                    _fmt(vs[i]) if vs is not None else "",
                ]
            )
        return buf.getvalue()


def aggregate(
    preds: CellPredictions,
    frame: Frame,
    by: Sequence[str] = (),
    weighting: str = "population",
) -> AggregateTable:
    """Group cells by ``by`` and compute weighted totals and shares.

    ``population`` weighting gives the share ``sum N a / sum N``; ``voters``
    weighting gives ``sum N p a / sum N p`` (the share among voters).  Sums
    are exactly rounded (``math.fsum``) over cells in frame order.
    """
    if weighting not in WEIGHTINGS:
        raise DataError(f"unknown weighting {weighting!r}")
    if not _same_frame(preds.frame, frame):
        raise DataError("predictions were made on a different frame")
    by = tuple(by)
    for a in by:
        frame.factor_position(a)
    if len(set(by)) != len(by):
        raise DataError("repeated aggregation axis")
    if weighting == "voters" and preds.turnout is None:
        raise DataError("voter weighting needs turnout predictions")
    N = frame.population.astype(np.float64)
    ev, evotes = preds.expected_voters, preds.expected_votes
    weight = ev if weighting == "voters" else N
    if preds.preference is None:
        pref = None
    elif weighting == "voters":
        pref = evotes
    else:
        pref = N * preds.preference
    labels, pop, sv, svotes, sp, sw = [], [], [], [], [], []
    for lab, idx in _group_cells(frame, by):
        labels.append(lab)
        pop.append(int(frame.population[idx].sum()))
        sw.append(math.fsum(weight[idx]))
        if ev is not None:
            sv.append(math.fsum(ev[idx]))
        if evotes is not None:
            svotes.append(math.fsum(evotes[idx]))
        if pref is not None:
            sp.append(math.fsum(pref[idx]))
    arr = lambda xs, cond: np.array(xs, dtype=np.float64) if cond else None  # noqa: E731
    return AggregateTable(
        by,
        weighting,
        labels,
        np.array(pop, dtype=np.int64),
        arr(sv, ev is not None),
        arr(svotes, evotes is not None),
        arr(sp, pref is not None),
        np.array(sw, dtype=np.float64),
    )


@dataclass
class GapTable:
    axes: tuple[str, ...]
    labels: list[tuple[str, ...]]
    male: np.ndarray
    female: np.ndarray
    quantity: str = "vote_share"

    @property
    def gap(self) -> np.ndarray:
        return self.male - self.female

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.axes) + [f"male_{self.quantity}", f"female_{self.quantity}", "gap"])
        for i, lab in enumerate(self.labels):
            w.writerow(list(lab) + [_fmt(self.male[i]), _fmt(self.female[i]), _fmt(self.gap[i])])
        return buf.getvalue()


def gender_gap(
    preds: CellPredictions,
    frame: Frame,
    by: Sequence[str] = (),
    weighting: str = "voters",
    factor: str = "gender",
    male: str = "Male",
    female: str = "Female",
    quantity: str = "vote_share",
) -> GapTable:
    """Male share minus female share within each row of ``by``.

    ``quantity="turnout_rate"`` gives the turnout gender gap instead.  Rows
    where either gender has no cells are omitted.
    """
    try:
        spec = frame.factor(factor)
    except DataError:
        raise DataError(f"frame has no {factor!r} factor") from None
    if factor in by:
        raise DataError("gender gap axes must not include the gender factor")
    for lv in (male, female):
        spec.index(lv)
    table = aggregate(preds, frame, tuple(by) + (factor,), weighting)
    values = getattr(table, quantity)
    if values is None:
        raise DataError(f"predictions lack what is needed for {quantity}")
    found = {lab: values[i] for i, lab in enumerate(table.labels)}
    labels, m, f = [], [], []
    seen = []
    for lab in table.labels:
        if lab[:-1] not in seen:
            seen.append(lab[:-1])
    for row in seen:
        if row + (male,) in found and row + (female,) in found:
            labels.append(row)
            m.append(found[row + (male,)])
            f.append(found[row + (female,)])
    return GapTable(tuple(by), labels, np.array(m), np.array(f), quantity)


# ---------------------------------------------------------------------------
# calibration to known state outcomes


@dataclass
class StateTargets:
    share: dict[str, float] = field(default_factory=dict)
    turnout: dict[str, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state", "two_party_share", "turnout_rate"])
        for s in sorted(set(self.share) | set(self.turnout)):
            w.writerow([
                s,
                _fmt(self.share[s]) if s in self.share else "",
                _fmt(self.turnout[s]) if s in self.turnout else "",
            ])
        return buf.getvalue()


def read_targets_csv(path_or_text) -> StateTargets:
    reader = csv.DictReader(io.StringIO(_read_text(path_or_text)))
    header = reader.fieldnames or []
    if "state" not in header:
        raise DataError("targets file needs a 'state' column")
    t = StateTargets()
    for row in reader:
        s = row["state"]
        for col, dest in (("two_party_share", t.share), ("turnout_rate", t.turnout)):
            raw = (row.get(col) or "").strip()
            if raw:
                try:
                    dest[s] = float(raw)
                except ValueError:
                    raise DataError(f"malformed {col} {raw!r} for {s}") from None
    return t


@dataclass
class CalibrationResult:
    states: list[str]
    delta_turnout: np.ndarray
    delta_preference: np.ndarray
    residual_turnout: np.ndarray
    residual_preference: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return np.maximum(self.residual_turnout, self.residual_preference)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state", "delta_turnout", "delta_preference", "residual_turnout", "residual_preference"])
        for i, s in enumerate(self.states):
            w.writerow([s, _fmt(self.delta_turnout[i]), _fmt(self.delta_preference[i]),
                        _fmt(self.residual_turnout[i]), _fmt(self.residual_preference[i])])
        return buf.getvalue()


RESIDUAL_TOL = 1e-8


def _shifted_mean(logits, weights, total, delta):
    return math.fsum(weights * expit(logits + delta)) / total


def solve_shift(logits, weights, target: float, already_tol: float = 1e-12):
    """Find ``delta`` with ``sum w expit(logits + delta) / sum w == target``.

    Bracket ``[-1, 1]`` is doubled until the sign changes, then bisected to
    machine precision.  Returns ``(delta, residual)``.
    """
    if not 0.0 < target < 1.0:
        raise DataError(f"target {target!r} cannot be matched; it must lie in (0, 1)")
    total = math.fsum(weights)
    if total <= 0:
        raise DataError("cannot calibrate a state with zero weight")
    f = lambda d: _shifted_mean(logits, weights, total, d) - target  # noqa: E731
    f0 = f(0.0)
    if abs(f0) <= already_tol:
        return 0.0, abs(f0)
    lo, hi = -1.0, 1.0
    for _ in range(64):
        if f(lo) < 0 < f(hi):
            break
        lo, hi = 2 * lo, 2 * hi
    else:
        raise DataError(f"target {target!r} could not be bracketed")
    best, best_r = 0.0, abs(f0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = f(mid)
        if abs(fm) < best_r:
            best, best_r = mid, abs(fm)
        if fm == 0.0:
            break
        if fm < 0:
            lo = mid
        else:
            hi = mid
    return best, best_r


def calibrate(
    preds: CellPredictions,
    frame: Frame,
    targets: StateTargets,
    state_factor: str = "state",
    turnout: bool = True,
    preference: bool = True,
):
    """Shift each state's cell logits so state aggregates hit the targets.

    Turnout is matched first (population-weighted), then the preference share
    among expected voters.  Without turnout predictions the preference share
    is population-weighted.  Returns ``(calibrated_predictions, result)``.
    """
    if not _same_frame(preds.frame, frame):
        raise DataError("predictions were made on a different frame")
    do_t = turnout and preds.turnout is not None
    do_p = preference and preds.preference is not None
    phi = None if preds.turnout is None else preds.turnout.copy()
    alpha = None if preds.preference is None else preds.preference.copy()
    N = frame.population.astype(np.float64)
    states, dt, dp, rt, rp = [], [], [], [], []
    for (state,), idx in _group_cells(frame, (state_factor,)):
        states.append(state)
        d_t = r_t = d_p = r_p = 0.0
        if do_t:
            if state not in targets.turnout:
                raise DataError(f"no turnout target for state {state!r}")
            lg = logit(phi[idx])
            d_t, r_t = solve_shift(lg, N[idx], targets.turnout[state])
            if d_t != 0.0:
                phi[idx] = expit(lg + d_t)
        if do_p:
            if state not in targets.share:
                raise DataError(f"no vote share target for state {state!r}")
            w = N[idx] * phi[idx] if phi is not None else N[idx]
            lg = logit(alpha[idx])
            d_p, r_p = solve_shift(lg, w, targets.share[state])
            if d_p != 0.0:
                alpha[idx] = expit(lg + d_p)
        for v, dest in ((d_t, dt), (d_p, dp), (r_t, rt), (r_p, rp)):
            dest.append(v)
    result = CalibrationResult(states, np.array(dt), np.array(dp), np.array(rt), np.array(rp))
    if np.any(result.residual >= RESIDUAL_TOL):
        bad = [s for s, r in zip(states, result.residual) if r >= RESIDUAL_TOL]
        raise NumericError(f"calibration residual above {RESIDUAL_TOL} for {bad}")
    return CellPredictions(frame, phi, alpha), result
