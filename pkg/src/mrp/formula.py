"""Parser for the lme4-style mixed-effects formulas used by the models.

Accepted grammar (whitespace and newlines are insignificant)::

    formula := "cbind" "(" ID "," ID ")" "~" term ("+" term)*
    term    := "1" | ID | "(" lhs "|" ID (":" ID)* ")"
    lhs     := ("1" | "0") ["+" ID]

``0 + x`` on the left of a bar (slope without intercept) is accepted so that
every :class:`VaryingTerm` can be rendered and read back.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .errors import FormulaError

_IDENT = re.compile(r"[A-Za-z][A-Za-z0-9_]*")
_SPACE = re.compile(r"\s+")


@dataclass(frozen=True)
class VaryingTerm:
    grouping: tuple[str, ...]
    has_intercept: bool = True
    slopes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "grouping", tuple(self.grouping))
        object.__setattr__(self, "slopes", tuple(self.slopes))
        if not self.grouping:
            raise FormulaError("varying term needs at least one grouping factor")
        if not self.has_intercept and not self.slopes:
            raise FormulaError("varying term needs an intercept or a slope")

    @property
    def group_label(self) -> str:
        return ":".join(self.grouping)

    @property
    def label(self) -> str:
        if self.has_intercept and not self.slopes:
            return self.group_label
        return f"{self._lhs()} | {self.group_label}"

    @property
    def columns(self) -> list[str | None]:
        """Effect columns: ``None`` for the intercept, covariate name for slopes."""
        return ([None] if self.has_intercept else []) + list(self.slopes)

    def _lhs(self) -> str:
        return " + ".join(["1" if self.has_intercept else "0", *self.slopes])

    def render(self) -> str:
        return f"({self._lhs()} | {self.group_label})"


@dataclass(frozen=True)
class Formula:
    response: tuple[str, str]
    fixed: tuple[str, ...] = ()
    varying: tuple[VaryingTerm, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "response", tuple(self.response))
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "varying", tuple(self.varying))
        if self.fixed.count("1") > 1:
            raise FormulaError("global intercept appears more than once")
        dupes = {t for t in self.fixed if self.fixed.count(t) > 1}
        if dupes:
            raise FormulaError(f"duplicate fixed term {sorted(dupes)[0]!r}")
        seen = set()
        for t in self.varying:
            if t in seen:
                raise FormulaError(f"duplicate varying term {t.render()!r}")
            seen.add(t)
        declared = set(self.covariates)
        for t in self.varying:
            for s in t.slopes:
                if s not in declared:
                    raise FormulaError(
                        f"slope {s!r} in {t.render()} is not a fixed covariate"
                    )

    @property
    def has_intercept(self) -> bool:
        return "1" in self.fixed

    @property
    def covariates(self) -> list[str]:
        return [t for t in self.fixed if t != "1"]

    @property
    def grouping_factors(self) -> list[str]:
        out: list[str] = []
        for t in self.varying:
            for name in t.grouping:
                if name not in out:
                    out.append(name)
        return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, msg, pos=None):
        pos = self.pos if pos is None else pos
        offset = len(self.text[:pos].encode("utf-8"))
        raise FormulaError(msg, offset)

    def skip(self):
        m = _SPACE.match(self.text, self.pos)
        if m:
            self.pos = m.end()

    def peek(self) -> str:
        self.skip()
        return self.text[self.pos : self.pos + 1]

    def expect(self, ch: str):
        if self.peek() != ch:
            got = self.peek() or "end of input"
            self.error(f"expected {ch!r}, got {got!r}")
        self.pos += 1

    def ident(self) -> str:
        self.skip()
        m = _IDENT.match(self.text, self.pos)
        if not m:
            got = self.peek() or "end of input"
            self.error(f"expected identifier, got {got!r}")
        self.pos = m.end()
        return m.group()

    def digit_const(self) -> str | None:
        self.skip()
        ch = self.text[self.pos : self.pos + 1]
        if ch in ("0", "1"):
            nxt = self.text[self.pos + 1 : self.pos + 2]
            if nxt and (nxt.isalnum() or nxt in "_."):
                self.error("unknown construct: numeric literal")
            self.pos += 1
            return ch
        return None

    def parse(self) -> Formula:
        if not self.text.strip():
            raise FormulaError("empty formula", 0)
        start = self.pos
        if self.ident() != "cbind":
            self.error("formula must start with cbind(...)", start)
        self.expect("(")
        succ = self.ident()
        self.expect(",")
        fail = self.ident()
        self.expect(")")
        self.expect("~")
        fixed: list[str] = []
        varying: list[VaryingTerm] = []
        while True:
            self.skip()
            term_start = self.pos
            ch = self.peek()
            if ch == "(":
                t = self.varying_term()
                if t in varying:
                    self.error(f"duplicate term {t.render()}", term_start)
                varying.append(t)
            else:
                const = self.digit_const()
                if const == "0":
                    self.error("unknown construct: '0' outside a varying term", term_start)
                name = const if const is not None else self.ident()
                if name in fixed:
                    self.error(f"duplicate term {name!r}", term_start)
                fixed.append(name)
            if self.peek() == "+":
                self.pos += 1
                continue
            break
        if self.peek():
            self.error(f"unexpected {self.peek()!r}")
        try:
            return Formula((succ, fail), tuple(fixed), tuple(varying))
        except FormulaError as exc:
            raise FormulaError(str(exc), None) from None

    def varying_term(self) -> VaryingTerm:
        self.expect("(")
        const = self.digit_const()
        if const is None:
            self.error("varying term must start with '1' or '0'")
        slopes = []
        if self.peek() == "+":
            self.pos += 1
            slopes.append(self.ident())
        elif const == "0":
            self.error("'0' must be followed by '+ covariate'")
        self.expect("|")
        grouping = [self.ident()]
        while self.peek() == ":":
            self.pos += 1
            grouping.append(self.ident())
        self.expect(")")
        if len(set(grouping)) != len(grouping):
            self.error("factor repeated within an interaction")
        return VaryingTerm(tuple(grouping), const == "1", tuple(slopes))


def parse_formula(text: str) -> Formula:
    """Parse formula text; raises :class:`FormulaError` with a byte offset."""
    if not isinstance(text, str):
        raise FormulaError("formula must be a string")
    return _Parser(text).parse()


def render_formula(f: Formula) -> str:
    terms = list(f.fixed) + [t.render() for t in f.varying]
    return f"cbind({f.response[0]}, {f.response[1]}) ~ " + " + ".join(terms)


def term_table(f: Formula, specs: Sequence) -> list[tuple[str, int]]:
    """One ``(label, cardinality)`` row per varying term, in formula order."""
    levels = {s.name: s.n_levels for s in specs}
    rows = []
    for t in f.varying:
        card = 1
        for name in t.grouping:
            if name not in levels:
                raise FormulaError(f"unknown factor {name!r} in {t.render()}")
            card *= levels[name]
        rows.append((t.label, card))
    return rows


def n_effect_parameters(f: Formula, specs: Sequence) -> int:
    """Total effect coefficients; a term counts once per effect column."""
    return sum(
        card * len(t.columns) for t, (_, card) in zip(f.varying, term_table(f, specs))
    )
