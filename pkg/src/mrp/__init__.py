"""Multilevel regression and poststratification for election data."""

from .errors import ConfigError, DataError, DimensionError, FormulaError, MRPError, NumericError
from .formula import Formula, VaryingTerm, parse_formula, render_formula, term_table
from .frame import FactorSpec, Frame, GroupMap, build_frame, group_map, load_factor_specs
from .kernels import BACKEND

__version__ = "0.1.0"
