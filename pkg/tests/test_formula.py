import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrp.errors import FormulaError
from mrp.formula import n_effect_parameters, parse_formula, render_formula, term_table
from mrp.presets import ELECTION_FACTORS, PREFERENCE_FORMULA, TURNOUT_FORMULA


class TestParse:
    def test_preference_formula(self):
        f = parse_formula(PREFERENCE_FORMULA)
        assert f.response == ("clinton", "trump")
        assert f.has_intercept
        assert f.covariates == ["female", "state_pres_vote"]
        assert len(f.varying) == 22
        sloped = [t for t in f.varying if t.slopes]
        assert len(sloped) == 1
        assert sloped[0].grouping == ("eth",)
        assert sloped[0].slopes == ("state_pres_vote",)
        assert sloped[0].has_intercept

    def test_intercept_only(self):
        f = parse_formula("cbind(y, n) ~ 1")
        assert f.fixed == ("1",)
        assert f.varying == ()

    def test_three_way(self):
        f = parse_formula("cbind(y, n) ~ 1 + (1 | state:educ:age)")
        assert len(f.varying) == 1
        assert f.varying[0].grouping == ("state", "educ", "age")

    def test_whitespace_insignificant(self):
        a = parse_formula("cbind(y,n)~1+x+(1+x|g:h)")
        b = parse_formula("cbind( y ,\n n )\n ~ 1 +\n x + ( 1 + x | g : h )")
        assert a == b

    def test_no_intercept(self):
        f = parse_formula("cbind(y, n) ~ x + (1 | g)")
        assert not f.has_intercept

    def test_slope_only_term(self):
        f = parse_formula("cbind(y, n) ~ x + (0 + x | g)")
        assert not f.varying[0].has_intercept
        assert f.varying[0].columns == ["x"]

    @pytest.mark.parametrize(
        "text, offset",
        [
            ("cbind(y, n) ~ 1 + ", 18),
            ("cbind(y n) ~ 1", 8),
            ("cbind(y, n) ~ 1 + (1 | )", 23),
            ("cbind(y, n) ~ 1 * x", 16),
            ("cbind(y, n) 1", 12),
        ],
    )
    def test_syntax_error_offset(self, text, offset):
        with pytest.raises(FormulaError) as info:
            parse_formula(text)
        assert info.value.offset == offset

    @pytest.mark.parametrize(
        "text",
        [
            "",
            "cbind(y, n) ~ 1 + 1",
            "cbind(y, n) ~ 1 + (1 | g) + (1 | g)",
            "cbind(y, n) ~ 1 + x + x",
            "cbind(y, n) ~ 1 + (1 + z | g)",
            "cbind(y, n) ~ 1 + (1 | g:g)",
            "cbind(y, n) ~ 1 + (1 || g)",
            "cbind(y, n) ~ 1 + (1 | g/h)",
            "cbind(y, n) ~ 1 + (1 | 9g)",
            "cbind(y, n) ~ 1 + (0 | g)",
            "cbind(y, n) ~ 1 trailing",
            "y ~ 1",
            "cbind(y, n) ~ 2",
            "cbind(y, n) ~ 1 + _x",
        ],
    )
    def test_rejected(self, text):
        with pytest.raises(FormulaError):
            parse_formula(text)

    def test_non_string(self):
        with pytest.raises(FormulaError):
            parse_formula(None)


class TestRender:
    def test_turnout_fixed_point(self):
        f = parse_formula(TURNOUT_FORMULA)
        text = render_formula(f)
        assert parse_formula(text) == f
        assert render_formula(parse_formula(text)) == text

    def test_intercept_only(self):
        assert render_formula(parse_formula("cbind(y,n)~1")) == "cbind(y, n) ~ 1"

    def test_order_preserved(self):
        text = "cbind(a, b) ~ x + 1 + (1 | h) + (1 + x | g:h) + (0 + x | g)"
        assert render_formula(parse_formula(text)) == text

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.sampled_from(["f", "g", "h", "k"]), min_size=1, max_size=3, unique=True),
        st.lists(st.sampled_from(["x", "z"]), unique=True),
        st.booleans(),
        st.data(),
    )
    def test_round_trip_property(self, grouping, covs, intercept, data):
        terms = (["1"] if intercept else []) + covs
        varying = []
        for i in range(data.draw(st.integers(1, len(grouping)))):
            g = ":".join(grouping[: i + 1])
            slope = data.draw(st.sampled_from([None] + covs))
            lhs = "1" if slope is None else data.draw(st.sampled_from(["1", "0"])) + f" + {slope}"
            varying.append(f"({lhs} | {g})")
        text = "cbind(s, f) ~ " + " + ".join(terms + varying)
        f = parse_formula(text)
        assert parse_formula(render_formula(f)) == f


class TestTermTable:
    def test_table_two_rows(self):
        rows = dict(term_table(parse_formula(PREFERENCE_FORMULA), ELECTION_FACTORS))
        assert rows["educ:age:gender"] == 40
        assert rows["marstat:state"] == 150
        assert rows["1 + state_pres_vote | eth"] == 4
        assert rows["state:gender"] == 100

    def test_printed_cardinalities(self):
        rows = term_table(parse_formula(PREFERENCE_FORMULA), ELECTION_FACTORS)
        got = [c for _, c in rows]
        # the three-way state:educ:age entry is 50 * 5 * 4 with five education levels
        assert got == [50, 4, 5, 4, 3, 12, 150, 12, 6, 15, 100, 8, 10, 8,
                       200, 200, 250, 16, 20, 20, 1000, 40]

    def test_slope_counted_per_column(self):
        f = parse_formula(PREFERENCE_FORMULA)
        assert n_effect_parameters(f, ELECTION_FACTORS) == sum(c for _, c in term_table(f, ELECTION_FACTORS)) + 4

    def test_unknown_factor(self):
        with pytest.raises(FormulaError):
            term_table(parse_formula("cbind(y, n) ~ 1 + (1 | nope)"), ELECTION_FACTORS)
