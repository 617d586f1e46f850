import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

import oracles
from mrp.errors import DataError, DimensionError
from mrp.formula import parse_formula
from mrp.frame import FactorSpec
from mrp.infer import check_gradient
from mrp.model import (
    CovariateSpec,
    Dataset,
    Model,
    ParamVector,
    effect_scale,
    grad_log_posterior,
    log_posterior,
    logit,
    predict_prob,
    read_dataset_csv,
    simplex_to_unconstrained,
    stick_breaking,
)

SPECS = [
    FactorSpec("g", ("a", "b", "c")),
    FactorSpec("h", ("x", "y")),
    FactorSpec("k", ("p", "q", "r", "s")),
]
COVS = {
    "x1": CovariateSpec("x1", "h", {"x": 0.5, "y": -0.5}),
    "x2": CovariateSpec("x2", "k", {"p": 0.2, "q": 0.4, "r": 0.7, "s": 0.9}, center=0.5),
}
FORMULA = "cbind(s, f) ~ 1 + x1 + x2 + (1 | g) + (1 + x2 | h) + (1 | g:k)"


def random_instance(rng, formula=FORMULA, n_cells=10, u_scale=1.0):
    f = parse_formula(formula)
    model = Model(f, SPECS, COVS)
    keys = np.column_stack([rng.integers(0, s.n_levels, n_cells) for s in SPECS])
    trials = rng.integers(0, 40, n_cells)
    succ = rng.binomial(trials, 0.4)
    data = Dataset(SPECS, keys, succ, trials)
    u = rng.normal(0, u_scale, model.layout.size)
    return model, data, u


def oracle_rows(model, data):
    cov = model.covariate_values(data.keys)
    return [
        (tuple(data.keys[i]), {k: float(v[i]) for k, v in cov.items()}, int(data.successes[i]), int(data.trials[i]))
        for i in range(len(data))
    ]


class TestEffectScale:
    def test_uniform_shares(self):
        for K in (1, 2, 5, 23):
            tau = effect_scale(np.full(K, 1.0 / K), 1.7, K)
            np.testing.assert_array_equal(tau, np.full(K, 1.7))

    def test_boundary(self):
        np.testing.assert_allclose(effect_scale([1.0, 0.0], 1.0, 2), [math.sqrt(2), 0.0])

    def test_total_variance(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            K = int(rng.integers(1, 30))
            pi = rng.dirichlet(np.ones(K))
            S = rng.gamma(1.0)
            tau = effect_scale(pi, S, K)
            assert math.isclose(math.fsum(tau**2), K * S * S, rel_tol=1e-12)


class TestStickBreaking:
    def test_zero_is_uniform(self):
        log_x, _, _ = stick_breaking(np.zeros(4))
        np.testing.assert_allclose(np.exp(log_x), 0.2, rtol=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            y = rng.normal(0, 2, rng.integers(1, 8))
            log_x, log_j, _ = stick_breaking(y)
            x_ref, j_ref = oracles.simplex(list(y))
            np.testing.assert_allclose(np.exp(log_x), x_ref, rtol=1e-12)
            assert math.isclose(log_j, j_ref, rel_tol=1e-12, abs_tol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-8, 8), min_size=1, max_size=10))
    @example([8.0, 6.0, 7.0, 0.0])  # small remaining stick
    def test_inverse(self, ys):
        y = np.array(ys)
        x = np.exp(stick_breaking(y)[0])
        assert abs(x.sum() - 1.0) < 1e-12
        assert np.all(x >= 0)
        np.testing.assert_allclose(simplex_to_unconstrained(x), y, atol=1e-8)


class TestTransforms:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        model, _, _ = random_instance(rng)
        lay = model.layout
        shares = rng.dirichlet(np.ones(lay.K))
        p = ParamVector(
            rng.normal(), rng.normal(size=lay.n_fixed),
            [rng.normal(size=c.cardinality) for c in lay.columns], shares, rng.gamma(2.0),
        )
        q = lay.constrain(lay.unconstrain(p))
        assert abs(q.mu - p.mu) < 1e-12
        np.testing.assert_allclose(q.fixed, p.fixed, atol=1e-12)
        for a, b in zip(q.effects, p.effects):
            np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(q.shares, p.shares, atol=1e-12)
        assert abs(q.scale - p.scale) < 1e-12
        assert abs(q.shares.sum() - 1.0) < 1e-12

    def test_layout_counts(self):
        model = Model(parse_formula(FORMULA), SPECS, COVS)
        lay = model.layout
        # columns: g, h, x2|h, g:k
        assert lay.K == 4
        assert lay.n_effects == 3 + 2 + 2 + 12
        assert lay.size == 1 + 2 + lay.n_effects + 3 + 1
        assert len(lay.names()) == lay.size

    def test_dimension_mismatch(self):
        model, data, u = random_instance(np.random.default_rng(0))
        with pytest.raises(DimensionError):
            log_posterior(u[:-1], data, model)
        with pytest.raises(DimensionError):
            model.layout.constrain(np.zeros(3))


class TestLogPosterior:
    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            model, data, u = random_instance(rng)
            got = log_posterior(u, data, model)
            want = oracles.log_posterior(u, model.formula, SPECS, oracle_rows(model, data))
            assert math.isclose(got, want, rel_tol=1e-11, abs_tol=1e-10)

    def test_empty_dataset_prior_only(self):
        model = Model(parse_formula(FORMULA), SPECS, COVS)
        data = Dataset(SPECS, np.zeros((0, 3), dtype=int), [], [])
        u = np.zeros(model.layout.size)
        want = oracles.log_posterior(u, model.formula, SPECS, [])
        assert math.isclose(log_posterior(u, data, model), want, rel_tol=1e-13)

    def test_single_success(self):
        f = parse_formula("cbind(s, f) ~ 1")
        model = Model(f, SPECS)
        data = Dataset(SPECS, [[0, 0, 0]], [1], [1])
        assert log_posterior(np.zeros(1), data, model) == math.log(0.5)

    def test_effect_scaling(self):
        rng = np.random.default_rng(4)
        model = Model(parse_formula(FORMULA), SPECS, COVS)
        data = Dataset(SPECS, np.zeros((0, 3), dtype=int), [], [])
        u = rng.normal(size=model.layout.size)
        lay = model.layout
        p = lay.constrain(u)
        tau = p.tau()
        for c in (0.5, 2.0, 3.0):
            v = u.copy()
            v[lay.effects] *= c
            expected = sum(
                (c * c - 1) * float(b @ b) / (2 * t * t) for b, t in zip(p.effects, tau)
            )
            drop = log_posterior(u, data, model) - log_posterior(v, data, model)
            assert math.isclose(drop, expected, rel_tol=1e-10)

    def test_finite_at_extremes(self):
        model, data, _ = random_instance(np.random.default_rng(5))
        for scale in (30.0, 200.0):
            u = np.random.default_rng(6).normal(0, scale, model.layout.size)
            u[model.layout.log_scale] = 5.0
            assert np.isfinite(log_posterior(u, data, model))
            assert np.all(np.isfinite(grad_log_posterior(u, data, model)))

    def test_additive_over_cells(self):
        rng = np.random.default_rng(7)
        model, data, u = random_instance(rng)
        one = Dataset(SPECS, data.keys[:1], data.successes[:1], data.trials[:1])
        empty = Dataset(SPECS, np.zeros((0, 3), dtype=int), [], [])
        doubled = Dataset(
            SPECS, np.vstack([data.keys, data.keys[:1]]),
            np.r_[data.successes, data.successes[:1]], np.r_[data.trials, data.trials[:1]],
        )
        contrib = log_posterior(u, one, model) - log_posterior(u, empty, model)
        diff = log_posterior(u, doubled, model) - log_posterior(u, data, model)
        assert math.isclose(diff, contrib, rel_tol=1e-10, abs_tol=1e-10)


class TestGradient:
    def test_finite_differences(self):
        rng = np.random.default_rng(8)
        worst = 0.0
        for _ in range(100):
            model, data, u = random_instance(rng, u_scale=0.7)
            assert model.layout.size <= 50
            err = check_gradient(
                lambda v: log_posterior(v, data, model),
                lambda v: grad_log_posterior(v, data, model), u,
            )
            worst = max(worst, err)
        assert worst < 1e-6

    def test_noncentred_gradient(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            model, data, w = random_instance(rng, u_scale=0.7)
            post = model.bind(data)
            err = check_gradient(
                lambda v: post.noncentered_value_and_grad(v)[0],
                lambda v: post.noncentered_value_and_grad(v)[1], w,
            )
            assert err < 1e-6

    def test_noncentred_is_centred_plus_jacobian(self):
        rng = np.random.default_rng(10)
        model, data, w = random_instance(rng)
        post = model.bind(data)
        u = post.to_centered(w)
        np.testing.assert_allclose(post.to_noncentered(u), w, atol=1e-12)
        lay = model.layout
        log_jac = float(np.sum(lay.sizes * np.log(lay.constrain(u).tau())))
        lhs = post.noncentered_value_and_grad(w)[0]
        assert math.isclose(lhs, post.log_posterior(u) + log_jac, rel_tol=1e-11)

    def test_mu_flat_prior(self):
        model = Model(parse_formula(FORMULA), SPECS, COVS)
        data = Dataset(SPECS, np.zeros((0, 3), dtype=int), [], [])
        g = grad_log_posterior(np.random.default_rng(0).normal(size=model.layout.size), data, model)
        assert g[model.layout.mu][0] == 0.0
        np.testing.assert_array_equal(g[model.layout.fixed], 0.0)


class TestPredictProb:
    def test_zero(self):
        model = Model(parse_formula(FORMULA), SPECS, COVS)
        p = model.layout.constrain(np.zeros(model.layout.size))
        assert predict_prob(p, [0, 1, 1, 5], {"x1": 0.5, "x2": 0.1}, model) == 0.5

    def test_intercept(self):
        model = Model(parse_formula("cbind(s, f) ~ 1 + (1 | g)"), SPECS)
        u = np.zeros(model.layout.size)
        u[0] = logit(0.6)
        p = model.layout.constrain(u)
        assert math.isclose(predict_prob(p, [2], {}, model), 0.6, rel_tol=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(11)
        model = Model(parse_formula(FORMULA), SPECS, COVS)
        keys = np.array([[i % 3, i % 2, i % 4] for i in range(24)])
        design = model.design(keys)
        cov = model.covariate_values(keys)
        for _ in range(10):
            u = rng.normal(size=model.layout.size)
            p = model.layout.constrain(u)
            vec = model.predict(u, design)
            for i, key in enumerate(keys):
                cv = {k: float(v[i]) for k, v in cov.items()}
                want = oracles.predict(u, model.formula, SPECS, tuple(key), cv)
                lay = model.layout
                assign = [
                    oracles.group_index(c.radices, [key[q] for q in c.positions]) for c in lay.columns
                ]
                assert abs(predict_prob(p, assign, cv, model) - want) < 1e-12
                assert abs(vec[i] - want) < 1e-12

    def test_bad_assignment(self):
        model = Model(parse_formula("cbind(s, f) ~ 1 + (1 | g)"), SPECS)
        p = model.layout.constrain(np.zeros(model.layout.size))
        with pytest.raises(DataError):
            predict_prob(p, [3], {}, model)


class TestCovariates:
    def test_centering(self):
        m = Model(parse_formula(FORMULA), SPECS, COVS)
        keys = np.array([[0, 0, 0], [0, 0, 3]])
        np.testing.assert_allclose(m.covariate_values(keys)["x2"], [0.2 - 0.5, 0.9 - 0.5])
        m2 = Model(parse_formula(FORMULA), SPECS, COVS, center_covariates=False)
        np.testing.assert_allclose(m2.covariate_values(keys)["x2"], [0.2, 0.9])

    def test_undefined_covariate(self):
        m = Model(parse_formula("cbind(s, f) ~ 1 + z"), SPECS)
        with pytest.raises(DataError):
            m.design(np.zeros((1, 3), dtype=int))


class TestDataset:
    def test_invalid_counts(self):
        with pytest.raises(DataError):
            Dataset(SPECS, [[0, 0, 0]], [5], [3])
        with pytest.raises(DataError):
            Dataset(SPECS, [[0, 0, 9]], [1], [3])

    def test_csv_round_trip(self):
        d = Dataset(SPECS, [[0, 1, 2], [2, 0, 3]], [3, 0], [10, 4], {"x1": [0.5, -0.5]})
        again = read_dataset_csv(d.to_csv(), SPECS)
        np.testing.assert_array_equal(again.keys, d.keys)
        np.testing.assert_array_equal(again.trials, d.trials)
        np.testing.assert_array_equal(again.covariates["x1"], d.covariates["x1"])

    def test_response_columns(self):
        text = "g,h,k,clinton,trump\na,x,p,3,7\nb,y,q,0,2\n"
        d = read_dataset_csv(text, SPECS, ("clinton", "trump"))
        assert d.successes.tolist() == [3, 0]
        assert d.trials.tolist() == [10, 2]

    def test_missing_columns(self):
        with pytest.raises(DataError):
            read_dataset_csv("g,h,k,successes\na,x,p,1\n", SPECS)
