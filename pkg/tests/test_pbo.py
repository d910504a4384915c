import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from b3kit import pbo
from b3kit.errors import ArityError, ParameterError, ShapeError
from b3kit.field import FieldTensor, PrecisionField
from b3kit.verify import projected_gradient_descent, random_fusion_case


def px(v):
    return FieldTensor([[[float(v)]]])


def prec(v):
    return PrecisionField([[float(v)]])


class TestPosteriorBridge:
    def test_prior_dominated(self):
        gen = np.random.default_rng(0)
        g = FieldTensor(gen.normal(size=(3, 3, 2)))
        e = [FieldTensor(gen.normal(size=(3, 3, 2))) for _ in range(3)]
        p = [PrecisionField(np.full((3, 3), 1e-12)) for _ in range(3)]
        b = pbo.posterior_bridge(g, e, p, pbo.PboConfig(1.0))
        assert np.max(np.abs(b.data - g.data)) < 1e-10

    def test_midpoint(self):
        assert pbo.posterior_bridge(px(0), [px(2)], [prec(1)], pbo.PboConfig(1.0)).data.item() == 1.0

    def test_weighted_example_against_numeric_minimum(self):
        cfg = pbo.PboConfig(1.0)
        g, es, ps = px(0), [px(1), px(-1)], [prec(3), prec(1)]
        b = pbo.posterior_bridge(g, es, ps, cfg).data.item()
        res = minimize_scalar(lambda v: pbo.nlp_oracle(px(v), g, es, ps, cfg), bracket=(-2, 2), tol=1e-12)
        assert res.x == pytest.approx(0.4, abs=1e-6)
        assert b == pytest.approx(0.4, abs=1e-15)

    def test_errors(self):
        cfg = pbo.PboConfig()
        with pytest.raises(ArityError):
            pbo.posterior_bridge(px(0), [], [], cfg)
        with pytest.raises(ArityError):
            pbo.posterior_bridge(px(0), [px(1)], [], cfg)
        with pytest.raises(ParameterError):
            pbo.PboConfig(w0=0.0)
        with pytest.raises(ShapeError):
            pbo.posterior_bridge(px(0), [FieldTensor(np.zeros((1, 1, 2)))], [prec(1)], cfg)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_projected_gradient_descent(self, seed):
        gen = np.random.default_rng(seed)
        g, es, ps, cfg = random_fusion_case(gen)
        b = pbo.posterior_bridge(g, es, ps, cfg)
        pgd = projected_gradient_descent(g, es, ps, cfg, gen.normal(size=g.shape) * 5)
        assert np.max(np.abs(pgd.data - b.data)) < 1e-6
        assert np.max(np.abs(pbo.nlp_gradient(b, g, es, ps, cfg))) < 1e-9

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_perturbations_increase_loss(self, seed):
        gen = np.random.default_rng(seed)
        g, es, ps, cfg = random_fusion_case(gen, shape=(3, 3, 2))
        b = pbo.posterior_bridge(g, es, ps, cfg)
        base = pbo.nlp_oracle(b, g, es, ps, cfg)
        for _ in range(100):
            d = gen.normal(size=g.shape)
            d *= gen.uniform(1e-3, 1.0) / np.linalg.norm(d)
            assert pbo.nlp_oracle(FieldTensor(b.data + d), g, es, ps, cfg) > base

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_permutation_bit_identical(self, seed):
        gen = np.random.default_rng(seed)
        g, es, ps, cfg = random_fusion_case(gen, shape=(3, 3, 2))
        perm = gen.permutation(len(es))
        a = pbo.posterior_bridge(g, es, ps, cfg)
        b = pbo.posterior_bridge(g, [es[i] for i in perm], [ps[i] for i in perm], cfg)
        assert a.data.tobytes() == b.data.tobytes()

    @given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1e4))
    @settings(max_examples=50, deadline=None)
    def test_precision_scale(self, seed, lam):
        gen = np.random.default_rng(seed)
        g, es, ps, cfg = random_fusion_case(gen, shape=(3, 3, 2))
        a = pbo.posterior_bridge(g, es, ps, cfg)
        b = pbo.posterior_bridge(g, es, [PrecisionField(p.data * lam) for p in ps], pbo.PboConfig(cfg.w0 * lam))
        assert np.max(np.abs(a.data - b.data)) <= 1e-12

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_envelope(self, seed):
        gen = np.random.default_rng(seed)
        g, es, ps, cfg = random_fusion_case(gen, shape=(3, 3, 2))
        b = pbo.posterior_bridge(g, es, ps, cfg).data
        stack = np.stack([g.data] + [e.data for e in es])
        assert np.all(b >= stack.min(axis=0)) and np.all(b <= stack.max(axis=0))


class TestNlpOracle:
    def test_prior_term_vanishes(self):
        g = FieldTensor(np.random.default_rng(1).normal(size=(2, 2, 2)))
        e = FieldTensor(np.zeros((2, 2, 2)))
        tiny = PrecisionField(np.full((2, 2), 1e-300))
        assert pbo.nlp_oracle(g, g, [e], [tiny], pbo.PboConfig()) == pytest.approx(0.0, abs=1e-290)

    def test_hand_value(self):
        assert pbo.nlp_oracle(px(1), px(0), [px(2)], [prec(1)], pbo.PboConfig(1.0)) == 2.0

    def test_gradient_matches_finite_difference(self):
        gen = np.random.default_rng(2)
        g, es, ps, cfg = random_fusion_case(gen, shape=(2, 2, 2))
        b = FieldTensor(gen.normal(size=g.shape))
        grad = pbo.nlp_gradient(b, g, es, ps, cfg)
        h = 1e-6
        for idx in np.ndindex(g.shape):
            up, dn = b.data.copy(), b.data.copy()
            up[idx] += h
            dn[idx] -= h
            fd = (pbo.nlp_oracle(FieldTensor(up), g, es, ps, cfg) - pbo.nlp_oracle(FieldTensor(dn), g, es, ps, cfg)) / (2 * h)
            assert fd == pytest.approx(grad[idx], rel=1e-6, abs=1e-6)


class TestCorrection:
    def test_convex_combination(self):
        out = pbo.posterior_correction(px(0), px(1), pbo.PboConfig(eta_b=0.3)).data.item()
        assert out == pytest.approx(0.3, abs=1e-16)

    def test_fixed_point(self):
        g = FieldTensor(np.random.default_rng(3).normal(size=(2, 3, 2)))
        for eta in (0.1, 0.5, 0.9):
            np.testing.assert_allclose(pbo.posterior_correction(g, g, pbo.PboConfig(eta_b=eta)).data, g.data, rtol=1e-15)

    def test_endpoint_limit(self):
        gen = np.random.default_rng(4)
        g = FieldTensor(gen.uniform(-5, 5, size=(4, 4, 2)))
        b = FieldTensor(g.data + gen.uniform(-10, 10, size=(4, 4, 2)))
        out = pbo.posterior_correction(g, b, pbo.PboConfig(eta_b=1 - 1e-9)).data
        assert np.max(np.abs(out - b.data)) < 1e-8

    def test_disabled(self):
        g, b = px(0), px(1)
        assert pbo.posterior_correction(g, b, pbo.PboConfig(correction_enabled=False)) is b

    @pytest.mark.parametrize("eta", [0.0, 1.0, 1.5, -0.1])
    def test_bad_eta(self, eta):
        with pytest.raises(ParameterError):
            pbo.PboConfig(eta_b=eta)

    @given(st.integers(0, 2**32 - 1), st.floats(0.001, 0.999))
    @settings(max_examples=50, deadline=None)
    def test_on_segment(self, seed, eta):
        gen = np.random.default_rng(seed)
        g, b = gen.normal(size=(3, 3, 2)), gen.normal(size=(3, 3, 2)) * 10
        out = pbo.posterior_correction(FieldTensor(g), FieldTensor(b), pbo.PboConfig(eta_b=eta)).data
        assert np.all(out >= np.minimum(g, b)) and np.all(out <= np.maximum(g, b))


class TestExtractor:
    def test_identity(self):
        x = FieldTensor(np.random.default_rng(5).normal(size=(2, 2, 3)))
        assert pbo.extract_evidence(x, x, pbo.ExtractorParams.identity()) is x

    def test_constant_field_fixed_point(self):
        x = FieldTensor(np.broadcast_to([1.0, -2.0, 0.5], (3, 4, 3)))
        g = FieldTensor(np.random.default_rng(6).normal(size=(3, 4, 3)))
        out = pbo.extract_evidence(x, g, pbo.ExtractorParams.attention_identity(3))
        np.testing.assert_allclose(out.data, x.data, rtol=1e-14)

    def test_rows_sum_to_one(self):
        gen = np.random.default_rng(7)
        params = pbo.ExtractorParams.seeded_attention(4, seed=1)
        for _ in range(20):
            x, g = FieldTensor(gen.normal(size=(3, 3, 4))), FieldTensor(gen.normal(size=(3, 3, 4)))
            w = pbo.attention_weights(x, g, params)
            assert np.max(np.abs(w.sum(axis=1) - 1)) <= 1e-12

    def test_against_loop_attention(self):
        gen = np.random.default_rng(8)
        c = 3
        params = pbo.ExtractorParams.seeded_attention(c, seed=2)
        x, g = gen.normal(size=(2, 3, c)), gen.normal(size=(2, 3, c))
        tokens_x, tokens_g = x.reshape(-1, c), g.reshape(-1, c)
        expected = np.zeros_like(tokens_x)
        for i, gq in enumerate(tokens_g):
            q = gq @ params.query
            scores = np.array([q @ (kx @ params.key) / np.sqrt(c) for kx in tokens_x])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            expected[i] = sum(wj * (vx @ params.value) for wj, vx in zip(w, tokens_x)) @ params.output
        out = pbo.extract_evidence(FieldTensor(x), FieldTensor(g), params)
        np.testing.assert_allclose(out.data.reshape(-1, c), expected, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            pbo.extract_evidence(FieldTensor(np.ones((2, 2, 3))), FieldTensor(np.ones((2, 2, 3))),
                                 pbo.ExtractorParams.attention_identity(4))

    def test_bad_projection(self):
        with pytest.raises(ParameterError):
            pbo.ExtractorParams("attention", np.eye(2), np.eye(2), np.eye(2), np.eye(3))


class TestParamCount:
    def test_fusion_is_parameter_free(self):
        assert pbo.pbo_param_count(pbo.ExtractorParams.identity(), pbo.PboConfig()) == (0, 0)

    def test_attention_counted_separately(self):
        fusion, extractor = pbo.pbo_param_count(pbo.ExtractorParams.attention_identity(8), pbo.PboConfig())
        assert fusion == 0
        assert extractor == 256
