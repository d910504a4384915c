import numpy as np
import pytest

from b3kit import cdo, decoder, pbo, pfe
from b3kit.errors import ArityError, ParameterError, StateError
from b3kit.field import FieldTensor, PrecisionField, read_field
from b3kit.verify import random_pfe_params


def make_config(tasks=3, channels=2, stages=3, seed=0, **kw):
    gen = np.random.default_rng(seed)
    return decoder.DecoderConfig(
        tasks=tasks,
        pfe_params=random_pfe_params(gen, num_rules=4, epsilon=1e-6),
        cdo_params=cdo.CdoParams.seeded(channels, 1, seed=seed),
        num_stages=stages,
        **kw,
    )


def states(tasks=3, shape=(5, 4, 2), seed=1):
    gen = np.random.default_rng(seed)
    return [FieldTensor(gen.normal(size=shape)) for _ in range(tasks)]


class TestBuildReference:
    def test_identical_states(self):
        s = states(1)[0]
        np.testing.assert_array_equal(decoder.build_reference(1, [s, s]).data, s.data)

    def test_mean(self):
        a, b = FieldTensor(np.zeros((2, 2, 1))), FieldTensor(np.full((2, 2, 1), 2.0))
        assert np.all(decoder.build_reference(1, [a, b]).data == 1.0)

    def test_pass_through(self):
        p = states(1)[0]
        assert decoder.build_reference(2, states(), p) is p

    def test_missing_bridge(self):
        with pytest.raises(StateError):
            decoder.build_reference(2, states())

    def test_errors(self):
        with pytest.raises(ArityError):
            decoder.build_reference(1, [])
        with pytest.raises(ParameterError):
            decoder.build_reference(0, states())


class TestRunStage:
    def test_degenerate_fixed_point(self):
        cfg = make_config(tasks=1)
        g = states(1)[0]
        new, bridge, rec = decoder.run_stage([g], g, cfg)
        np.testing.assert_allclose(bridge.data, g.data, rtol=1e-15)
        np.testing.assert_allclose(new[0].data, g.data, rtol=1e-15)
        # the residual is at rounding level, so only its size is meaningful
        assert np.max(np.abs(new[0].data - bridge.data)) < 1e-14

    def test_ratios_below_one(self):
        cfg = make_config()
        s = states()
        _, _, rec = decoder.run_stage(s, decoder.build_reference(1, s), cfg)
        assert all(0 <= r < 1 for r in rec.contraction_ratios)

    def test_large_precision_limit(self):
        # with alpha -> large, the bridge tends to the precision-weighted evidence mean
        s = states(3, seed=2)
        ref = FieldTensor(np.zeros_like(s[0].data) + 5.0)
        params = pfe.PfeParams([(0.0, 0.0)], [(1.0, 1.0)], [0.0], [0.0], [1e6], 1e-12)
        cfg = decoder.DecoderConfig(
            tasks=3, pfe_params=params, cdo_params=cdo.CdoParams.zeros(2), num_stages=1,
            pbo_config=pbo.PboConfig(w0=1.0, correction_enabled=False))
        _, bridge, rec = decoder.run_stage(s, ref, cfg)
        alpha = rec.precisions[0].data
        assert np.all(alpha == pytest.approx(1e6, rel=1e-7))
        evidence_mean = np.mean([x.data for x in s], axis=0)
        assert np.max(np.abs(bridge.data - evidence_mean)) < 1e-3
        # independent check: the bridge minimizes the stage objective
        objective = pbo.nlp_oracle(bridge, ref, list(rec.evidences), list(rec.precisions), cfg.pbo_config)
        shifted = FieldTensor(evidence_mean)
        assert objective <= pbo.nlp_oracle(shifted, ref, list(rec.evidences), list(rec.precisions), cfg.pbo_config)

    def test_wrong_task_count(self):
        with pytest.raises(ArityError):
            decoder.run_stage(states(2), states(1)[0], make_config(tasks=3))


class TestPropagate:
    def test_single_stage(self):
        cfg = make_config(stages=1)
        out, trace = decoder.propagate(states(), cfg)
        for t in range(3):
            np.testing.assert_array_equal(out[t].data, trace.stages[0].states[t].data)

    def test_selector_weights(self):
        cfg = make_config(aggregation_weights=(0.0, 0.0, 1.0))
        out, trace = decoder.propagate(states(), cfg)
        for t in range(3):
            np.testing.assert_array_equal(out[t].data, trace.stages[2].states[t].data)

    def test_weighted_sum(self):
        cfg = make_config(aggregation_weights=(0.5, -1.0, 2.0))
        out, trace = decoder.propagate(states(), cfg)
        expected = sum(w * rec.states[1].data for w, rec in zip((0.5, -1.0, 2.0), trace.stages))
        np.testing.assert_allclose(out[1].data, expected, rtol=1e-14)

    def test_stage_non_expansive_from_trace(self):
        s = states(4, seed=5)
        out, trace = decoder.propagate(s, make_config(tasks=4, seed=5))
        prev = s
        for rec in trace.stages:
            for t in range(4):
                before = np.linalg.norm(prev[t].data - rec.dispatched.data)
                after = np.linalg.norm(rec.states[t].data - rec.dispatched.data)
                assert after <= before
                assert after / before == pytest.approx(rec.contraction_ratios[t], rel=1e-12)
            prev = rec.states

    def test_deterministic(self):
        cfg = make_config()
        a, ta = decoder.propagate(states(), cfg)
        b, tb = decoder.propagate(states(), cfg)
        for x, y in zip(a, b):
            assert x.data.tobytes() == y.data.tobytes()
        assert ta.to_csv() == tb.to_csv()

    def test_task_permutation_equivariance(self):
        s = states(4, seed=6)
        cfg = make_config(tasks=4, seed=6)
        perm = [2, 0, 3, 1]
        a, ta = decoder.propagate(s, cfg)
        b, tb = decoder.propagate([s[i] for i in perm], cfg)
        for k, i in enumerate(perm):
            assert a[i].data.tobytes() == b[k].data.tobytes()
        for ra, rb in zip(ta.stages, tb.stages):
            assert ra.bridge.data.tobytes() == rb.bridge.data.tobytes()

    def test_dispatch_source(self):
        cfg_closed = make_config(dispatch_source="closed_form")
        cfg_corr = make_config(dispatch_source="corrected")
        _, t1 = decoder.propagate(states(), cfg_closed)
        _, t2 = decoder.propagate(states(), cfg_corr)
        assert t1.stages[0].dispatched is t1.stages[0].bridge
        assert t2.stages[0].dispatched is t2.stages[0].corrected_bridge
        assert make_config().dispatch_source == "corrected"
        off = make_config(pbo_config=pbo.PboConfig(correction_enabled=False))
        assert off.dispatch_source == "closed_form"

    def test_per_task_params(self):
        gen = np.random.default_rng(7)
        cfg = decoder.DecoderConfig(
            tasks=2,
            pfe_params=[random_pfe_params(gen, 2), random_pfe_params(gen, 3)],
            cdo_params=[cdo.CdoParams.seeded(2, 1, seed=1), cdo.CdoParams.seeded(2, 3, seed=2)],
        )
        out, trace = decoder.propagate(states(2), cfg)
        assert len(trace) == 3 and len(out) == 2
        with pytest.raises(ParameterError):
            decoder.DecoderConfig(tasks=3, pfe_params=[random_pfe_params(gen)] * 2, cdo_params=cdo.CdoParams.zeros(2))

    def test_trace_complete(self):
        out, trace = decoder.propagate(states(), make_config())
        assert len(trace) == 3
        for rec in trace.stages:
            assert len(rec.evidences) == len(rec.precisions) == len(rec.states) == 3
            assert all(isinstance(p, PrecisionField) for p in rec.precisions)
            assert rec.bridge.shape == rec.states[0].shape

    def test_exports(self, tmp_path):
        s = states()
        _, trace = decoder.propagate(s, make_config())
        text = trace.to_csv(tmp_path / "trace.csv", truth=s[0])
        lines = text.splitlines()
        assert lines[0] == "stage,task,contraction_ratio,bridge_mse_vs_truth"
        assert len(lines) == 1 + 3 * 3
        trace.dump_fields(tmp_path / "fields")
        for k in (1, 2, 3):
            assert read_field(tmp_path / "fields" / f"stage{k}" / "bridge.b3f").shape == (5, 4, 2)
            for t in range(3):
                for name in ("evidence", "precision", "state"):
                    assert (tmp_path / "fields" / f"stage{k}" / f"task{t}" / f"{name}.b3f").exists()
        prec = read_field(tmp_path / "fields" / "stage1" / "task0" / "precision.b3f")
        assert prec.shape == (5, 4, 1)

    def test_bad_config(self):
        with pytest.raises(ParameterError):
            make_config(stages=0)
        with pytest.raises(ParameterError):
            make_config(aggregation_weights=(1.0, 1.0))
        with pytest.raises(ParameterError):
            make_config(dispatch_source="mean")
