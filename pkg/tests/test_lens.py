import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from residual_lens.errors import ContractError
from residual_lens.lens import build_profile, cross_entropy_onehot, kl_divergence, onehot, residual_prediction
from residual_lens.runtime import forward

from conftest import TINY
from reference_gpt2 import reference_lens

PROMPT = [3, 14, 1, 5, 9, 2, 6]

logit_vectors = arrays(np.float32, st.integers(2, 64), elements=st.floats(-30, 30, width=32))


def _brute_ce(logits, target):
    z = [float(v) for v in logits]
    m = max(z)
    return -(z[target] - m - math.log(sum(math.exp(v - m) for v in z)))


class TestResidualPrediction:
    def test_final_state_gives_output_logits(self, tiny_bundle):
        res = forward(tiny_bundle, PROMPT)
        assert residual_prediction(tiny_bundle, res.trace.states[-1]).tobytes() == res.logits.tobytes()

    def test_embedding_state_matches_reference(self, tiny_bundle):
        res = forward(tiny_bundle, PROMPT)
        ref = reference_lens(tiny_bundle.tensors, TINY, res.trace.states[0])
        np.testing.assert_allclose(residual_prediction(tiny_bundle, res.trace.states[0]), ref, atol=1e-5)

    def test_near_scale_invariance(self, tiny_bundle):
        e = forward(tiny_bundle, PROMPT).trace.states[1]
        np.testing.assert_allclose(
            residual_prediction(tiny_bundle, 2 * e), residual_prediction(tiny_bundle, e), atol=1e-3
        )

    def test_width_mismatch(self, tiny_bundle):
        with pytest.raises(ContractError):
            residual_prediction(tiny_bundle, np.ones(7))


class TestCrossEntropy:
    def test_peaked(self):
        assert cross_entropy_onehot(np.array([0.0, 80.0, 0.0]), 1) == pytest.approx(0.0, abs=1e-30)

    def test_uniform(self):
        assert cross_entropy_onehot(np.zeros(4), 2) == pytest.approx(math.log(4), abs=1e-12)

    def test_known_value(self):
        # mpmath at 40 digits: log(e^2 + e + 1 + e^-1) - 2
        assert cross_entropy_onehot(np.array([2.0, 1.0, 0.0, -1.0]), 0) == pytest.approx(0.44018969856119533, abs=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(ContractError):
            cross_entropy_onehot(np.zeros(4), 4)

    @settings(max_examples=200, deadline=None)
    @given(logit_vectors, st.data())
    def test_non_negative_and_matches_brute_force(self, logits, data):
        target = data.draw(st.integers(0, len(logits) - 1))
        ce = cross_entropy_onehot(logits, target)
        assert ce >= 0
        assert ce == pytest.approx(_brute_ce(logits, target), abs=1e-9)


class TestKL:
    def test_identical_distributions(self):
        logits = np.array([0.5, -1.0, 2.0])
        p = np.exp(logits) / np.exp(logits).sum()
        assert kl_divergence(logits, p) == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(11)
        logits = rng.standard_normal(6)
        p = rng.random(6)
        p /= p.sum()
        q = np.exp(logits) / np.exp(logits).sum()
        direct = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
        assert abs(kl_divergence(logits, p) - direct) <= 1e-9

    def test_zero_mass_terms_skipped(self):
        assert math.isfinite(kl_divergence(np.array([1.0, 2.0, 3.0]), np.array([0.0, 1.0, 0.0])))

    def test_rejects_non_distribution(self):
        with pytest.raises(ContractError):
            kl_divergence(np.zeros(3), np.array([0.5, 0.6, 0.0]))

    @settings(max_examples=200, deadline=None)
    @given(logit_vectors, st.data())
    def test_onehot_kl_equals_cross_entropy(self, logits, data):
        target = data.draw(st.integers(0, len(logits) - 1))
        assert kl_divergence(logits, onehot(target, len(logits))) == cross_entropy_onehot(logits, target)


def _recompute(bundle, trace, gold):
    """Brute-force recomputation of every profile field from the raw trace."""
    logits = [reference_lens(bundle.tensors, bundle.config, s) for s in trace.states]
    y_hat = int(np.argmax(logits[-1]))
    out = logits[-1]
    p_out = np.exp(out - out.max())
    p_out /= p_out.sum()
    wte = bundle.wte.astype(np.float64)

    def cos(a, b):
        a = np.asarray(a, dtype=np.float64)
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    kl = []
    for lg in logits:
        q = np.exp(lg - lg.max())
        q /= q.sum()
        kl.append(float(np.sum(p_out * np.log(p_out / q))))
    return {
        "sampled_token": y_hat,
        "top_token": [int(np.argmax(lg)) for lg in logits],
        "ce_vs_sampled": [_brute_ce(lg, y_hat) for lg in logits],
        "ce_vs_gold": [_brute_ce(lg, gold) for lg in logits],
        "kl_vs_output_logits": kl,
        "cosine_vs_sampled_embedding": [cos(s, wte[y_hat]) for s in trace.states],
        "cosine_vs_gold_embedding": [cos(s, wte[gold]) for s in trace.states],
    }


class TestBuildProfile:
    def test_final_layer_entries(self, tiny_bundle):
        res = forward(tiny_bundle, PROMPT)
        prof = build_profile(tiny_bundle, res.trace)
        assert prof.kl_vs_output_logits[-1] == 0.0
        assert prof.output_ce == cross_entropy_onehot(res.logits, int(np.argmax(res.logits)))
        assert prof.top_token[-1] == prof.sampled_token
        assert prof.ce_vs_gold is None and prof.correct is None

    def test_correct_generation_arrays_coincide(self, tiny_bundle):
        res = forward(tiny_bundle, PROMPT)
        y_hat = int(np.argmax(res.logits))
        prof = build_profile(tiny_bundle, res.trace, gold=y_hat)
        assert prof.correct
        np.testing.assert_array_equal(prof.ce_vs_sampled, prof.ce_vs_gold)
        np.testing.assert_array_equal(prof.cosine_vs_sampled_embedding, prof.cosine_vs_gold_embedding)

    def test_matches_brute_force(self, tiny_bundle):
        res = forward(tiny_bundle, PROMPT)
        gold = (int(np.argmax(res.logits)) + 3) % TINY.vocab_size
        prof = build_profile(tiny_bundle, res.trace, gold=gold)
        ref = _recompute(tiny_bundle, res.trace, gold)
        assert prof.sampled_token == ref["sampled_token"]
        assert not prof.correct
        np.testing.assert_array_equal(prof.top_token, ref["top_token"])
        for name in ("ce_vs_sampled", "ce_vs_gold", "kl_vs_output_logits",
                     "cosine_vs_sampled_embedding", "cosine_vs_gold_embedding"):
            np.testing.assert_allclose(getattr(prof, name), ref[name], atol=1e-4, err_msg=name)
        np.testing.assert_array_equal(prof.kl_vs_sampled_onehot, prof.ce_vs_sampled)

    def test_invariants_over_many_prompts(self, tiny_bundle):
        rng = np.random.default_rng(0)
        for _ in range(25):
            tokens = rng.integers(0, TINY.vocab_size, size=rng.integers(1, 12))
            gold = int(rng.integers(0, TINY.vocab_size))
            prof = build_profile(tiny_bundle, forward(tiny_bundle, tokens).trace, gold=gold)
            assert all(len(prof.metric(m)) == TINY.n_layer + 1 for m in (
                "ce_vs_sampled", "ce_vs_gold", "kl_vs_output_logits", "cosine_vs_gold_embedding"))
            assert prof.kl_vs_output_logits[-1] <= 1e-6
            assert np.all(prof.ce_vs_sampled >= 0) and np.all(prof.ce_vs_gold >= 0)
            steps = np.diff(prof.ce_vs_gold)
            assert abs(steps.sum() - (prof.ce_vs_gold[-1] - prof.ce_vs_gold[0])) <= 1e-5
            assert prof.correct == bool(np.array_equal(prof.ce_vs_sampled, prof.ce_vs_gold))

    def test_keep_logits(self, tiny_bundle):
        res = forward(tiny_bundle, PROMPT)
        prof = build_profile(tiny_bundle, res.trace, keep_logits=True)
        assert prof.residual_logits.shape == (TINY.n_layer + 1, TINY.vocab_size)
        assert prof.residual_logits[-1].tobytes() == res.logits.tobytes()

    def test_gold_out_of_range(self, tiny_bundle):
        with pytest.raises(ContractError):
            build_profile(tiny_bundle, forward(tiny_bundle, PROMPT).trace, gold=TINY.vocab_size)

    def test_unknown_metric(self, tiny_bundle):
        prof = build_profile(tiny_bundle, forward(tiny_bundle, PROMPT).trace)
        with pytest.raises(ContractError):
            prof.metric("entropy")
