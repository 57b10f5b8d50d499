import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epiground import policy, w2s
from epiground.errors import DimensionMismatch, InvalidDistribution, VocabMismatch
from epiground.w2s import W2sConfig

mpmath.mp.prec = 256


def dirichlet(rng, V, n):
    return rng.dirichlet(np.ones(V), size=n)


def oracle(ps, pe, pn, floor=1e-6, gamma=1):
    """High-precision direct evaluation of the normalized ratio product."""
    raw = [mpmath.mpf(s) * (mpmath.mpf(e) / max(mpmath.mpf(n), mpmath.mpf(floor))) ** gamma
           for s, e, n in zip(ps, pe, pn)]
    z = mpmath.fsum(raw)
    return [r / z for r in raw], z


def test_worked_case():
    out = w2s.combine_step([0.5, 0.5], [0.8, 0.2], [0.2, 0.8], W2sConfig(naive_floor=1e-6))
    probs, z = oracle([0.5, 0.5], [0.8, 0.2], [0.2, 0.8])
    assert float(z) == pytest.approx(2.125, abs=1e-15)
    assert out.probs == pytest.approx([0.941176, 0.058824], abs=1e-6)
    assert np.allclose(out.probs, [float(p) for p in probs], atol=1e-15)
    assert out.log_z == pytest.approx(math.log(2.125), abs=1e-14)
    assert math.log(out.probs[0]) == pytest.approx(-0.060625, abs=1e-6)
    assert out.clamp_events == 0


def test_identity_recovery():
    rng = np.random.default_rng(0)
    worst = 0.0
    for V in (4, 9, 40):
        for ps, pe in zip(dirichlet(rng, V, 350), dirichlet(rng, V, 350)):
            out = w2s.combine_step(ps, pe, pe)
            worst = max(worst, np.max(np.abs(out.probs - ps)))
    assert worst <= 1e-12


def test_gamma_zero_returns_strong():
    rng = np.random.default_rng(1)
    ps, pe, pn = dirichlet(rng, 12, 3)
    out = w2s.combine_step(ps, pe, pn, W2sConfig(ratio_exponent=0.0))
    assert np.allclose(out.probs, ps, atol=1e-15) and out.log_z == pytest.approx(0.0, abs=1e-15)


def test_log_space_matches_high_precision():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        V = int(rng.integers(2, 12))
        ps, pe, pn = dirichlet(rng, V, 3)
        pe = np.maximum(pe, 1e-5)
        pe /= pe.sum()
        out = w2s.combine_step(ps, pe, pn)
        ref, _ = oracle(ps, pe, pn)
        worst = max(worst, max(abs(float(a - b)) for a, b in zip(out.probs, ref)))
    assert worst <= 1e-12


def test_floor_engaged_stays_normalized():
    rng = np.random.default_rng(3)
    for _ in range(200):
        ps, pe = dirichlet(rng, 10, 2)
        pn = np.full(10, 1e-300)
        pn[int(rng.integers(10))] = 1.0 - 9e-300
        out = w2s.combine_step(ps, pe, pn)
        assert abs(out.probs.sum() - 1.0) <= 1e-9 and np.all(out.probs >= 0)
        assert out.clamp_events == 9 and math.isfinite(out.log_z)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 10), st.floats(1.01, 50.0))
def test_argmax_monotonicity(seed, V, boost):
    rng = np.random.default_rng(seed)
    ps, pe, pn = dirichlet(rng, V, 3)
    t = int(rng.integers(V))
    pe2 = pe.copy()
    pe2[t] *= boost
    pe2 /= pe2.sum()  # raises the ratio at t, lowers it elsewhere
    before = w2s.combine_step(ps, pe, pn).probs
    after = w2s.combine_step(ps, pe2, pn).probs
    rank = lambda p: int((p > p[t]).sum())  # noqa: E731
    assert rank(after) <= rank(before)
    assert after[t] >= before[t] - 1e-15


def test_input_validation():
    with pytest.raises(DimensionMismatch):
        w2s.combine_step([0.5, 0.5], [1.0, 0.0, 0.0], [0.5, 0.5])
    with pytest.raises(InvalidDistribution):
        w2s.combine_step([0.5, 0.6], [0.5, 0.5], [0.5, 0.5])
    with pytest.raises(ValueError):
        w2s.combine_step([0.5, 0.5], [0.5, 0.5], [0.5, 0.5], W2sConfig(naive_floor=0.5))
    with pytest.raises(ValueError):
        W2sConfig(ratio_exponent=-1)


# -- over models ------------------------------------------------------------

@pytest.fixture(scope="module")
def trio():
    v = policy.Vocabulary([f"t{i}" for i in range(9)])
    strong = policy.init_custom(v, 3, 16, 6, seed=1)
    expert = policy.init_custom(v, 2, 8, 4, seed=2)
    naive = policy.init_custom(v, 2, 8, 4, seed=3)
    return strong, expert, naive


def test_expert_equals_naive_recovers_strong(trio):
    strong, _, naive = trio
    x = [1, 4, 5, 6]
    cfg = W2sConfig(max_len=12)
    assert w2s.w2s_decode(strong, naive, naive.copy(), x, cfg) == policy.sample(strong, x, max_len=12)
    assert w2s.w2s_decode_batch(strong, naive, naive, [x, [1]], cfg) == \
        policy.greedy_batch(strong, [x, [1]], 12)
    y = [5, 7, 3, 2]
    assert w2s.pi_bar_logprob(strong, naive, naive, x, y) == \
        pytest.approx(policy.seq_logprob(strong, x, y), abs=1e-12)


def test_eos_biased_expert(trio):
    strong, _, naive = trio
    flat = policy.zero_model(strong)
    flat.params["u"] += np.linspace(0, 0.01, len(flat.params["u"]))  # near uniform
    expert = naive.copy(policy.Role.EXPERT)
    expert.params["u"][expert.vocab.eos_id] += 10.0
    ctx = [1, 4]
    out = w2s.combine_step(policy.step_dist(flat, ctx), policy.step_dist(expert, ctx),
                           policy.step_dist(naive, ctx))
    assert int(np.argmax(out.probs)) == flat.vocab.eos_id
    assert w2s.w2s_decode(flat, expert, naive, ctx) == [flat.vocab.eos_id]


def test_decode_deterministic_and_read_only(trio):
    strong, expert, naive = trio
    before = strong.flat().copy()
    trace = []
    a = w2s.w2s_decode(strong, expert, naive, [1, 3], W2sConfig(max_len=8), trace=trace)
    b = w2s.w2s_decode(strong, expert, naive, [1, 3], W2sConfig(max_len=8))
    assert a == b and np.array_equal(strong.flat(), before)
    assert len(trace) == len(a) and {"log_z", "clamp_events", "token"} <= set(trace[0])
    mode = W2sConfig(mode=policy.Temperature(0.7), max_len=8)
    s1 = w2s.w2s_decode(strong, expert, naive, [1, 3], mode, np.random.default_rng(5))
    s2 = w2s.w2s_decode(strong, expert, naive, [1, 3], mode, np.random.default_rng(5))
    assert s1 == s2


def test_pi_bar_logprob_consistent(trio):
    strong, expert, naive = trio
    x, y = [1, 6], [4, 4, 8, 3, 2]
    total = 0.0
    for i, tok in enumerate(y):
        ctx = x + y[:i]
        out = w2s.combine_step(policy.step_dist(strong, ctx), policy.step_dist(expert, ctx),
                               policy.step_dist(naive, ctx))
        total += math.log(out.probs[tok])
    assert w2s.pi_bar_logprob(strong, expert, naive, x, y) == pytest.approx(total, abs=1e-12)
    for k in range(len(y) + 1):
        split = (w2s.pi_bar_logprob(strong, expert, naive, x, y[:k])
                 + w2s.pi_bar_logprob(strong, expert, naive, x + y[:k], y[k:]))
        assert split == pytest.approx(total, abs=1e-12)


def test_pi_bar_worked_case_single_step():
    v = policy.Vocabulary(["a"])

    def fixed(p_a):
        m = policy.zero_model(policy.init_custom(v, 1, 2, 1))
        m.params["u"][:] = -800.0
        m.params["u"][3], m.params["u"][2] = math.log(p_a), math.log(1 - p_a)
        return m
    lp = w2s.pi_bar_logprob(fixed(0.5), fixed(0.8), fixed(0.2), [1], [3],
                            W2sConfig(naive_floor=1e-6))
    assert lp == pytest.approx(-0.060625, abs=1e-6)
    assert lp == pytest.approx(float(mpmath.log(mpmath.mpf(2) / mpmath.mpf("2.125"))), abs=1e-12)


def test_sampler_matches_pi_bar(trio):
    strong, expert, naive = trio
    draws = w2s.sample_pi_bar(strong, expert, naive, [[1, 4]], 20000, 1, np.random.default_rng(0))[0]
    freq = np.bincount([d[0] for d in draws], minlength=len(strong.vocab)) / 20000
    lp, _, _ = w2s.combined_logp_batch(strong, expert, naive, [[1, 4]])
    p = np.exp(lp[0])
    assert np.max(np.abs(freq - p)) < 4 * np.sqrt(p.max() / 20000)


def test_vocab_mismatch(trio):
    strong, expert, _ = trio
    other = policy.init_custom(policy.Vocabulary(["q"]), 2, 8, 4)
    with pytest.raises(VocabMismatch):
        w2s.w2s_decode(strong, expert, other, [1])
