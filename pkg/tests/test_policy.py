import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epiground import corpus, policy, train, world
from epiground.errors import UnknownToken, VocabMismatch
from epiground.policy import Capacity, Greedy, Temperature

from conftest import finite_difference_error


@pytest.fixture(scope="module")
def vocab():
    start = world.bundled_scene()
    return policy.Vocabulary(corpus.vocabulary_tokens({"apartment": start}))


@pytest.fixture(scope="module")
def weak(vocab):
    return policy.init_model(Capacity.WEAK, vocab, seed=11)


def random_ids(rng, V, n):
    return [int(t) for t in rng.integers(3, V, size=n)]


def test_same_seed_identical(vocab):
    a = policy.init_model("weak", vocab, seed=5)
    b = policy.init_model("weak", vocab, seed=5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = policy.init_model("weak", vocab, seed=6)
    assert not np.array_equal(a.params["E"], c.params["E"])


@pytest.mark.parametrize("cap,shape", [("weak", (2, 32, 8)), ("strong_toy", (8, 128, 16))])
def test_capacity_shapes_and_count(vocab, cap, shape):
    m = policy.init_model(cap, vocab)
    L, d, W = shape
    assert (m.num_layers, m.embed_dim, m.window) == shape
    V = len(vocab)
    # embeddings + position gates + per block (matrix, bias, LN gain, LN shift) + output map/bias
    by_hand = V * d + W * d + L * (d * d + d + d + d) + d * V + V
    assert m.n_params == by_hand == policy.param_count(V, d, W, L)


def test_init_scale(vocab):
    m = policy.init_model("strong_toy", vocab, seed=0)
    assert np.std(m.params["A0"]) == pytest.approx(1 / math.sqrt(128), rel=0.05)
    assert abs(np.mean(m.params["U"])) < 0.01


def test_zero_model_uniform(weak, vocab):
    z = policy.zero_model(weak)
    p = policy.step_dist(z, ["<bos>", "walk"])
    assert np.allclose(p, 1.0 / len(vocab), atol=1e-15)


def test_distributions_normalized(weak, vocab):
    rng = np.random.default_rng(0)
    ctxs = [random_ids(rng, len(vocab), int(rng.integers(0, 20))) for _ in range(1000)]
    probs = np.exp(policy.step_logprobs_batch(weak, ctxs))
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-9
    single = policy.step_dist(weak, ctxs[7])
    assert np.allclose(single, probs[7], atol=1e-14, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6), st.integers(0, 6))
def test_window_shift_invariance(seed, n1, n2):
    m = policy.init_model("weak", policy.Vocabulary([f"t{i}" for i in range(9)]), seed=2)
    rng = np.random.default_rng(seed)
    V = len(m.vocab)
    suffix = random_ids(rng, V, m.window)
    a = random_ids(rng, V, n1) + suffix
    b = random_ids(rng, V, n2) + suffix
    assert np.array_equal(policy.step_dist(m, a), policy.step_dist(m, b))


def test_unknown_token(weak):
    with pytest.raises(UnknownToken):
        policy.step_dist(weak, ["no-such-token"])
    with pytest.raises(UnknownToken):
        policy.seq_logprob(weak, ["<bos>"], [10**6])


def test_hidden_stack(weak):
    probs, hs = policy.step_dist(weak, ["<bos>", "walk"], return_hidden=True)
    assert len(hs) == weak.num_layers and hs.states.shape == (2, 32)
    batch = policy.hidden_stacks(weak, [weak.vocab.encode(["<bos>", "walk"])])
    assert np.allclose(batch[0], hs.states)


# -- log-probabilities ------------------------------------------------------

def test_uniform_seq_logprob(weak, vocab):
    z = policy.zero_model(weak)
    y = ["walk", "cup", "<eos>"]
    assert policy.seq_logprob(z, ["<bos>"], y) == pytest.approx(-3 * math.log(len(vocab)), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.data())
def test_chain_rule_and_stepwise(seed, M, data):
    m = policy.init_custom(policy.Vocabulary([f"t{i}" for i in range(7)]), 2, 8, 4, seed=1)
    rng = np.random.default_rng(seed)
    V = len(m.vocab)
    x = [1] + random_ids(rng, V, int(rng.integers(0, 6)))
    y = random_ids(rng, V, M - 1) + [2]
    k = data.draw(st.integers(0, M))
    full = policy.seq_logprob(m, x, y)
    assert full <= 0
    assert full == pytest.approx(policy.seq_logprob(m, x, y[:k]) + policy.seq_logprob(m, x + y[:k], y[k:]),
                                 abs=1e-12)
    stepwise = math.fsum(math.log(policy.step_dist(m, x + y[:i])[y[i]]) for i in range(M))
    assert full == pytest.approx(stepwise, abs=1e-12)


# -- gradients --------------------------------------------------------------

def _nll_setup(vocab, seed=0):
    m = policy.init_custom(vocab, 2, 6, 4, seed=seed)
    rng = np.random.default_rng(seed)
    pairs = [([1] + random_ids(rng, len(vocab), 3), random_ids(rng, len(vocab), 4) + [2])
             for _ in range(3)]
    rows = policy.Rows.build(pairs, m.window)
    return m, rows


def _neg_lp(m, rows):
    lp, _ = policy.row_logprobs(m, rows)
    return -float(lp.sum())


def test_gradients_match_finite_differences(tiny_vocab):
    m, rows = _nll_setup(tiny_vocab)
    lp, cache = policy.row_logprobs(m, rows)
    g = policy.logprob_grad(m, cache, rows.targets, -np.ones(len(rows)))
    err, n = finite_difference_error(m, lambda mm: _neg_lp(mm, rows), g)
    assert n == 200 and err <= 1e-4
    assert all(g[k].shape == m.params[k].shape for k in m.params)


def test_constant_loss_zero_grad(tiny_vocab):
    m, rows = _nll_setup(tiny_vocab, 1)
    _, cache = policy.row_logprobs(m, rows)
    g = policy.logprob_grad(m, cache, rows.targets, np.zeros(len(rows)))
    assert all(not np.any(v) for v in g.values())


def test_output_bias_gradient_identity(tiny_vocab):
    m, _ = _nll_setup(tiny_vocab, 2)
    x, y = [1, 4, 5], [6, 6, 9, 2]
    rows = policy.Rows.build([(x, y)], m.window)
    _, cache = policy.row_logprobs(m, rows)
    g = policy.logprob_grad(m, cache, rows.targets, -np.ones(len(rows)))
    # d(-log p_gold)/du_k = p_k - [k == gold], summed over steps
    expect = np.zeros(len(tiny_vocab))
    for i, tok in enumerate(y):
        p = policy.step_dist(m, x + y[:i])
        expect += p
        expect[tok] -= 1.0
    assert np.allclose(g["u"], expect, atol=1e-12)


# -- decoding ---------------------------------------------------------------

def test_greedy_deterministic(weak):
    x = ["<bos>"] + corpus.render_prompt(world.GoalSpec.parse("at cup table"),
                                         world.bundled_scene()).split()
    assert policy.sample(weak, x, Greedy(), 10) == policy.sample(weak, x, Greedy(), 10)


def test_greedy_tie_lowest_index():
    assert policy.choose(np.array([0.0, 1.0, 1.0, 0.5]), Greedy(), None) == 1


def test_low_temperature_matches_greedy(weak):
    x = [1, 5, 9]
    g = policy.sample(weak, x, Greedy(), 12)
    t = policy.sample(weak, x, Temperature(1e-4), 12, np.random.default_rng(0))
    assert g == t


def test_eos_bias_stops_immediately(weak):
    m = policy.zero_model(weak)
    m.params["u"][m.vocab.eos_id] = 10.0
    assert policy.sample(m, [1], Greedy(), 20) == [m.vocab.eos_id]
    assert policy.greedy_batch(m, [[1], [1, 4]]) == [[2], [2]]


def test_max_len_respected(weak):
    m = policy.zero_model(weak)
    m.params["u"][5] = 10.0
    assert policy.sample(m, [1], Greedy(), 7) == [5] * 7
    with pytest.raises(ValueError):
        policy.sample(m, [1], Greedy(), 0)


def test_temperature_validation():
    with pytest.raises(ValueError):
        Temperature(0.0)


def test_batch_sampling_matches_distribution(tiny_vocab):
    m = policy.init_custom(tiny_vocab, 1, 4, 2, seed=9)
    samples = policy.sample_batch(m, [[1]], 20000, 1, np.random.default_rng(4))[0]
    counts = np.bincount([s[0] for s in samples], minlength=len(tiny_vocab)) / 20000
    p = policy.step_dist(m, [1])
    assert np.max(np.abs(counts - p)) < 4 * np.sqrt(p.max() / 20000)


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(weak, tmp_path):
    path = tmp_path / "w.ckpt"
    policy.save_checkpoint(weak, path)
    back = policy.load_checkpoint(path)
    assert back.vocab == weak.vocab and back.capacity is Capacity.WEAK
    assert all(np.array_equal(back.params[k], weak.params[k]) for k in weak.params)
    assert policy.checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_layout(weak):
    data = policy.checkpoint_bytes(weak)
    (n,) = struct.unpack("<Q", data[:8])
    head = json.loads(data[8:8 + n])
    assert {"format_version", "capacity", "vocab_hash", "seed"} <= set(head)
    first = np.frombuffer(data, "<f8", count=3, offset=8 + n)
    assert np.array_equal(first, weak.params["E"].ravel()[:3])
    with pytest.raises(ValueError):
        policy.checkpoint_from_bytes(data + b"\0")


def test_vocab_mismatch(weak, tiny_vocab):
    other = policy.init_custom(tiny_vocab, 1, 4, 2)
    with pytest.raises(VocabMismatch):
        policy.check_same_vocab(weak, other)


@pytest.mark.slow
def test_capacity_ordering_trend(apartment, tasks, gold_plans):
    """StrongToy reaches a training NLL no worse than Weak after the same SFT run."""
    v = policy.Vocabulary(corpus.vocabulary_tokens({"apartment": apartment}))
    recs = [corpus.InstructionRecord(corpus.render_prompt(t, apartment),
                                     tuple(str(a) for a in gold), t.task_name)
            for t, gold in zip(tasks, gold_plans)]
    cfg = train.SftConfig(learning_rate=0.03, epochs=30, batch_size=4)
    wins = 0
    for seed in range(5):
        weak_m, _ = train.train_loop(policy.init_model("weak", v, seed), "sft", recs, cfg)
        strong_m, _ = train.train_loop(policy.init_model("strong_toy", v, seed), "sft", recs, cfg)
        wins += train.mean_nll(strong_m, recs) <= train.mean_nll(weak_m, recs)
    assert wins >= 4
