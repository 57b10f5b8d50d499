import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epiground import corpus, evalx, pipeline, policy, train, world
from epiground.errors import EmptySequence, LengthMismatch, MissingMapping
from epiground.evalx import ModelBundle

ALPHABET = "abc"


def subsequences(seq):
    out = set()
    for r in range(len(seq) + 1):
        out.update(itertools.combinations(seq, r))
    return out


def brute_lcs(a, b):
    return max(len(s) for s in subsequences(a) & subsequences(b))


def brute_rouge(a, b):
    lcs = brute_lcs(a, b)
    if lcs == 0:
        return Fraction(0)
    p, r = Fraction(lcs, len(a)), Fraction(lcs, len(b))
    return 2 * p * r / (p + r)


def all_words(max_len):
    for n in range(1, max_len + 1):
        yield from itertools.product(ALPHABET, repeat=n)


def test_exhaustive_against_brute_force():
    """Every pair over {a, b, c} whose lengths sum to at most 8."""
    words = list(all_words(7))
    subs = {w: subsequences(w) for w in words}
    checked = 0
    for a in words:
        for b in words:
            if len(a) + len(b) > 8:
                continue
            lcs = max(len(s) for s in subs[a] & subs[b])
            assert evalx.lcs_length(a, b) == lcs
            f = Fraction(0) if lcs == 0 else 2 * Fraction(lcs, len(a)) * Fraction(lcs, len(b)) / (
                Fraction(lcs, len(a)) + Fraction(lcs, len(b)))
            assert evalx.rouge_l(a, b) == pytest.approx(float(f), abs=1e-15)
            assert evalx.lcs_path_score(a, b) == pytest.approx(lcs / len(b), abs=1e-15)
            checked += 1
    assert checked == sum((n - 1) * 3 ** n for n in range(2, 9))


words8 = st.lists(st.sampled_from(ALPHABET), min_size=1, max_size=8)


@settings(max_examples=300)
@given(words8, words8)
def test_long_pairs_against_brute_force(a, b):
    assert evalx.rouge_l(a, b) == pytest.approx(float(brute_rouge(a, b)), abs=1e-15)
    assert evalx.lcs_path_score(a, b) == pytest.approx(brute_lcs(a, b) / len(b), abs=1e-15)
    assert evalx.rouge_l(a, b) == evalx.rouge_l(b, a)


def test_rouge_examples():
    assert evalx.rouge_l("a b c", "a c d") == pytest.approx(2 / 3, abs=1e-15)
    assert evalx.rouge_l("a b c", "a b c") == 1.0
    assert evalx.rouge_l("a b", "c d") == 0.0
    with pytest.raises(EmptySequence):
        evalx.rouge_l("", "a")


def test_lcs_path_examples():
    assert evalx.lcs_path_score(["k", "x", "t", "s"], ["k", "y", "t", "s"]) == 0.75
    ref = ["kitchen", "agent", "living_room", "table"]
    assert evalx.lcs_path_score(ref, ref) == 1.0
    assert evalx.lcs_path_score(ref[::-1], ref) == 0.25
    with pytest.raises(EmptySequence):
        evalx.lcs_path_score([], ref)


def test_object_path(apartment):
    plan = [world.Action.parse(x) for x in
            ("walk kitchen", "grab cup", "walk living_room", "put cup table")]
    assert evalx.object_path(apartment, plan, "cup")[-2:] == [world.AGENT, "table"]
    assert len(evalx.object_path(apartment, plan, "cup")) == 3


# -- success and curves -----------------------------------------------------

def test_gold_plans_succeed_on_suite(apartment, tasks, gold_plans):
    assert evalx.success_rate(gold_plans, [("apartment", t) for t in tasks]) == 1.0
    assert evalx.success_rate([[] for _ in tasks], [(apartment, t) for t in tasks]) == 0.0


def test_mixed_batch(tasks, gold_plans):
    rng = np.random.default_rng(0)
    plans, pairs = [], []
    for i in range(10):
        t = tasks[i]
        gold = [str(a) for a in gold_plans[i]]
        if i < 7:
            plans.append(gold)
        else:  # corrupt: drop the final step, or make it illegal
            plans.append(gold[:-1] if rng.random() < 0.5 else ["grab nothing_here"] + gold)
        pairs.append(("apartment", t))
    assert evalx.success_rate(plans, pairs) == pytest.approx(0.7, abs=1e-15)
    with pytest.raises(LengthMismatch):
        evalx.success_rate(plans[:3], pairs)


def test_complexity_curve():
    res = [(2, True)] * 3 + [(2, False)] + [(8, True)] + [(8, False)] * 3
    assert evalx.complexity_curve(res) == {2: 0.75, 8: 0.25}
    assert evalx.complexity_curve([(5, True), (5, True)]) == {5: 1.0}
    assert sum(evalx.complexity_counts(res).values()) == len(res)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(1, 12), st.booleans()), min_size=1, max_size=60))
def test_complexity_counts_sum(res):
    curve, counts = evalx.complexity_curve(res), evalx.complexity_counts(res)
    assert sum(counts.values()) == len(res) and set(curve) == set(counts)
    assert sum(curve[k] * counts[k] for k in curve) == pytest.approx(sum(ok for _, ok in res))


def test_multichoice():
    assert evalx.multichoice_accuracy([1, 2, 0, 3, 1], [1, 2, 0, 0, 0]) == pytest.approx(0.6)
    assert evalx.multichoice_accuracy([0, 1, 1], [1, 0, 0]) == 0.0
    assert evalx.multichoice_accuracy([2, 2], [2, 2]) == 1.0
    with pytest.raises(LengthMismatch):
        evalx.multichoice_accuracy([1], [1, 2])


def test_eval_result_mean_and_csv():
    r = evalx.EvalResult("success_rate", "m", (1.0, 0.0, 1.0), "3")
    assert r.mean == pytest.approx(2 / 3, abs=1e-12) and r.count == 3
    assert evalx.results_csv([r]).splitlines()[0] == "metric,model_tag,bin_key,value,n"


# -- theme transfer ---------------------------------------------------------

@pytest.fixture(scope="module")
def fitted_bundle(apartment, tasks, gold_plans):
    """A weak model overfit on the suite's gold plans, so transfer scores are not all zero."""
    start, suite = apartment, tasks
    vocab = pipeline.experiment_vocabulary(start)
    recs = [corpus.InstructionRecord(corpus.render_prompt(t, start),
                                     tuple(str(a) for a in gold), t.task_name)
            for t, gold in zip(suite, gold_plans)]
    model, _ = train.train_loop(policy.init_model("weak", vocab, 0), "sft", recs,
                                train.SftConfig(learning_rate=0.05, epochs=150, batch_size=4))
    return ModelBundle(model, tag="weak_sft"), start, suite


def test_identity_theme_matches_base(fitted_bundle):
    bundle, start, suite = fitted_bundle
    base = evalx.evaluate_bundle(bundle, start, suite)
    ident = world.ThemeMap.identity(start.identifiers(), start.rooms)
    out = evalx.transfer_eval(bundle, [ident], suite, start)
    assert list(out[ident.theme_name].scores) == [float(f) for f in base]
    assert np.mean(base) > 0


def test_all_themes_evaluate(fitted_bundle):
    bundle, start, suite = fitted_bundle
    maps = [world.bundled_theme(n) for n in world.THEMES]
    out = evalx.transfer_eval(bundle, maps, suite, start)
    assert set(out) == set(world.THEMES) and "MedievalCastle" in out
    assert all(r.count == len(suite) for r in out.values())


def test_transfer_missing_mapping(fitted_bundle):
    bundle, start, suite = fitted_bundle
    with pytest.raises(MissingMapping):
        evalx.transfer_eval(bundle, [world.ThemeMap("partial", {"cup": "goblet"})], suite, start)


@pytest.mark.parametrize("name", world.THEMES)
def test_themed_gold_plans_replay(name, apartment, tasks, gold_plans):
    theme = world.bundled_theme(name)
    themed_start = world.remap_state(apartment, theme)
    for t, gold in zip(tasks, gold_plans):
        g2, p2 = world.remap_theme(t, gold, theme)
        assert evalx.plan_succeeds(p2, themed_start, g2)
        g3, p3 = world.remap_theme(g2, p2, theme.inverse())
        assert evalx.plan_succeeds(p3, apartment, g3) and g3 == t


def test_transplant_copies_rows(fitted_bundle):
    bundle, _, _ = fitted_bundle
    theme = world.bundled_theme("MedievalCastle")
    vocab, sources, masked = evalx.themed_vocabulary(bundle.strong.vocab, theme)
    moved = evalx.transplant(bundle.strong, vocab, sources)
    for new, old in sources.items():
        assert np.array_equal(moved.params["E"][new], bundle.strong.params["E"][old])
        assert np.array_equal(moved.params["U"][new], bundle.strong.params["U"][old])
    assert len(masked) == len(sources)
