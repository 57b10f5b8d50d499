"""Plan metrics, complexity curves and theme-transfer evaluation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import corpus, policy, train, w2s, world
from .errors import EmptySequence, IllegalAction, LengthMismatch, MissingMapping
from .policy import PolicyModel, Vocabulary
from .world import Action, GoalSpec, ThemeMap, WorldState


@dataclass(frozen=True)
class EvalResult:
    metric_name: str
    model_tag: str
    scores: tuple
    bin_key: Optional[str] = None

    @property
    def count(self) -> int:
        return len(self.scores)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else float("nan")

    def row(self) -> dict:
        return {"metric": self.metric_name, "model_tag": self.model_tag,
                "bin_key": "" if self.bin_key is None else str(self.bin_key),
                "value": self.mean, "n": self.count}


def results_csv(results: Sequence[EvalResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["metric", "model_tag", "bin_key", "value", "n"], lineterminator="\n")
    w.writeheader()
    for r in results:
        row = r.row()
        row["value"] = repr(row["value"])
        w.writerow(row)
    return buf.getvalue()


def results_json(results: Sequence[EvalResult]) -> str:
    return json.dumps([r.row() for r in results], indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# Sequence metrics
# ---------------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _tokens(seq) -> list:
    return seq.split() if isinstance(seq, str) else list(seq)


def rouge_l(candidate, reference) -> float:
    """LCS F-measure over tokens (strings are split on whitespace)."""
    c, r = _tokens(candidate), _tokens(reference)
    if not c or not r:
        raise EmptySequence("rouge_l needs two non-empty sequences")
    lcs = lcs_length(c, r)
    p, rec = lcs / len(c), lcs / len(r)
    return 0.0 if p + rec == 0 else 2 * p * rec / (p + rec)


def lcs_path_score(candidate_path, reference_path) -> float:
    c, r = _tokens(candidate_path), _tokens(reference_path)
    if not c or not r:
        raise EmptySequence("lcs_path_score needs two non-empty paths")
    return lcs_length(c, r) / len(r)


def object_path(start: WorldState, plan: Sequence[Action], obj: str) -> list:
    """The locations ``obj`` passes through during a replay, without repeats."""
    path = []
    for st in world.replay(start, plan):
        loc = dict(st.objects)[obj].location
        if not path or path[-1] != loc:
            path.append(loc)
    return path


def plan_action_tokens(plan: Sequence) -> list:
    """Action strings, the unit ROUGE-L is computed on."""
    return [str(a) for a in plan]


# ---------------------------------------------------------------------------
# Task metrics
# ---------------------------------------------------------------------------

Task = tuple  # (scene name or WorldState, GoalSpec)


def _start(scene: Union[str, WorldState]) -> WorldState:
    return world.bundled_scene(scene) if isinstance(scene, str) else scene


def plan_succeeds(plan: Optional[Sequence[Action]], start: WorldState, goal: GoalSpec) -> bool:
    if plan is None:
        return False
    try:
        final = world.replay(start, plan)[-1]
    except (IllegalAction, MissingMapping):
        return False
    return world.goal_satisfied(final, goal)


def success_flags(model_outputs: Sequence, tasks: Sequence[Task]) -> list:
    if len(model_outputs) != len(tasks):
        raise LengthMismatch(f"{len(model_outputs)} plans for {len(tasks)} tasks")
    cache: dict = {}
    out = []
    for plan, (scene, goal) in zip(model_outputs, tasks):
        key = scene if isinstance(scene, str) else id(scene)
        if key not in cache:
            cache[key] = _start(scene)
        if plan is not None:
            plan = [a if isinstance(a, Action) else Action.parse(a) for a in plan]
        out.append(plan_succeeds(plan, cache[key], goal))
    return out


def success_rate(model_outputs: Sequence, tasks: Sequence[Task]) -> float:
    """Share of plans that replay legally and satisfy every goal predicate."""
    flags = success_flags(model_outputs, tasks)
    return float(np.mean(flags)) if flags else 0.0


def complexity_curve(results: Sequence[tuple]) -> dict:
    """``{gold length: accuracy}`` over (gold length, success) pairs; empty bins omitted."""
    if not results:
        raise EmptySequence("complexity_curve needs at least one result")
    hits: dict = {}
    for n, ok in results:
        hits.setdefault(int(n), []).append(bool(ok))
    return {n: float(np.mean(v)) for n, v in sorted(hits.items())}


def complexity_counts(results: Sequence[tuple]) -> dict:
    out: dict = {}
    for n, _ in results:
        out[int(n)] = out.get(int(n), 0) + 1
    return dict(sorted(out.items()))


def multichoice_accuracy(preds: Sequence[int], gold: Sequence[int]) -> float:
    if len(preds) != len(gold):
        raise LengthMismatch(f"{len(preds)} predictions for {len(gold)} answers")
    if not gold:
        return 0.0
    return float(np.mean(np.asarray(preds) == np.asarray(gold)))


def results_by_bin(metric: str, tag: str, lengths: Sequence[int], flags: Sequence[bool]) -> list:
    out = []
    for n in sorted(set(lengths)):
        out.append(EvalResult(metric, tag, tuple(float(f) for f, m in zip(flags, lengths) if m == n),
                              str(n)))
    return out


# ---------------------------------------------------------------------------
# Theme transfer
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """What gets decoded: the strong model alone, or with an expert/naive pair."""

    strong: PolicyModel
    expert: Optional[PolicyModel] = None
    naive: Optional[PolicyModel] = None
    max_len: int = 24
    tag: str = "strong"
    w2s_cfg: w2s.W2sConfig = field(default_factory=w2s.W2sConfig)

    @property
    def uses_w2s(self) -> bool:
        return self.expert is not None and self.naive is not None


def themed_vocabulary(vocab: Vocabulary, theme: ThemeMap) -> tuple:
    """(extended vocabulary, {new id: source id}, renamed source ids)."""
    renamed = {t: corpus.themed_token(t, theme) for t in vocab.tokens}
    new_vocab = vocab.extended(renamed.values())
    sources = {new_vocab.index[v]: vocab.index[k] for k, v in renamed.items() if k != v}
    masked = sorted(vocab.index[k] for k, v in renamed.items() if k != v)
    return new_vocab, sources, masked


def transplant(model: PolicyModel, vocab: Vocabulary, sources: Mapping[int, int]) -> PolicyModel:
    """Copy of ``model`` over ``vocab``; new tokens inherit their source rows."""
    out = model.copy()
    out.vocab = vocab
    idx = np.array([sources[i] for i in range(len(model.vocab), len(vocab))], dtype=np.int64)
    for name in ("E", "U", "u"):
        out.params[name] = np.concatenate([model.params[name], model.params[name][idx]], axis=0)
    return out


def _masked(step: Callable, masked: Sequence[int]) -> Callable:
    if not len(masked):
        return step

    def inner(ctxs):
        lp = np.array(step(ctxs), dtype=np.float64)
        lp[:, masked] = -np.inf
        m = lp.max(axis=1, keepdims=True)
        return lp - (m + np.log(np.exp(lp - m).sum(axis=1, keepdims=True)))
    return inner


def decode_bundle(bundle: ModelBundle, prompts: Sequence[Sequence[int]],
                  masked: Sequence[int] = ()) -> list:
    """Greedy plans (token ids) for each prompt, never emitting a masked token."""
    s = bundle.strong
    if bundle.uses_w2s:
        cfg = bundle.w2s_cfg
        w2s._check(s, bundle.expert, bundle.naive, cfg)

        def step(ctxs):
            return w2s.combined_logp_batch(s, bundle.expert, bundle.naive, ctxs, cfg)[0]
    else:
        def step(ctxs):
            return policy.step_logprobs_batch(s, ctxs)
    outs = policy.lockstep(_masked(step, masked), prompts, 1, bundle.max_len, None, s.vocab.eos_id)
    return [o[0] for o in outs]


def evaluate_bundle(bundle: ModelBundle, start: WorldState, goals: Sequence[GoalSpec],
                    scene: str = "apartment", masked: Sequence[int] = (),
                    prompts: Optional[Sequence[str]] = None) -> list:
    """Success flags of the bundle's greedy plans (prompts rendered unless given)."""
    vocab = bundle.strong.vocab
    if prompts is None:
        prompts = [corpus.render_prompt(g, start, scene) for g in goals]
    ids = decode_bundle(bundle, [train.encode_prompt(vocab, x) for x in prompts], masked)
    return [plan_succeeds(train.decode_plan(vocab, o), start, g) for o, g in zip(ids, goals)]


def themed_bundle(bundle: ModelBundle, theme: ThemeMap) -> tuple:
    """(bundle over the themed vocabulary, ids to mask while decoding)."""
    vocab, sources, masked = themed_vocabulary(bundle.strong.vocab, theme)

    def move(m):
        return None if m is None else transplant(m, vocab, sources)
    out = ModelBundle(move(bundle.strong), move(bundle.expert), move(bundle.naive),
                      bundle.max_len, bundle.tag, bundle.w2s_cfg)
    return out, masked


def themed_prompt(x: str, theme: ThemeMap) -> str:
    """Word-by-word renaming, so the themed prompt keeps the source prompt's layout."""
    return " ".join(corpus.themed_token(w, theme) for w in x.split())


def transfer_eval(bundle: ModelBundle, theme_maps: Sequence[ThemeMap],
                  base_tasks: Sequence[GoalSpec], start: Optional[WorldState] = None,
                  scene: str = "apartment") -> dict:
    """Success rate per theme, keyed by theme name.

    Tasks and the start state are renamed strictly (a missing rename raises
    MissingMapping). Prompts are renamed word by word, and decoding happens in
    the extended vocabulary with the renamed source tokens masked out, so only
    the vocabulary changes between base and themed runs.
    """
    start = start if start is not None else world.bundled_scene(scene)
    base_prompts = [corpus.render_prompt(g, start, scene) for g in base_tasks]
    out = {}
    for theme in theme_maps:
        themed_start = world.remap_state(start, theme)
        goals = [world.remap_theme(g, [], theme)[0] for g in base_tasks]
        tb, masked = themed_bundle(bundle, theme)
        flags = evaluate_bundle(tb, themed_start, goals, masked=masked,
                                prompts=[themed_prompt(x, theme) for x in base_prompts])
        out[theme.theme_name] = EvalResult("success_rate", bundle.tag,
                                           tuple(float(f) for f in flags), theme.theme_name)
    return out
