"""Experiment assembly shared by the CLI and the acceptance suite.

Covers the pieces that sit between the modules: randomized household variants
used as the strong model's generic pretraining data, the apartment goal pool
with gold lengths, episodic collection, synthetic multi-choice questions and
the seeded weak-to-strong experiment itself.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import corpus, mcts, policy, train, w2s, world
from .corpus import InstructionRecord
from .errors import IllegalAction, InsufficientData
from .policy import PolicyModel, Role, Vocabulary
from .world import AGENT, Action, GoalSpec, WorldState

HOUSEHOLD = "household"
QUESTION = (";", "at")


# ---------------------------------------------------------------------------
# Scene structure
# ---------------------------------------------------------------------------

def portable_objects(state: WorldState) -> list:
    return sorted(o for o, s in state.objects if "grabbable" in s.flags)


def places(state: WorldState) -> list:
    recept = [o for o, s in state.objects if "receptacle" in s.flags]
    return sorted(state.rooms) + sorted(recept)


def answer_space(state: WorldState) -> list:
    """Possible answers to "where is X": every place, plus the agent's hands."""
    return places(state) + [AGENT]


def _toggle_pairs(flags) -> list:
    return [p for p in (("open", "closed"), ("on", "off")) if flags & set(p)]


def household_variant(base: WorldState, rng: np.random.Generator) -> WorldState:
    """Same rooms and furniture as ``base`` with objects, switches and the agent shuffled.

    Portable objects go to any place; closable containers that rest on furniture
    move to another room or open surface; every open/closed and on/off flag is redrawn.
    """
    objs = dict(base.objects)
    surfaces = sorted(base.rooms) + sorted(
        o for o, s in base.objects
        if "receptacle" in s.flags and not s.flags & {"open", "closed"})
    for oid, s in base.objects:
        if "grabbable" in s.flags:
            continue
        if s.flags & {"open", "closed"} and s.location not in base.rooms:
            objs[oid] = replace(objs[oid], location=surfaces[rng.integers(len(surfaces))])
    targets = places(base)
    for oid in portable_objects(base):
        opts = [t for t in targets if t != oid]
        objs[oid] = replace(objs[oid], location=opts[rng.integers(len(opts))])
    for oid, s in sorted(objs.items()):
        for pair in _toggle_pairs(s.flags):
            flags = (set(s.flags) - set(pair)) | {pair[rng.integers(2)]}
            s = objs[oid] = replace(s, flags=frozenset(flags))
    room = sorted(base.rooms)[rng.integers(len(base.rooms))]
    return world.make_state(base.rooms, base.adjacency, objs, room, None)


def goal_atoms(state: WorldState) -> list:
    """Single predicates usable in generated goals; cleaning is left out (BFS cost)."""
    out = [("at", o, p) for o in portable_objects(state) for p in places(state) if p != o]
    for oid, s in state.objects:
        for pair in _toggle_pairs(s.flags):
            out += [("state", oid, f) for f in pair]
    out += [("holds", o) for o in portable_objects(state)]
    return sorted(out)


def _usable(preds: Sequence[tuple], state: WorldState) -> bool:
    subjects = [p[1] for p in preds]
    if len(set(subjects)) < len(preds) or sum(p[0] == "holds" for p in preds) > 1:
        return False
    return not any(world.eval_predicates(state, GoalSpec.of(*preds)))


def random_goal(state: WorldState, rng: np.random.Generator, k: int,
                tries: int = 100) -> Optional[GoalSpec]:
    """A k-predicate goal on distinct subjects, none of whose predicates already hold."""
    atoms = goal_atoms(state)
    for _ in range(tries):
        idx = sorted(rng.choice(len(atoms), size=k, replace=False))
        preds = [atoms[i] for i in idx]
        if _usable(preds, state):
            return GoalSpec.of(*preds)
    return None


# ---------------------------------------------------------------------------
# Multi-choice questions
# ---------------------------------------------------------------------------

def where_after(start: WorldState, prefix: Sequence[Action], obj: str) -> str:
    return dict(world.replay(start, prefix)[-1].objects)[obj].location


def qa_record(start: WorldState, plan: Sequence[Action], k: int, obj: str,
              scene: str) -> InstructionRecord:
    """``question scene S``, the first k plan steps, then ``; at obj`` answered by a location.

    Questions carry their own short header so a planning window never looks like one.
    """
    ans = where_after(start, plan[:k], obj)
    y = tuple(str(a) for a in plan[:k]) + QUESTION + (obj, ans)
    return InstructionRecord(f"question scene {scene}", y, f"qa:{scene}:{obj}")


@dataclass(frozen=True)
class QAItem:
    ids: tuple  # full context ending with the question's object token
    label: int  # index into the answer space
    answer: str


def qa_item(vocab: Vocabulary, rec: InstructionRecord, answers: Sequence[str]) -> QAItem:
    ctx = train.encode_prompt(vocab, rec.x) + vocab.encode(rec.y[:-1])
    return QAItem(tuple(ctx), list(answers).index(rec.y[-1]), rec.y[-1])


def qa_records_for(start: WorldState, plan: Sequence[Action], rng: np.random.Generator,
                   scene: str, n: int = 1, max_prefix: int = 4) -> list:
    out = []
    objs = portable_objects(start)
    for _ in range(n):
        k = int(rng.integers(0, min(max_prefix, len(plan)) + 1))
        out.append(qa_record(start, plan, k, objs[rng.integers(len(objs))], scene))
    return out


def greedy_answer_accuracy(model: PolicyModel, items: Sequence[QAItem]) -> float:
    """Fraction of questions whose greedy next token is the right answer."""
    if not items:
        raise InsufficientData("no questions")
    logp = policy.step_logprobs_batch(model, [list(it.ids) for it in items])
    ans = model.vocab.encode([it.answer for it in items])
    return float(np.mean(np.argmax(logp, axis=1) == np.array(ans)))


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

def pretraining_records(base: WorldState, n_variants: int, rng: np.random.Generator,
                        goals_per_variant: int = 2, qa_per_plan: int = 1,
                        max_predicates: int = 3) -> list:
    """Scripted demonstrations on shuffled households: the strong model's generic data."""
    out = []
    for _ in range(n_variants):
        h = household_variant(base, rng)
        for _ in range(goals_per_variant):
            g = random_goal(h, rng, int(rng.integers(1, max_predicates + 1)))
            plan = world.scripted_plan(h, g) if g is not None else None
            if not plan:
                continue
            out.append(InstructionRecord(corpus.render_prompt(g, h, HOUSEHOLD),
                                         tuple(str(a) for a in plan), str(g)))
            out += qa_records_for(h, plan, rng, HOUSEHOLD, qa_per_plan)
    return out


def goal_pool(base: WorldState, max_predicates: int = 3, n_large: int = 150, seed: int = 0,
              max_depth: int = 14) -> dict:
    """Goals on ``base`` mapped to their optimal plan length.

    Every usable goal with at most two predicates is kept; ``n_large`` larger ones are sampled.
    """
    atoms = goal_atoms(base)
    small, large = [], []
    for k in range(1, max_predicates + 1):
        for c in itertools.combinations(atoms, k):
            if _usable(c, base):
                (small if k <= 2 else large).append(GoalSpec.of(*c))
    rng = np.random.default_rng(seed)
    if len(large) > n_large:
        large = [large[i] for i in sorted(rng.choice(len(large), n_large, replace=False))]
    pool = {}
    for g in small + large:
        p = world.shortest_plan(base, g, max_depth=max_depth)
        if p is not None:
            pool[g] = len(p)
    return pool


@dataclass(frozen=True)
class Episode:
    """What search left for one goal: its best positive, compacted, and a near miss."""

    plan: tuple
    failed: Optional[tuple] = None


def collect_episodes(base: WorldState, goals: Sequence[GoalSpec], simulations: int = 300,
                     seed: int = 7, scene: str = "apartment") -> dict:
    """One :class:`Episode` per goal search solved; unsolved goals are absent.

    The near miss is the failed trajectory with the highest return.
    """
    out = {}
    for g in goals:
        r = mcts.search(base, g, mcts.SearchConfig(simulations=simulations, seed=seed), scene)
        pos = [t for t in r.explored if t.label is mcts.Label.POSITIVE]
        if not pos:
            continue
        best = min(pos, key=lambda t: (len(t), [str(a) for a in t.plan]))
        neg = [t for t in r.explored if t.label is mcts.Label.NEGATIVE and len(t)]
        miss = min(neg, key=lambda t: (-t.total_return, len(t), [str(a) for a in t.plan]),
                   default=None)
        out[g] = Episode(tuple(corpus.compact_plan(best.plan, base, g)),
                         tuple(miss.plan) if miss is not None else None)
    return out


def episode_trajectories(base: WorldState, episodes: Mapping[GoalSpec, Episode],
                         goals: Sequence[GoalSpec], scene: str = "apartment") -> list:
    """Labelled trajectories (positive and near miss) for the corpus builders."""
    out = []
    for g in goals:
        ep = episodes.get(g)
        if ep is None:
            continue
        for plan in (ep.plan, ep.failed):
            if plan is None:
                continue
            states = world.replay(base, plan)
            steps = list(zip(plan, world.plan_rewards(base, plan, g)))
            out.append(mcts.make_trajectory(g, steps, states[-1], scene=scene))
    return out


def stratified_split(pool: Mapping[GoalSpec, int], held_fraction: float, seed: int) -> tuple:
    """(train, held) goal lists; every length bin with two or more goals loses at least one."""
    rng = np.random.default_rng(seed)
    train_goals, held = [], []
    for n in sorted(set(pool.values())):
        goals = sorted((g for g, v in pool.items() if v == n), key=str)
        goals = [goals[i] for i in rng.permutation(len(goals))]
        h = int(round(held_fraction * len(goals)))
        if len(goals) >= 2:
            h = min(max(h, 1), len(goals) - 1)
        held += goals[:h]
        train_goals += goals[h:]
    return sorted(train_goals, key=str), sorted(held, key=str)


# ---------------------------------------------------------------------------
# The weak-to-strong experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    n_variants: int = 1500
    held_fraction: float = 0.3
    strong_sft: train.SftConfig = field(default_factory=lambda: train.SftConfig(
        learning_rate=0.01, epochs=60, batch_size=32))
    expert_sft: train.SftConfig = field(default_factory=lambda: train.SftConfig(
        learning_rate=0.03, epochs=100, batch_size=8))
    rkl: train.RklConfig = field(default_factory=lambda: train.RklConfig(
        learning_rate=0.003, epochs=1, batch_size=16, sample_count=4, max_len=24))
    distill_sft: train.SftConfig = field(default_factory=lambda: train.SftConfig(
        learning_rate=0.003, epochs=5, batch_size=16))
    dpo: train.DpoConfig = field(default_factory=lambda: train.DpoConfig(
        learning_rate=0.001, epochs=1, batch_size=16, max_sample_len=24))
    max_len: int = 24
    qa_per_plan: int = 1
    qa_per_heldout_goal: int = 10

    def echo(self) -> dict:
        return {"n_variants": self.n_variants, "held_fraction": self.held_fraction,
                "strong_sft": self.strong_sft.echo(), "expert_sft": self.expert_sft.echo(),
                "rkl": self.rkl.echo(), "distill_sft": self.distill_sft.echo(),
                "dpo": self.dpo.echo(), "max_len": self.max_len,
                "qa_per_plan": self.qa_per_plan, "qa_per_heldout_goal": self.qa_per_heldout_goal}


def experiment_vocabulary(base: WorldState) -> Vocabulary:
    return Vocabulary(corpus.vocabulary_tokens({"apartment": base, HOUSEHOLD: base}))


def pretrain_strong(base: WorldState, cfg: ExperimentConfig = ExperimentConfig(),
                    seed: int = 0) -> PolicyModel:
    """The generic base model: StrongToy fitted to household demonstrations and questions."""
    vocab = experiment_vocabulary(base)
    pre = pretraining_records(base, cfg.n_variants, np.random.default_rng(1000 + seed),
                              qa_per_plan=cfg.qa_per_plan)
    strong = policy.init_model(policy.Capacity.STRONG_TOY, vocab, seed, Role.STRONG)
    strong, _ = train.train_loop(strong, "sft", pre, replace(cfg.strong_sft, seed=seed))
    return strong


@dataclass
class SeedRun:
    seed: int
    vocab: Vocabulary
    strong: PolicyModel
    expert: PolicyModel
    naive: PolicyModel
    train_goals: list
    held_goals: list
    plans: list  # episodic plan records (the expert's training data)
    questions: list  # episodic question records on training goals
    qa_items: list  # multi-choice questions on held-out goals


def plan_success(start: WorldState, vocab: Vocabulary, ids: Sequence[int], goal: GoalSpec) -> bool:
    plan = train.decode_plan(vocab, ids)
    if plan is None:
        return False
    try:
        final = world.replay(start, plan)[-1]
    except IllegalAction:
        return False
    return world.goal_satisfied(final, goal)


def prompts_for(vocab: Vocabulary, base: WorldState, goals: Sequence[GoalSpec]) -> list:
    return [train.encode_prompt(vocab, corpus.render_prompt(g, base, "apartment")) for g in goals]


def prepare_seed(seed: int, base: WorldState, pool: Mapping[GoalSpec, int],
                 episodes: Mapping[GoalSpec, Episode], strong: PolicyModel,
                 cfg: ExperimentConfig = ExperimentConfig()) -> SeedRun:
    """Split goals, fit the expert on the training goals' episodes, draw held-out questions.

    The naive model is the expert's own initialization, never trained.
    """
    vocab = strong.vocab
    rng = np.random.default_rng(2000 + seed)
    train_goals, held = stratified_split(pool, cfg.held_fraction, seed)
    plans, questions = [], []
    for g in train_goals:
        if g in episodes:
            plan = list(episodes[g].plan)
            plans.append(InstructionRecord(corpus.render_prompt(g, base, "apartment"),
                                           tuple(str(a) for a in plan), str(g)))
            questions += qa_records_for(base, plan, rng, "apartment", cfg.qa_per_plan)
    naive = policy.init_model(policy.Capacity.WEAK, vocab, 100 + seed, Role.NAIVE)
    expert, _ = train.train_loop(naive, "sft", plans, replace(cfg.expert_sft, seed=seed))
    expert.role = Role.EXPERT
    answers = answer_space(base)
    qa = []
    for g in held:
        plan = world.shortest_plan(base, g, max_depth=14)
        qa += [qa_item(vocab, r, answers)
               for r in qa_records_for(base, plan, rng, "apartment", cfg.qa_per_heldout_goal)]
    counts = np.bincount([q.label for q in qa], minlength=len(answers))
    qa = [q for q in qa if counts[q.label] >= 2]  # probes need two examples per answer
    return SeedRun(seed, vocab, strong, expert, naive, train_goals, held, plans, questions, qa)


def post_train(run: SeedRun, base: WorldState, episodes: Mapping[GoalSpec, Episode],
               cfg: ExperimentConfig = ExperimentConfig()) -> tuple:
    """Distill the combined policy into the strong model, then preference-tune it.

    Returns (post-trained model, reports).
    """
    prompts = prompts_for(run.vocab, base, [g for g in run.train_goals if g in episodes])
    target = train.PiBarTarget(run.strong, run.expert, run.naive)
    model, reports = train.distill(run.strong, target, prompts, run.plans + run.questions,
                                   replace(cfg.rkl, seed=run.seed),
                                   replace(cfg.distill_sft, seed=run.seed))
    trajs = episode_trajectories(base, episodes, run.train_goals)
    prefs = corpus.build_preference_dataset(trajs, 0.5, np.random.default_rng(3000 + run.seed),
                                            {"apartment": base})
    ref = model.copy()
    ref.role = Role.REFERENCE
    model, rep = train.train_loop(model, "dpo", prefs, replace(cfg.dpo, seed=run.seed), ref=ref)
    return model, reports + [rep]


def evaluate_planning(run: SeedRun, base: WorldState, goals: Sequence[GoalSpec],
                      max_len: int = 24, strong: Optional[PolicyModel] = None) -> dict:
    """Success booleans per decoding route on ``goals``."""
    strong = strong if strong is not None else run.strong
    prompts = prompts_for(run.vocab, base, goals)
    outs = {"strong": policy.greedy_batch(strong, prompts, max_len),
            "w2s": w2s.w2s_decode_batch(strong, run.expert, run.naive, prompts,
                                        w2s.W2sConfig(max_len=max_len)),
            "expert": policy.greedy_batch(run.expert, prompts, max_len)}
    return {k: [plan_success(base, run.vocab, ids, g) for ids, g in zip(v, goals)]
            for k, v in outs.items()}
