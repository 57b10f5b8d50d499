"""Instruction and preference data built from explored trajectories.

Records are plain dataclasses serialised one per line as JSON. Plans are stored
as canonical action strings (``"grab cup"``); prompts follow a fixed, versioned
template so their tokenisation never drifts between runs.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import world
from .errors import CannotInflate, EmptyDataset, IllegalAction, ReplayError, UnpairableTask
from .mcts import Label, Origin, Trajectory, make_trajectory
from .world import Action, GoalSpec, RewardParams, WorldState

TEMPLATE_VERSION = 1
TEMPLATE_WORDS = ("demo", "goal", "plan", "end", "scene", "init", ";", "question")

# canonical demonstration block shown in every prompt
DEMO_GOAL = GoalSpec.of(("state", "tv", "on"), task_name="demo")
DEMO_PLAN = (Action("switch_on", ("tv",)),)


@dataclass(frozen=True)
class InstructionRecord:
    x: str
    y: tuple  # action strings
    task: str
    template_version: int = TEMPLATE_VERSION

    def to_json(self) -> dict:
        return {"x": self.x, "y": list(self.y), "task": self.task,
                "template_version": self.template_version}

    @classmethod
    def from_json(cls, d: dict) -> "InstructionRecord":
        return cls(d["x"], tuple(d["y"]), d["task"], int(d["template_version"]))


@dataclass(frozen=True)
class PreferenceRecord:
    x: str
    y_pos: tuple
    y_neg: tuple
    neg_kind: str  # "failed" | "verbose"

    def to_json(self) -> dict:
        return {"x": self.x, "y_pos": list(self.y_pos), "y_neg": list(self.y_neg),
                "neg_kind": self.neg_kind}

    @classmethod
    def from_json(cls, d: dict) -> "PreferenceRecord":
        if d["neg_kind"] not in ("failed", "verbose"):
            raise ValueError(f"bad neg_kind {d['neg_kind']!r}")
        return cls(d["x"], tuple(d["y_pos"]), tuple(d["y_neg"]), d["neg_kind"])


@dataclass
class TaskWeights:
    weights: dict = field(default_factory=dict)
    default: float = 1.0

    def __post_init__(self):
        if self.default <= 0 or any(w <= 0 for w in self.weights.values()):
            raise ValueError("task weights must be positive")

    def __getitem__(self, task: str) -> float:
        return self.weights.get(task, self.default)


# ---------------------------------------------------------------------------
# Prompt template
# ---------------------------------------------------------------------------

def describe_state(state: WorldState) -> list:
    words = ["agent", state.agent_room]
    for oid, o in state.objects:
        words += [";", oid, o.location] + sorted(o.flags - world.CAPABILITY_FLAGS)
    return words


def plan_tokens(plan: Iterable) -> list:
    """Plans are tokenized one action per token ("put cup box"); prompts stay word-level."""
    return [str(a) for a in plan]


def action_vocabulary(state: WorldState) -> list:
    """Type-consistent action tokens for a scene, in a fixed order.

    Only actions the scene's flags could ever make legal are listed: grab and put need
    ``grabbable``, put targets are rooms or receptacles, open/close need an open or closed
    flag, and so on. This keeps the output layer small.
    """
    objs = dict(state.objects)

    def having(*flags):
        return sorted(o for o, s in objs.items() if s.flags & set(flags))

    grabbable, receptacles = having("grabbable"), having("receptacle")
    out = [f"walk {r}" for r in sorted(state.rooms)]
    out += [f"grab {o}" for o in grabbable]
    out += [f"put {o} {t}" for o in grabbable for t in sorted(state.rooms) + receptacles if t != o]
    out += [f"{v} {o}" for v in ("open", "close") for o in having("open", "closed")]
    out += [f"{v} {o}" for v in ("switch_on", "switch_off") for o in having("on", "off")]
    out += [f"clean {o}" for o in having("clean", "dirty")]
    return out


def themed_token(tok: str, theme: world.ThemeMap) -> str:
    """Rename the identifiers inside a (word or action) token; other words pass through."""
    return " ".join(theme.scene_renames.get(w, theme.rename(w, strict=False)) for w in tok.split())


def render_prompt(goal: GoalSpec, start: WorldState, scene: str = "apartment") -> str:
    """Template v1: demonstration, scene and initial conditions, then the inquiry.

    The inquiry comes last so it sits nearest to the plan being generated.
    """
    words = (["demo", "goal"] + DEMO_GOAL.tokens() + ["plan"] + str(DEMO_PLAN[0]).split() + ["end"]
             + ["scene", scene, "init"] + describe_state(start)
             + ["goal"] + goal.tokens() + ["plan"])
    return " ".join(words)


def vocabulary_tokens(scenes: Mapping[str, WorldState], extra: Iterable[str] = ()) -> list:
    """Every token a prompt or plan over these scenes can contain, in a fixed order."""
    fixed = list(dict.fromkeys(list(TEMPLATE_WORDS) + list(world.VERBS) + list(world.PREDICATE_ARITY)
                               + sorted(world.KNOWN_FLAGS) + [world.AGENT]))
    idents = set(scenes)
    for st in scenes.values():
        idents |= st.identifiers()
    idents |= set(extra)
    words = fixed + sorted(idents - set(fixed))
    actions = [a for name in sorted(scenes) for a in action_vocabulary(scenes[name])]
    return words + [a for a in dict.fromkeys(actions) if a not in set(words)]


def parse_prompt(x: str) -> tuple:
    """Recover (scene name, goal) from a rendered prompt."""
    words = x.split()
    try:
        scene = words[words.index("scene") + 1]
        last_goal = len(words) - 1 - words[::-1].index("goal")
        body = words[last_goal + 1:-1]
    except (ValueError, IndexError):
        raise ValueError("prompt does not follow template v1") from None
    preds, i = [], 0
    while i < len(body):
        n = world.PREDICATE_ARITY[body[i]]
        preds.append(tuple(body[i:i + n + 1]))
        i += n + 1
    return scene, GoalSpec.of(*preds)


# ---------------------------------------------------------------------------
# Labelling and inflation
# ---------------------------------------------------------------------------

def replay_plan(start: WorldState, plan: Sequence[Action]) -> list:
    try:
        return world.replay(start, plan)
    except IllegalAction as exc:
        raise ReplayError(str(exc)) from None


def label_trajectory(traj: Trajectory, goal: GoalSpec, start: Optional[WorldState] = None) -> Label:
    """Replay from ``start`` (default: the trajectory's bundled scene) and check the goal."""
    start = start if start is not None else world.bundled_scene(traj.scene)
    final = replay_plan(start, traj.plan)[-1]
    return Label.POSITIVE if world.goal_satisfied(final, goal) else Label.NEGATIVE


def _reaches(start: WorldState, plan: Sequence[Action], goal: GoalSpec) -> bool:
    try:
        return world.goal_satisfied(world.replay(start, plan)[-1], goal)
    except IllegalAction:
        return False


def compact_plan(plan: Sequence[Action], start: WorldState, goal: GoalSpec) -> list:
    """Drop steps (singly, then in pairs) while the plan still reaches the goal.

    The result is locally minimal: no single step or pair of steps can be
    removed. Search episodes carry detours; their compacted form is what the
    instruction corpus keeps.
    """
    plan = list(plan)
    if not _reaches(start, plan, goal):
        raise ReplayError("plan does not reach its goal")
    changed = True
    while changed:
        changed = False
        for i in range(len(plan)):
            cand = plan[:i] + plan[i + 1:]
            if _reaches(start, cand, goal):
                plan, changed = cand, True
                break
        if changed:
            continue
        for i in range(len(plan)):
            for j in range(i + 1, len(plan)):
                cand = plan[:i] + plan[i + 1:j] + plan[j + 1:]
                if _reaches(start, cand, goal):
                    plan, changed = cand, True
                    break
            if changed:
                break
    return plan


def _restores(s: WorldState, s2: WorldState) -> bool:
    return s.key() == s2.key()


def _no_progress(prev: WorldState, nxt: WorldState, goal: Optional[GoalSpec]) -> bool:
    return goal is None or not world.newly_satisfied(prev, nxt, goal)


def _insertions(states: list, plan: list, budget: int, goal: Optional[GoalSpec]) -> list:
    """Every (position, segment) that leaves the rest of the plan untouched."""
    out = []
    for i, s in enumerate(states):
        for a in world.legal_actions(s):
            sa = world.apply(s, a)
            if not _no_progress(s, sa, goal):
                continue
            if i < len(plan) and budget >= 1:
                # a detour absorbed by the next planned step
                nxt = plan[i]
                if world.is_legal(sa, nxt) and _restores(world.apply(sa, nxt), states[i + 1]) \
                        and not _restores(sa, s):
                    out.append((i, (a,)))
            if budget >= 2:
                for b in world.legal_actions(sa):
                    sb = world.apply(sa, b)
                    if _restores(sb, s) and _no_progress(sa, sb, goal):
                        out.append((i, (a, b)))
    return out


def inject_redundancy(plan: Sequence[Action], k: int, rng: np.random.Generator,
                      start: WorldState, goal: Optional[GoalSpec] = None,
                      params: RewardParams = RewardParams()) -> list:
    """Insert exactly ``k`` no-progress steps into a legal plan.

    Segments are detours absorbed by the next step, or undo pairs (open/close,
    walk there and back, grab/put back, toggle twice). With ``goal`` given,
    inserted steps never satisfy a predicate, so the return drops by exactly
    ``k * irrelevant_step_penalty``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    current = list(plan)
    base_final = replay_plan(start, current)[-1]
    base_return = sum(world.plan_rewards(start, current, goal, params)) if goal else None
    remaining = k
    while remaining:
        states = replay_plan(start, current)
        options = _insertions(states, current, remaining, goal)
        if remaining % 2 == 1 and remaining > 1:
            # keep an odd remainder solvable: take a single step while one exists
            singles = [o for o in options if len(o[1]) == 1]
            options = singles or options
        if remaining == 1:
            options = [o for o in options if len(o[1]) == 1]
        if not options:
            raise CannotInflate(f"no no-progress insertion of length <= {remaining} exists")
        pos, seg = options[int(rng.integers(len(options)))]
        current = current[:pos] + list(seg) + current[pos:]
        remaining -= len(seg)
    final = replay_plan(start, current)[-1]
    assert _restores(final, base_final)
    if goal is not None:
        got = sum(world.plan_rewards(start, current, goal, params))
        assert abs(got - (base_return + k * params.irrelevant_step_penalty)) < 1e-9
    return current


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def _scene_lookup(scenes: Optional[Mapping[str, WorldState]]):
    cache = dict(scenes or {})

    def get(name: str) -> WorldState:
        if name not in cache:
            cache[name] = world.bundled_scene(name)
        return cache[name]
    return get


def _task_key(t: Trajectory) -> str:
    return t.goal.task_name or str(t.goal)


def build_instruction_dataset(explored: Sequence[Trajectory], weights: TaskWeights = TaskWeights(),
                              scenes: Optional[Mapping[str, WorldState]] = None,
                              shortest_only: bool = False) -> list:
    """One record per distinct Positive plan (per task and scene).

    ``shortest_only`` keeps just the most compact positives of each task.
    ``weights`` is not stored in the records; it is consumed by the loss.
    """
    del weights  # weights apply at loss time; accepted for interface symmetry
    get = _scene_lookup(scenes)
    groups: dict = defaultdict(set)
    for t in explored:
        if t.label is Label.POSITIVE:
            groups[(t.scene, _task_key(t), t.goal)].add(tuple(str(a) for a in t.plan))
    if not groups:
        raise EmptyDataset("no positive trajectories to learn from")
    records = []
    for (scene, task, goal), plans in sorted(groups.items(), key=lambda kv: kv[0][:2]):
        x = render_prompt(goal, get(scene), scene)
        plans = sorted(plans, key=lambda p: (len(p), p))
        if shortest_only:
            plans = [p for p in plans if len(p) == len(plans[0])]
        records.extend(InstructionRecord(x, p, task) for p in plans)
    seen, out = set(), []
    for r in records:
        if (r.x, r.y) not in seen:
            seen.add((r.x, r.y))
            out.append(r)
    return out


def build_preference_dataset(explored: Sequence[Trajectory], redundancy_ratio: float = 0.5,
                             rng: Optional[np.random.Generator] = None,
                             scenes: Optional[Mapping[str, WorldState]] = None,
                             shortest_only: bool = False,
                             params: RewardParams = RewardParams()) -> list:
    if not 0.0 <= redundancy_ratio <= 1.0:
        raise ValueError("redundancy_ratio must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    get = _scene_lookup(scenes)
    pos: dict = defaultdict(set)
    neg: dict = defaultdict(set)
    for t in explored:
        key = (t.scene, _task_key(t), t.goal)
        (pos if t.label is Label.POSITIVE else neg)[key].add(tuple(str(a) for a in t.plan))
    if not pos:
        raise EmptyDataset("no positive trajectories to pair")
    out, seen = [], set()
    for key in sorted(pos, key=lambda k: k[:2]):
        scene, task, goal = key
        start = get(scene)
        x = render_prompt(goal, start, scene)
        positives = sorted(pos[key], key=lambda p: (len(p), p))
        if shortest_only:
            positives = [p for p in positives if len(p) == len(positives[0])]
        failed = sorted(neg.get(key, ()), key=lambda p: (len(p), p))
        n_before = len(out)
        for y_pos in positives:
            candidates = []
            if failed:
                y_neg = failed[int(rng.integers(len(failed)))]
                candidates.append((y_neg, "failed"))
            if redundancy_ratio > 0 and rng.random() < redundancy_ratio:
                k = int(rng.integers(1, 4))
                plan = [Action.parse(a) for a in y_pos]
                try:
                    verbose = inject_redundancy(plan, k, rng, start, goal, params)
                except CannotInflate:
                    verbose = None
                if verbose is not None:
                    candidates.append((tuple(str(a) for a in verbose), "verbose"))
            for y_neg, kind in candidates:
                rec = PreferenceRecord(x, y_pos, y_neg, kind)
                if (rec.x, rec.y_pos, rec.y_neg) not in seen:
                    seen.add((rec.x, rec.y_pos, rec.y_neg))
                    out.append(rec)
        if len(out) == n_before:
            raise UnpairableTask(f"task {task!r} has positives but no usable negative")
    return out


# ---------------------------------------------------------------------------
# JSON Lines
# ---------------------------------------------------------------------------

def trajectory_to_json(t: Trajectory) -> dict:
    return {"task": _task_key(t), "goal": str(t.goal), "scene": t.scene,
            "plan": [str(a) for a in t.plan], "rewards": t.rewards,
            "return": t.total_return, "label": t.label.value, "origin": t.origin.value}


def trajectory_from_json(d: dict) -> Trajectory:
    goal = GoalSpec.parse(d["goal"], task_name=d["task"])
    steps = tuple((Action.parse(a), float(r)) for a, r in zip(d["plan"], d["rewards"]))
    return Trajectory(goal, steps, float(d["return"]), Label(d["label"]), Origin(d["origin"]),
                      d.get("scene", "apartment"))


def dumps_jsonl(rows: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def loads_jsonl(text: str) -> list:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_jsonl(rows))


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return loads_jsonl(fh.read())


def serialize_instructions(records: Iterable[InstructionRecord]) -> str:
    return dumps_jsonl(r.to_json() for r in records)


def deserialize_instructions(text: str) -> list:
    return [InstructionRecord.from_json(d) for d in loads_jsonl(text)]


def serialize_preferences(records: Iterable[PreferenceRecord]) -> str:
    return dumps_jsonl(r.to_json() for r in records)


def deserialize_preferences(text: str) -> list:
    return [PreferenceRecord.from_json(d) for d in loads_jsonl(text)]


def serialize_trajectories(trajs: Iterable[Trajectory]) -> str:
    return dumps_jsonl(trajectory_to_json(t) for t in trajs)


def deserialize_trajectories(text: str) -> list:
    return [trajectory_from_json(d) for d in loads_jsonl(text)]


def verbose_trajectory(goal: GoalSpec, plan: Sequence[Action], start: WorldState,
                       scene: str = "apartment", params: RewardParams = RewardParams()) -> Trajectory:
    """Wrap an inflated plan as a trajectory tagged with its origin."""
    states = replay_plan(start, plan)
    rewards = [world.step_reward(a, b, goal, params) for a, b in zip(states, states[1:])]
    return make_trajectory(goal, zip(plan, rewards), states[-1], Origin.REDUNDANCY_INJECTION, scene)
