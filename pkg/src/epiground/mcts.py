"""Goal-directed UCT search over the household simulator.

Each simulation runs selection, expansion, a rollout and backpropagation and
yields one complete episode (tree path plus rollout tail), which is kept as an
explored trajectory for the corpus.

Within an episode a goal predicate is credited the first time it becomes true;
re-satisfying it after undoing it only costs the step penalty. This closes the
toggle loop (satisfy, undo, satisfy, ...) that would otherwise out-earn finishing
the task, and it bounds every return by ``predicate_bonus * len(goal)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np

from . import world
from .errors import DomainError, NothingToExpand
from .world import Action, GoalSpec, RewardParams, WorldState


class Label(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class Origin(str, Enum):
    SEARCH = "search"
    REDUNDANCY_INJECTION = "redundancy_injection"


@dataclass(frozen=True)
class Trajectory:
    goal: GoalSpec
    steps: tuple  # ((Action, reward), ...)
    total_return: float
    label: Label
    origin: Origin = Origin.SEARCH
    scene: str = "apartment"

    @property
    def plan(self) -> list:
        return [a for a, _ in self.steps]

    @property
    def rewards(self) -> list:
        return [r for _, r in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


def make_trajectory(goal: GoalSpec, steps, final_state: WorldState,
                    origin: Origin = Origin.SEARCH, scene: str = "apartment") -> Trajectory:
    steps = tuple(steps)
    label = Label.POSITIVE if world.goal_satisfied(final_state, goal) else Label.NEGATIVE
    return Trajectory(goal, steps, math.fsum(r for _, r in steps), label, origin, scene)


# a guided rollout policy picks one of the legal actions
RolloutChooser = Callable[[WorldState, GoalSpec, list, np.random.Generator], Action]


@dataclass
class SearchConfig:
    exploration_c: float = 0.1
    simulations: int = 2000
    max_depth: int = 20
    rollout_policy: Union[str, RolloutChooser] = "uniform"
    seed: int = 0
    reward: RewardParams = field(default_factory=RewardParams)

    def __post_init__(self):
        if self.exploration_c < 0:
            raise ValueError("exploration_c must be >= 0")
        if self.simulations < 1:
            raise ValueError("simulations must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")

    def echo(self) -> dict:
        policy = self.rollout_policy if isinstance(self.rollout_policy, str) else "policy_guided"
        return {"exploration_c": self.exploration_c, "simulations": self.simulations,
                "max_depth": self.max_depth, "rollout_policy": policy, "seed": self.seed,
                "predicate_bonus": self.reward.predicate_bonus,
                "irrelevant_step_penalty": self.reward.irrelevant_step_penalty}


def credited_reward(prev: WorldState, nxt: WorldState, goal: GoalSpec,
                    params: RewardParams, credited: frozenset) -> tuple:
    """Step reward with once-per-episode crediting; returns (reward, credited')."""
    fresh = set(world.newly_satisfied(prev, nxt, goal)) - credited
    if fresh:
        return params.predicate_bonus * len(fresh), credited | fresh
    return params.irrelevant_step_penalty, credited


class SearchNode:
    __slots__ = ("state", "incoming_action", "parent", "Q", "N_sa", "N_s", "children",
                 "untried", "depth", "reward", "credited", "satisfied", "goal", "cfg")

    def __init__(self, state: WorldState, goal: GoalSpec, cfg: SearchConfig,
                 incoming_action: Optional[Action] = None, parent: Optional["SearchNode"] = None,
                 reward: float = 0.0, credited: frozenset = frozenset()):
        self.state = state
        self.goal = goal
        self.cfg = cfg
        self.incoming_action = incoming_action
        self.parent = parent
        self.Q: dict = {}
        self.N_sa: dict = {}
        self.N_s = 1
        self.children: dict = {}
        self.depth = 0 if parent is None else parent.depth + 1
        self.reward = reward
        self.credited = credited
        self.satisfied = world.goal_satisfied(state, goal)
        if self.satisfied or self.depth >= cfg.max_depth:
            self.untried: list = []
        else:
            self.untried = world.legal_actions(state)

    @property
    def terminal(self) -> bool:
        return not self.untried and not self.children

    def path_steps(self) -> list:
        node, out = self, []
        while node.parent is not None:
            out.append((node.incoming_action, node.reward))
            node = node.parent
        return out[::-1]


def uct_score(q: float, n_s: int, n_sa: int, c: float) -> float:
    if n_sa < 1:
        raise DomainError("unvisited child reached UCT scoring")
    if n_s < 1:
        raise DomainError("parent visit count must be >= 1")
    return q + c * math.sqrt(math.log(n_s) / n_sa)


def select(root: SearchNode, cfg: SearchConfig) -> list:
    path = [root]
    node = root
    while not node.untried and node.children:
        best, best_score = None, -math.inf
        for a, child in node.children.items():  # canonical insertion order
            if node.N_sa.get(a, 0) == 0:
                best = a
                break
            score = uct_score(node.Q[a], node.N_s, node.N_sa[a], cfg.exploration_c)
            if score > best_score:
                best, best_score = a, score
        node = node.children[best]
        path.append(node)
    return path


def expand(node: SearchNode, rng: Optional[np.random.Generator] = None) -> SearchNode:
    """Expand the first untried action; ``rng`` is unused under canonical ordering."""
    if not node.untried:
        raise NothingToExpand("node has no untried actions")
    action = node.untried.pop(0)
    nxt = world.apply(node.state, action)
    reward, credited = credited_reward(node.state, nxt, node.goal, node.cfg.reward, node.credited)
    child = SearchNode(nxt, node.goal, node.cfg, action, node, reward, credited)
    node.children[action] = child
    node.N_sa[action] = 0
    return child


def rollout(state: WorldState, goal: GoalSpec, cfg: SearchConfig, rng: np.random.Generator,
            depth: int = 0, credited: frozenset = frozenset()) -> tuple:
    """Simulate from ``state`` (already ``depth`` steps into the episode)."""
    ret, tail = 0.0, []
    chooser = cfg.rollout_policy
    while depth < cfg.max_depth and not world.goal_satisfied(state, goal):
        legal = world.legal_actions(state)
        if not legal:
            break
        if chooser == "uniform":
            action = legal[int(rng.integers(len(legal)))]
        else:
            action = chooser(state, goal, legal, rng)
        nxt = world.apply(state, action)
        reward, credited = credited_reward(state, nxt, goal, cfg.reward, credited)
        tail.append((action, reward))
        ret += reward
        state, depth = nxt, depth + 1
    return ret, tail


def backprop(path: list, action_taken_at_each: list, ret: float) -> None:
    for node, a in zip(path, action_taken_at_each):
        n = node.N_sa.get(a, 0) + 1
        node.N_sa[a] = n
        node.N_s += 1
        q = node.Q.get(a, 0.0)
        node.Q[a] = q + (ret - q) / n


def greedy_path(root: SearchNode) -> list:
    """Descend by visit count, then Q, then canonical order."""
    node, out = root, [root]
    while node.children:
        best = max(node.children, key=lambda a: (node.N_sa.get(a, 0), node.Q.get(a, -math.inf)))
        # max() keeps the first maximal key, i.e. canonical order among ties
        node = node.children[best]
        out.append(node)
    return out


@dataclass
class SearchResult:
    best_plan: Trajectory
    explored: list
    root: SearchNode
    iterations: int
    budget_too_small: bool

    def __iter__(self):
        return iter((self.best_plan, self.explored))


def search(start: WorldState, goal: GoalSpec, cfg: SearchConfig = SearchConfig(),
           scene: str = "apartment") -> SearchResult:
    rng = np.random.default_rng(cfg.seed)
    root = SearchNode(start, goal, cfg)
    explored = []
    iterations = 0
    if not root.terminal:
        for _ in range(cfg.simulations):
            path = select(root, cfg)
            leaf = path[-1]
            if leaf.untried:
                leaf = expand(leaf, rng)
                path.append(leaf)
            tail_ret, tail = rollout(leaf.state, goal, cfg, rng, leaf.depth, leaf.credited)
            steps = leaf.path_steps()
            ret = math.fsum(r for _, r in steps) + tail_ret
            backprop(path, [n.incoming_action for n in path[1:]], ret)
            final = leaf.state
            for a, _ in tail:
                final = world.apply(final, a)
            explored.append(make_trajectory(goal, steps + tail, final, scene=scene))
            iterations += 1

    best_leaf = greedy_path(root)[-1]
    best = make_trajectory(goal, best_leaf.path_steps(), best_leaf.state, scene=scene)
    found = any(t.label is Label.POSITIVE for t in explored) or best.label is Label.POSITIVE
    return SearchResult(best, explored, root, iterations, not found)


def uniform_rollouts(start: WorldState, goal: GoalSpec, cfg: SearchConfig = SearchConfig()) -> float:
    """Fraction of ``cfg.simulations`` independent uniform rollouts that reach the goal."""
    rng = np.random.default_rng(cfg.seed)
    wins = 0
    uniform = SearchConfig(cfg.exploration_c, cfg.simulations, cfg.max_depth, "uniform",
                           cfg.seed, cfg.reward)
    for _ in range(cfg.simulations):
        state = start
        _, tail = rollout(state, goal, uniform, rng)
        for a, _ in tail:
            state = world.apply(state, a)
        wins += world.goal_satisfied(state, goal)
    return wins / cfg.simulations
