"""Closed-world household simulator.

States are immutable values; every transition returns a new state. Object
affordances are carried entirely by property flags, so a renamed object keeps
exactly the verbs it supported before renaming.

Flags:
    grabbable, receptacle            capabilities
    open / closed                    openable objects (closed containers hide their contents)
    on / off                         switchable objects
    clean / dirty                    cleanable objects
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping, Optional, Sequence

import yaml

from .errors import DanglingReference, IllegalAction, MissingMapping, ParseError, UnknownEntity

FORMAT_VERSION = 1

VERBS = ("walk", "grab", "put", "open", "close", "switch_on", "switch_off", "clean")
ARITY = {"walk": 1, "grab": 1, "put": 2, "open": 1, "close": 1,
         "switch_on": 1, "switch_off": 1, "clean": 1}
PREDICATES = ("at", "holds", "state")
PREDICATE_ARITY = {"at": 2, "holds": 1, "state": 2}

AGENT = "agent"
CAPABILITY_FLAGS = frozenset({"grabbable", "receptacle"})
TOGGLES = {"open": "closed", "closed": "open", "on": "off", "off": "on",
           "clean": "dirty", "dirty": "clean"}
KNOWN_FLAGS = CAPABILITY_FLAGS | frozenset(TOGGLES)

THEMES = ("AndersenFairyTales", "AncientEgyptian", "WildWest", "OuterSpace", "MedievalCastle")


@dataclass(frozen=True)
class ObjectState:
    type: str
    location: str
    flags: frozenset = frozenset()


@dataclass(frozen=True, order=True)
class Action:
    verb: str
    args: tuple = ()

    def __post_init__(self):
        if self.verb not in ARITY:
            raise ValueError(f"unknown verb {self.verb!r}")
        if len(self.args) != ARITY[self.verb]:
            raise ValueError(f"{self.verb} takes {ARITY[self.verb]} argument(s), got {len(self.args)}")

    def __str__(self) -> str:
        return " ".join((self.verb,) + tuple(self.args))

    @classmethod
    def parse(cls, text: str) -> "Action":
        parts = text.split()
        if not parts:
            raise ValueError("empty action string")
        return cls(parts[0], tuple(parts[1:]))

    def sort_key(self):
        return (VERBS.index(self.verb), self.args)


@dataclass(frozen=True)
class WorldState:
    rooms: frozenset
    adjacency: frozenset  # sorted (room, room) pairs
    objects: tuple  # sorted (object_id, ObjectState) pairs
    agent_room: str
    agent_holding: Optional[str] = None
    clock: int = 0

    @functools.cached_property
    def _index(self) -> dict:
        return dict(self.objects)

    def obj(self, oid: str) -> ObjectState:
        try:
            return self._index[oid]
        except KeyError:
            raise UnknownEntity(f"unknown object {oid!r}") from None

    def has_object(self, oid: str) -> bool:
        return oid in self._index

    @property
    def object_ids(self) -> tuple:
        return tuple(oid for oid, _ in self.objects)

    def neighbors(self, room: str) -> list:
        out = [b if a == room else a for a, b in self.adjacency if room in (a, b)]
        return sorted(out)

    def resolve_room(self, oid: str) -> str:
        loc = self.obj(oid).location
        seen = {oid}
        while loc not in self.rooms:
            if loc == AGENT:
                return self.agent_room
            if loc in seen:
                raise DanglingReference(f"containment cycle through {loc!r}")
            seen.add(loc)
            loc = self.obj(loc).location
        return loc

    def accessible(self, oid: str) -> bool:
        """Co-located with the agent and not sealed inside a closed container."""
        loc = self.obj(oid).location
        while loc not in self.rooms:
            if loc == AGENT:
                return True
            container = self.obj(loc)
            if "closed" in container.flags:
                return False
            loc = container.location
        return loc == self.agent_room

    def __hash__(self) -> int:
        h = self.__dict__.get("_hash")
        if h is None:
            h = hash((self.rooms, self.adjacency, self.objects, self.agent_room,
                      self.agent_holding, self.clock))
            object.__setattr__(self, "_hash", h)
        return h

    def key(self) -> "WorldState":
        """The state with the clock zeroed; equal keys mean equal situations."""
        if not self.clock:
            return self
        return WorldState(self.rooms, self.adjacency, self.objects, self.agent_room,
                          self.agent_holding, 0)

    def evolve(self, *, agent_room=None, agent_holding=..., clock=None, objects=None) -> "WorldState":
        return WorldState(self.rooms, self.adjacency,
                          self.objects if objects is None else objects,
                          self.agent_room if agent_room is None else agent_room,
                          self.agent_holding if agent_holding is ... else agent_holding,
                          self.clock if clock is None else clock)

    def with_object(self, oid: str, location=None, flags=None) -> "WorldState":
        objs = tuple(
            (k, ObjectState(v.type, v.location if location is None else location,
                            v.flags if flags is None else flags)) if k == oid else (k, v)
            for k, v in self.objects)
        return self.evolve(objects=objs)

    def identifiers(self) -> set:
        return set(self.rooms) | set(self._index)


def make_state(rooms: Iterable[str], adjacency: Iterable[Sequence[str]],
               objects: Mapping[str, ObjectState], agent_room: str,
               agent_holding: Optional[str] = None, clock: int = 0) -> WorldState:
    adj = frozenset(tuple(sorted(pair)) for pair in adjacency)
    return WorldState(frozenset(rooms), adj, tuple(sorted(objects.items())),
                      agent_room, agent_holding, clock)


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------

def _parse_yaml(text: str, what: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"{what}: malformed text: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{what}: expected a mapping at top level")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{what}: unsupported format_version {doc.get('format_version')!r}")
    return doc


def _flag_name(flag) -> str:
    # YAML 1.1 reads bare on/off as booleans
    if flag is True:
        return "on"
    if flag is False:
        return "off"
    return str(flag)


def load_scene(scene_spec: str) -> WorldState:
    doc = _parse_yaml(scene_spec, "scene")
    rooms = doc.get("rooms") or []
    if not isinstance(rooms, list) or not rooms:
        raise ParseError("scene: at least one room is required")
    if len(set(rooms)) != len(rooms):
        raise ParseError("scene: duplicate room identifiers")
    rooms = [str(r) for r in rooms]
    room_set = set(rooms)

    adjacency = []
    for pair in doc.get("adjacency") or []:
        if not isinstance(pair, list) or len(pair) != 2:
            raise ParseError(f"scene: adjacency entries must be pairs, got {pair!r}")
        for r in pair:
            if r not in room_set:
                raise DanglingReference(f"scene: adjacency names unknown room {r!r}")
        if pair[0] == pair[1]:
            raise ParseError(f"scene: room {pair[0]!r} adjacent to itself")
        adjacency.append(pair)

    objects: dict = {}
    for entry in doc.get("objects") or []:
        if not isinstance(entry, dict) or not {"id", "type", "location"} <= set(entry):
            raise ParseError(f"scene: object entries need id, type and location: {entry!r}")
        oid, loc = str(entry["id"]), str(entry["location"])
        if oid in objects or oid in room_set or oid == AGENT:
            raise ParseError(f"scene: identifier {oid!r} defined twice")
        if loc not in room_set and loc not in objects:
            raise DanglingReference(f"scene: object {oid!r} placed in undefined location {loc!r}")
        if loc in objects and "receptacle" not in objects[loc].flags:
            raise ParseError(f"scene: {loc!r} cannot hold objects")
        flags = frozenset(_flag_name(f) for f in entry.get("flags") or [])
        unknown = flags - KNOWN_FLAGS
        if unknown:
            raise ParseError(f"scene: unknown flags {sorted(unknown)} on {oid!r}")
        for a, b in (("open", "closed"), ("on", "off"), ("clean", "dirty")):
            if a in flags and b in flags:
                raise ParseError(f"scene: {oid!r} is both {a} and {b}")
        objects[oid] = ObjectState(str(entry["type"]), loc, flags)

    agent = doc.get("agent")
    if not isinstance(agent, dict) or "room" not in agent:
        raise ParseError("scene: agent section with a room is required")
    if agent["room"] not in room_set:
        raise DanglingReference(f"scene: agent placed in undefined room {agent['room']!r}")
    holding = agent.get("holding")
    if holding is not None:
        if holding not in objects:
            raise DanglingReference(f"scene: agent holds undefined object {holding!r}")
        objects[holding] = replace(objects[holding], location=AGENT)
    return make_state(rooms, adjacency, objects, agent["room"], holding)


def dump_scene(state: WorldState) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "rooms": sorted(state.rooms),
        "adjacency": [list(p) for p in sorted(state.adjacency)],
        "objects": [],
        "agent": {"room": state.agent_room, "holding": state.agent_holding},
    }
    # containers must precede their contents
    placed: set = set()
    pending = list(state.objects)
    while pending:
        rest = []
        for oid, o in pending:
            if o.location in state.rooms or o.location in placed or o.location == AGENT:
                loc = state.agent_room if o.location == AGENT else o.location
                doc["objects"].append({"id": oid, "type": o.type, "location": loc,
                                       "flags": sorted(o.flags)})
                placed.add(oid)
            else:
                rest.append((oid, o))
        if len(rest) == len(pending):
            raise DanglingReference("scene: unresolvable containment")
        pending = rest
    return yaml.safe_dump(doc, sort_keys=False)


def bundled_text(name: str) -> str:
    return resources.files("epiground").joinpath(f"data/{name}").read_text()


def bundled_scene(name: str = "apartment") -> WorldState:
    return load_scene(bundled_text(f"{name}.scene"))


# ---------------------------------------------------------------------------
# Transitions
# ---------------------------------------------------------------------------

def _violation(state: WorldState, action: Action) -> Optional[str]:
    """Return why ``action`` is inapplicable, or None when it applies."""
    verb, args = action.verb, action.args
    if verb == "walk":
        (room,) = args
        if room not in state.rooms:
            return f"no room {room!r}"
        if room == state.agent_room or tuple(sorted((room, state.agent_room))) not in state.adjacency:
            return f"{room!r} is not adjacent to {state.agent_room!r}"
        return None

    oid = args[0]
    if not state.has_object(oid):
        return f"no object {oid!r}"
    o = state.obj(oid)
    if verb == "put":
        target = args[1]
        if state.agent_holding != oid:
            return f"agent is not holding {oid!r}"
        if target == state.agent_room:
            return None
        if target == oid or not state.has_object(target):
            return f"invalid target {target!r}"
        t = state.obj(target)
        if "receptacle" not in t.flags:
            return f"{target!r} is not a receptacle"
        if "closed" in t.flags:
            return f"{target!r} is closed"
        if t.location == AGENT or not state.accessible(target):
            return f"{target!r} is not reachable"
        return None
    if not state.accessible(oid):
        return f"{oid!r} is not reachable"
    if verb == "grab":
        if "grabbable" not in o.flags:
            return f"{oid!r} cannot be grabbed"
        if state.agent_holding is not None:
            return "hands are full"
        return None
    required = _REQUIRED_FLAG[verb]
    if required not in o.flags:
        return f"{verb} needs {oid!r} to be {required}"
    return None


_REQUIRED_FLAG = {"open": "closed", "close": "open", "switch_on": "off",
                  "switch_off": "on", "clean": "dirty"}


@functools.lru_cache(maxsize=524288)
def _transition(key: WorldState, action: Action) -> WorldState:
    why = _violation(key, action)
    if why is not None:
        raise IllegalAction(f"{action}: {why}")
    verb, args = action.verb, action.args
    if verb == "walk":
        return key.evolve(agent_room=args[0])
    if verb == "grab":
        return key.with_object(args[0], location=AGENT).evolve(agent_holding=args[0])
    if verb == "put":
        return key.with_object(args[0], location=args[1]).evolve(agent_holding=None)
    oid = args[0]
    old = _REQUIRED_FLAG[verb]
    return key.with_object(oid, flags=(key.obj(oid).flags - {old}) | {TOGGLES[old]})


def apply(state: WorldState, action: Action) -> WorldState:
    return _transition(state.key(), action).evolve(clock=state.clock + 1)


def is_legal(state: WorldState, action: Action) -> bool:
    return _violation(state, action) is None


def _candidates(state: WorldState) -> Iterable[Action]:
    for room in state.neighbors(state.agent_room):
        yield Action("walk", (room,))
    held = state.agent_holding
    for oid, o in state.objects:
        if not state.accessible(oid):
            continue
        if oid != held:
            yield Action("grab", (oid,))
            if held is not None and "receptacle" in o.flags:
                yield Action("put", (held, oid))
        for verb in ("open", "close", "switch_on", "switch_off", "clean"):
            yield Action(verb, (oid,))
    if held is not None:
        yield Action("put", (held, state.agent_room))


@functools.lru_cache(maxsize=262144)
def _legal_for_key(key: WorldState) -> tuple:
    acts = {a for a in _candidates(key) if _violation(key, a) is None}
    return tuple(sorted(acts, key=Action.sort_key))


def legal_actions(state: WorldState) -> list:
    """Applicable actions in canonical order (verb order, then arguments)."""
    return list(_legal_for_key(state.key()))


# ---------------------------------------------------------------------------
# Goals and rewards
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoalSpec:
    predicates: tuple  # ((name, (arg, ...)), ...)
    task_name: str = ""

    def __post_init__(self):
        if not self.predicates:
            raise ValueError("a goal needs at least one predicate")
        for name, args in self.predicates:
            if name not in PREDICATE_ARITY or len(args) != PREDICATE_ARITY[name]:
                raise ValueError(f"malformed predicate {name}{tuple(args)}")

    @classmethod
    def of(cls, *preds: Sequence[str], task_name: str = "") -> "GoalSpec":
        """``GoalSpec.of(("at", "cup", "table"), ("state", "tv", "on"))``."""
        return cls(tuple((p[0], tuple(p[1:])) for p in preds), task_name)

    @classmethod
    def parse(cls, text: str, task_name: str = "") -> "GoalSpec":
        """Parse ``"at cup table, state tv on"``."""
        preds = [p.split() for p in text.split(",") if p.strip()]
        return cls.of(*preds, task_name=task_name)

    def tokens(self) -> list:
        out = []
        for name, args in self.predicates:
            out.append(name)
            out.extend(args)
        return out

    def __str__(self) -> str:
        return ", ".join(" ".join((n,) + tuple(a)) for n, a in self.predicates)


@dataclass(frozen=True)
class RewardParams:
    predicate_bonus: float = 2.0
    irrelevant_step_penalty: float = -0.1

    def __post_init__(self):
        if not self.predicate_bonus > 0:
            raise ValueError("predicate_bonus must be positive")
        if not self.irrelevant_step_penalty <= 0:
            raise ValueError("irrelevant_step_penalty must be <= 0")


def _check_predicate(state: WorldState, name: str, args: tuple) -> None:
    if not state.has_object(args[0]):
        raise UnknownEntity(f"predicate {name} references unknown object {args[0]!r}")
    if name == "at" and args[1] not in state.rooms and args[1] != AGENT and not state.has_object(args[1]):
        raise UnknownEntity(f"predicate at references unknown location {args[1]!r}")
    if name == "state" and args[1] not in TOGGLES:
        raise UnknownEntity(f"predicate state references unknown flag {args[1]!r}")


def eval_predicates(state: WorldState, goal: GoalSpec) -> list:
    out = []
    for name, args in goal.predicates:
        _check_predicate(state, name, args)
        if name == "at":
            out.append(state.obj(args[0]).location == args[1])
        elif name == "holds":
            out.append(state.agent_holding == args[0])
        else:
            out.append(args[1] in state.obj(args[0]).flags)
    return out


def goal_satisfied(state: WorldState, goal: GoalSpec) -> bool:
    return all(eval_predicates(state, goal))


def newly_satisfied(prev: WorldState, nxt: WorldState, goal: GoalSpec) -> list:
    """Indices of predicates false in ``prev`` and true in ``nxt``."""
    before, after = eval_predicates(prev, goal), eval_predicates(nxt, goal)
    return [i for i, (b, a) in enumerate(zip(before, after)) if a and not b]


def step_reward(prev: WorldState, nxt: WorldState, goal: GoalSpec,
                params: RewardParams = RewardParams()) -> float:
    n = len(newly_satisfied(prev, nxt, goal))
    return params.predicate_bonus * n if n else params.irrelevant_step_penalty


def replay(start: WorldState, plan: Iterable[Action]) -> list:
    """States visited by ``plan``: [start, s1, ..., sT]. Raises IllegalAction."""
    states = [start]
    for a in plan:
        states.append(apply(states[-1], a))
    return states


def plan_rewards(start: WorldState, plan: Sequence[Action], goal: GoalSpec,
                 params: RewardParams = RewardParams()) -> list:
    states = replay(start, plan)
    return [step_reward(a, b, goal, params) for a, b in zip(states, states[1:])]


# ---------------------------------------------------------------------------
# Thematic renaming
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThemeMap:
    theme_name: str
    object_renames: Mapping[str, str] = field(default_factory=dict)
    room_renames: Mapping[str, str] = field(default_factory=dict)
    scene_renames: Mapping[str, str] = field(default_factory=dict)  # used by prompts only

    def __post_init__(self):
        merged = self.merged()
        if len(set(merged.values())) != len(merged):
            raise ValueError(f"theme {self.theme_name}: renaming is not injective")
        if len(merged) != len(self.object_renames) + len(self.room_renames):
            raise ValueError(f"theme {self.theme_name}: identifier renamed as both object and room")

    def merged(self) -> dict:
        return {**self.object_renames, **self.room_renames}

    def inverse(self) -> "ThemeMap":
        return ThemeMap(f"{self.theme_name}^-1",
                        {v: k for k, v in self.object_renames.items()},
                        {v: k for k, v in self.room_renames.items()},
                        {v: k for k, v in self.scene_renames.items()})

    @classmethod
    def identity(cls, identifiers: Iterable[str], rooms: Iterable[str] = ()) -> "ThemeMap":
        rooms = set(rooms)
        return cls("identity", {i: i for i in identifiers if i not in rooms}, {r: r for r in rooms})

    def rename(self, ident: str, strict: bool = True) -> str:
        merged = self.merged()
        if ident in merged:
            return merged[ident]
        if ident == AGENT:
            return ident
        if strict:
            raise MissingMapping(f"theme {self.theme_name}: no rename for {ident!r}")
        return ident


def load_theme(text: str) -> ThemeMap:
    doc = _parse_yaml(text, "theme")
    name = doc.get("theme")
    if not isinstance(name, str):
        raise ParseError("theme: missing theme name")
    objs = doc.get("objects") or {}
    rooms = doc.get("rooms") or {}
    scenes = doc.get("scene") or {}
    if not all(isinstance(m, dict) for m in (objs, rooms, scenes)):
        raise ParseError("theme: objects, rooms and scene must be mappings")
    try:
        return ThemeMap(name, {str(k): str(v) for k, v in objs.items()},
                        {str(k): str(v) for k, v in rooms.items()},
                        {str(k): str(v) for k, v in scenes.items()})
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def bundled_theme(name: str) -> ThemeMap:
    return load_theme(bundled_text(f"themes/{name}.theme"))


def remap_theme(goal: GoalSpec, plan: Sequence[Action], theme: ThemeMap,
                strict: bool = True) -> tuple:
    def goal_arg(name: str, i: int, arg: str) -> str:
        if name == "state" and i == 1:
            return arg  # flag names are not identifiers
        return theme.rename(arg, strict)

    preds = tuple((n, tuple(goal_arg(n, i, a) for i, a in enumerate(args)))
                  for n, args in goal.predicates)
    new_plan = [Action(a.verb, tuple(theme.rename(x, strict) for x in a.args)) for a in plan]
    return GoalSpec(preds, goal.task_name), new_plan


def remap_state(state: WorldState, theme: ThemeMap, strict: bool = True) -> WorldState:
    def r(x: Optional[str]) -> Optional[str]:
        return None if x is None else theme.rename(x, strict)

    objects = {r(oid): replace(o, location=r(o.location)) for oid, o in state.objects}
    return make_state([r(x) for x in state.rooms], [(r(a), r(b)) for a, b in state.adjacency],
                      objects, r(state.agent_room), r(state.agent_holding), state.clock)


def load_tasks(text: str) -> list:
    """Task suite file: ``tasks: [{name, goal}]`` with goals in ``GoalSpec.parse`` syntax."""
    doc = _parse_yaml(text, "tasks")
    out = []
    for entry in doc.get("tasks") or []:
        if not isinstance(entry, dict) or "name" not in entry or "goal" not in entry:
            raise ParseError(f"tasks: entries need name and goal: {entry!r}")
        try:
            out.append(GoalSpec.parse(entry["goal"], task_name=entry["name"]))
        except ValueError as exc:
            raise ParseError(f"tasks: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Teacher planner
# ---------------------------------------------------------------------------

def goal_objects(goal: GoalSpec) -> set:
    out = set()
    for name, args in goal.predicates:
        out.add(args[0])
        if name == "at" and args[1] != AGENT:
            out.add(args[1])
    return out


def shortest_plan(start: WorldState, goal: GoalSpec, max_depth: int = 30) -> Optional[list]:
    """Breadth-first shortest plan, first in canonical action order among ties.

    Actions on objects the goal never mentions are skipped, except opening and
    closing containers; with empty hands at the start such actions can only
    lengthen a plan. Returns None when no plan within ``max_depth`` exists.
    """
    movable = {args[0] for name, args in goal.predicates if name in ("at", "holds")}
    touched = goal_objects(goal)

    def useful(a: Action) -> bool:
        if a.verb == "walk":
            return True
        if a.verb in ("grab", "put"):
            return a.args[0] in movable
        if a.verb in ("open", "close"):
            return True
        return a.args[0] in touched

    k0 = start.key()
    if goal_satisfied(k0, goal):
        return []
    parent = {k0: None}
    frontier = [k0]
    for _ in range(max_depth):
        nxt = []
        for s in frontier:
            for a in _legal_for_key(s):
                if not useful(a):
                    continue
                t = _transition(s, a)
                if t in parent:
                    continue
                parent[t] = (s, a)
                if goal_satisfied(t, goal):
                    plan = []
                    while parent[t] is not None:
                        t, act = parent[t]
                        plan.append(act)
                    return plan[::-1]
                nxt.append(t)
        frontier = nxt
        if not frontier:
            break
    return None


_FLAG_VERB = {"on": "switch_on", "off": "switch_off", "open": "open", "closed": "close",
              "clean": "clean"}


def _room_path(state: WorldState, src: str, dst: str) -> list:
    prev, frontier = {src: None}, [src]
    while frontier and dst not in prev:
        nxt = []
        for r in frontier:
            for n in state.neighbors(r):
                if n not in prev:
                    prev[n] = r
                    nxt.append(n)
        frontier = nxt
    if dst not in prev:
        raise IllegalAction(f"room {dst!r} is unreachable from {src!r}")
    path = []
    while dst != src:
        path.append(dst)
        dst = prev[dst]
    return path[::-1]


def scripted_plan(start: WorldState, goal: GoalSpec) -> Optional[list]:
    """A fixed procedural plan: fetch and place objects, then set flags.

    Placements come first, then flags that open or switch on, then flags that
    close or switch off, and a held object last. Not always shortest. Returns
    None if the procedure does not end in a goal state.
    """
    s, plan = start, []

    def do(a: Action) -> None:
        nonlocal s
        plan.append(a)
        s = apply(s, a)

    def goto(room: str) -> None:
        for r in _room_path(s, s.agent_room, room):
            do(Action("walk", (r,)))

    def reach(oid: str) -> None:
        goto(s.resolve_room(oid))
        chain, loc = [], s.obj(oid).location
        while loc not in s.rooms and loc != AGENT:
            chain.append(loc)
            loc = s.obj(loc).location
        for c in reversed(chain):
            if "closed" in s.obj(c).flags:
                do(Action("open", (c,)))

    def fetch(oid: str) -> None:
        if s.agent_holding == oid:
            return
        if s.agent_holding is not None:
            do(Action("put", (s.agent_holding, s.agent_room)))
        reach(oid)
        do(Action("grab", (oid,)))

    def place(oid: str, loc: str) -> None:
        if s.obj(oid).location == loc:
            return
        if loc == AGENT:
            fetch(oid)
            return
        fetch(oid)
        if loc in s.rooms:
            goto(loc)
        else:
            reach(loc)
            if "closed" in s.obj(loc).flags:
                do(Action("open", (loc,)))
        do(Action("put", (oid, loc)))

    def set_flag(oid: str, flag: str) -> None:
        if flag in s.obj(oid).flags:
            return
        reach(oid)
        do(Action(_FLAG_VERB[flag], (oid,)))

    preds = list(goal.predicates)
    rank = {"at": 0, "state": 1, "holds": 3}
    preds.sort(key=lambda p: rank[p[0]] + (1 if p[0] == "state" and p[1][1] in ("closed", "off") else 0))
    try:
        for name, args in preds:
            if name == "at":
                place(*args)
            elif name == "state":
                set_flag(*args)
            else:
                fetch(args[0])
    except (IllegalAction, KeyError):
        return None
    return plan if goal_satisfied(s, goal) else None
