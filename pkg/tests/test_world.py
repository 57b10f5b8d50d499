import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epiground import world
from epiground.errors import (DanglingReference, IllegalAction, MissingMapping, ParseError,
                              UnknownEntity)
from epiground.world import Action, GoalSpec, ObjectState, RewardParams

A = Action.parse


def random_walk(start, rng, n):
    s, plan = start, []
    for _ in range(n):
        legal = world.legal_actions(s)
        if not legal:
            break
        a = legal[int(rng.integers(len(legal)))]
        plan.append(a)
        s = world.apply(s, a)
    return plan


# -- scenes -----------------------------------------------------------------

def test_empty_rooms_is_parse_error():
    with pytest.raises(ParseError):
        world.load_scene("format_version: 1\nrooms: []\nagent: {room: hall}\n")


def test_minimal_scene():
    s = world.load_scene("format_version: 1\nrooms: [hall]\nagent: {room: hall}\n")
    assert s.clock == 0 and s.agent_holding is None and s.objects == ()
    assert world.legal_actions(s) == []


def test_dangling_location():
    text = ("format_version: 1\nrooms: [hall]\nobjects:\n"
            "  - {id: cup, type: cup, location: shelf}\nagent: {room: hall}\n")
    with pytest.raises(DanglingReference):
        world.load_scene(text)


def test_bundled_apartment_matches_file(apartment):
    import yaml
    doc = yaml.safe_load(world.bundled_text("apartment.scene"))
    assert len(apartment.rooms) == 3 and len(apartment.objects) == 8
    assert apartment.agent_room == "living_room"
    for entry in doc["objects"]:
        o = apartment.obj(entry["id"])
        assert o.location == entry["location"] and o.type == entry["type"]
        # YAML 1.1 reads bare on/off as booleans
        flags = {{True: "on", False: "off"}.get(f, f) for f in entry["flags"]}
        assert o.flags == frozenset(flags)


def test_dump_load_round_trip(apartment):
    assert world.load_scene(world.dump_scene(apartment)) == apartment


# -- legal actions ----------------------------------------------------------

def test_apartment_start_actions(apartment):
    # worked out by hand from the scene file: two walks, the remote on the sofa,
    # the closed box, two switchable devices and five dirty objects
    expected = ["walk bedroom", "walk kitchen", "grab remote", "open box", "switch_on lamp",
                "switch_on tv", "clean lamp", "clean remote", "clean sofa", "clean table",
                "clean tv"]
    assert [str(a) for a in world.legal_actions(apartment)] == expected


def all_actions(state):
    ids = sorted(state.identifiers())
    for verb in world.VERBS:
        for args in itertools.product(ids, repeat=world.ARITY[verb]):
            yield Action(verb, args)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 12))
def test_affordance_soundness(seed, n):
    start = world.bundled_scene()
    s = start
    for a in random_walk(start, np.random.default_rng(seed), n):
        s = world.apply(s, a)
    legal = world.legal_actions(s)
    assert len(set(legal)) == len(legal)
    assert legal == sorted(legal, key=Action.sort_key)
    for a in all_actions(s):
        if a in legal:
            world.apply(s, a)
        else:
            with pytest.raises(IllegalAction):
                world.apply(s, a)


def test_closed_box_affordance():
    s = world.make_state(["hall"], [], {"box": ObjectState("box", "hall",
                                                           frozenset({"receptacle", "closed"}))},
                         "hall")
    acts = [str(a) for a in world.legal_actions(s)]
    assert "open box" in acts and "close box" not in acts


def test_lone_room_only_walks():
    s = world.make_state(["a", "b", "c"], [("a", "b"), ("a", "c")], {}, "a")
    assert [str(a) for a in world.legal_actions(s)] == ["walk b", "walk c"]


# -- transitions ------------------------------------------------------------

def test_grab_sets_holding(apartment):
    s = world.apply(apartment, A("walk kitchen"))
    s2 = world.apply(s, A("grab cup"))
    assert s2.agent_holding == "cup" and s2.obj("cup").location == world.AGENT
    assert s.agent_holding is None  # input untouched


def test_open_twice_illegal(apartment):
    s = world.apply(apartment, A("open box"))
    with pytest.raises(IllegalAction):
        world.apply(s, A("open box"))


def test_four_step_plan(apartment):
    plan = [A(x) for x in ("walk kitchen", "grab cup", "walk living_room", "put cup table")]
    states = world.replay(apartment, plan)
    assert states[-1].obj("cup").location == "table" and states[-1].clock == 4
    assert world.eval_predicates(states[-1], GoalSpec.parse("at cup table")) == [True]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_apply_pure_and_clock(seed):
    s = world.bundled_scene()
    for a in random_walk(s, np.random.default_rng(seed), 10):
        n1, n2 = world.apply(s, a), world.apply(s, a)
        assert n1 == n2 and n1.clock == s.clock + 1
        changed = {o for (o, x), (_, y) in zip(s.objects, n1.objects) if x != y}
        assert changed <= set(a.args)
        s = n1


# -- goals and reward -------------------------------------------------------

def test_eval_predicates_examples(apartment):
    assert world.eval_predicates(apartment, GoalSpec.parse("at cup table, state tv on")) == [False, False]
    s = world.replay(apartment, [A("walk kitchen"), A("grab cup")])[-1]
    assert world.eval_predicates(s, GoalSpec.parse("holds cup")) == [True]
    with pytest.raises(UnknownEntity):
        world.eval_predicates(apartment, GoalSpec.parse("at spoon table"))


def test_step_reward_values(apartment):
    g = GoalSpec.parse("state tv on")
    on = world.apply(apartment, A("switch_on tv"))
    assert world.step_reward(apartment, on, g) == 2.0
    walk = world.apply(apartment, A("walk kitchen"))
    assert world.step_reward(apartment, walk, g) == -0.1


def test_six_step_return(apartment):
    g = GoalSpec.parse("state tv on, at cup table")
    plan = [A(x) for x in ("switch_on tv", "walk kitchen", "grab cup", "walk bedroom",
                           "walk living_room", "put cup table")]
    rewards = world.plan_rewards(apartment, plan, g)
    assert rewards == [2.0, -0.1, -0.1, -0.1, -0.1, 2.0]
    assert sum(rewards) == pytest.approx(3.6, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reward_decomposition(seed):
    rng = np.random.default_rng(seed)
    s0 = world.bundled_scene()
    g = GoalSpec.parse(["state tv on, at cup table", "holds remote", "state box open, state lamp on"]
                       [seed % 3])
    plan = random_walk(s0, rng, 15)
    states = world.replay(s0, plan)
    events = irrelevant = 0
    for a, b in zip(states, states[1:]):
        before, after = world.eval_predicates(a, g), world.eval_predicates(b, g)
        k = sum(1 for x, y in zip(before, after) if y and not x)
        events += k
        irrelevant += k == 0
    total = sum(world.plan_rewards(s0, plan, g))
    assert total == pytest.approx(2 * events - 0.1 * irrelevant, abs=1e-12)


def test_reward_params_invariants():
    with pytest.raises(ValueError):
        RewardParams(predicate_bonus=0.0)
    with pytest.raises(ValueError):
        RewardParams(irrelevant_step_penalty=0.5)


# -- themes -----------------------------------------------------------------

def test_medieval_castle_examples():
    m = world.bundled_theme("MedievalCastle")
    assert m.rename("sofa") == "cushioned_bench"
    assert m.rename("microwave") == "heating_pot"
    assert m.scene_renames["apartment"] == "palace"


@pytest.mark.parametrize("name", world.THEMES)
def test_theme_round_trip(name, tasks, apartment):
    m = world.bundled_theme(name)
    gold = world.shortest_plan(apartment, tasks[5], max_depth=14)
    g2, p2 = world.remap_theme(tasks[5], gold, m)
    assert world.remap_theme(g2, p2, m.inverse()) == (tasks[5], list(gold))
    assert world.remap_state(world.remap_state(apartment, m), m.inverse()) == apartment


def test_identity_theme_is_noop(apartment, tasks):
    m = world.ThemeMap.identity(apartment.identifiers(), apartment.rooms)
    plan = world.shortest_plan(apartment, tasks[3])
    assert world.remap_theme(tasks[3], plan, m) == (tasks[3], list(plan))


def test_missing_mapping_strict():
    m = world.ThemeMap("partial", {"cup": "goblet"})
    with pytest.raises(MissingMapping):
        world.remap_theme(GoalSpec.parse("at cup table"), [], m)
    g, _ = world.remap_theme(GoalSpec.parse("at cup table"), [], m, strict=False)
    assert str(g) == "at goblet table"


def test_non_injective_theme_rejected():
    with pytest.raises(ValueError):
        world.ThemeMap("bad", {"cup": "x", "box": "x"})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["cup", "box", "tv", "lamp", "sofa", "table"]), min_size=1,
                max_size=6, unique=True), st.randoms(use_true_random=False))
def test_injective_map_round_trip(keys, r):
    targets = [f"t{i}" for i in range(len(keys))]
    r.shuffle(targets)
    m = world.ThemeMap("rand", dict(zip(keys, targets)))
    g = GoalSpec.of(*[("at", k, "agent") for k in keys])
    g2, _ = world.remap_theme(g, [], m)
    assert world.remap_theme(g2, [], m.inverse())[0] == g


# -- teacher planner --------------------------------------------------------

def bfs(start, goal, max_depth):
    """Unpruned breadth-first search over raw transitions (no state keying shortcuts)."""
    frontier, seen = [(start, [])], {start.key()}
    for _ in range(max_depth + 1):
        nxt = []
        for s, p in frontier:
            if world.goal_satisfied(s, goal):
                return p
            for a in world.legal_actions(s):
                s2 = world.apply(s, a)
                if s2.key() not in seen:
                    seen.add(s2.key())
                    nxt.append((s2, p + [a]))
        frontier = nxt
    return None


def test_suite_gold_lengths_are_one_to_twelve(gold_plans):
    lengths = [len(p) for p in gold_plans]
    assert lengths == list(range(1, 13))


@pytest.mark.parametrize("i", range(7))
def test_shortest_plan_matches_bfs(apartment, tasks, i):
    mine = world.shortest_plan(apartment, tasks[i], max_depth=10)
    ref = bfs(apartment, tasks[i], 10)
    assert len(mine) == len(ref)
    assert world.goal_satisfied(world.replay(apartment, mine)[-1], tasks[i])


def test_scripted_plan_solves_suite(apartment, tasks):
    for t in tasks:
        plan = world.scripted_plan(apartment, t)
        assert world.goal_satisfied(world.replay(apartment, plan)[-1], t)
