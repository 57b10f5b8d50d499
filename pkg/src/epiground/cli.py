"""Command-line pipeline: collect, build-data, train-sft, distill, dpo, decode, probe, eval,
transfer and report.

Every stage reads its inputs from and writes its outputs to one directory
(``--out-dir``, else ``$EPIGROUND_OUT``, else ``./epiground_out``) and finishes by
writing ``<stage>.manifest.json``. Configuration is a YAML file merged over the
defaults below; flags win over both.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import __version__, corpus, evalx, mcts, pipeline, policy, probe, train, w2s, world
from .errors import ConfigError, EpigroundError, UnknownSubcommand
from .world import Action, GoalSpec

SUBCOMMANDS = ("collect", "build-data", "train-sft", "distill", "dpo", "decode", "probe", "eval",
               "transfer", "report")

DEFAULTS = {
    "seed": 0,
    "scene": "apartment",
    "collect": {"budget": 300, "exploration_c": 0.1, "max_depth": 20, "max_predicates": 3,
                "n_large": 150, "pool_seed": 0, "gold_max_depth": 14},
    "data": {"held_fraction": 0.3, "redundancy_ratio": 0.5, "n_variants": 1500,
             "qa_per_plan": 1, "qa_per_heldout_goal": 10},
    "pretrain": {"learning_rate": 1e-3, "epochs": 5, "batch_size": 16},
    "sft": {"learning_rate": 1e-3, "epochs": 5, "batch_size": 16},
    "distill": {"rkl": {"learning_rate": 1e-3, "epochs": 1, "batch_size": 16, "sample_count": 8,
                        "max_len": 24},
                "sft": {"learning_rate": 1e-3, "epochs": 1, "batch_size": 16}},
    "dpo": {"beta": 0.1, "lam": 1.0, "learning_rate": 1e-4, "kl_sample_count": 8, "epochs": 5,
            "batch_size": 16, "max_sample_len": 24, "reference_normalized": False},
    "decode": {"strong": "strong_post", "max_len": 24, "naive_floor": 1e-6,
               "ratio_exponent": 1.0},
    "probe": {"model": "strong_post", "learning_rate": 0.05, "epochs": 60, "batch_size": 32,
              "literal_block2": False, "norm_kind": "layernorm", "activation_kind": "swish"},
    "transfer": {"model": "strong_post"},
}

EXIT_OK, EXIT_VALIDATION, EXIT_INTERNAL = 0, 1, 2


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}; known keys here: "
                              f"{', '.join(sorted(base))}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: Optional[str]) -> dict:
    """Defaults merged with a YAML file; a bare name like ``desk`` selects a bundled preset."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    if os.path.exists(path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
    elif os.sep not in path and "." not in path:
        try:
            text = world.bundled_text(f"presets/{path}.yaml")
        except OSError:
            raise ConfigError(f"config {path!r}: no such file or bundled preset "
                              "(bundled presets: desk)") from None
    else:
        raise ConfigError(f"config file {path!r} does not exist")
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path!r} is not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path!r} must be a mapping at top level")
    return _merge(DEFAULTS, doc)


def _checked(section: str, build):
    """Run a config constructor, reporting bad values as a ConfigError."""
    try:
        return build()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config section {section!r}: {exc}") from None


def sft_config(cfg: dict, section: str) -> train.SftConfig:
    s = cfg
    for part in section.split("."):
        s = s[part]
    return _checked(section, lambda: train.SftConfig(
        learning_rate=float(s["learning_rate"]), epochs=int(s["epochs"]),
        batch_size=int(s["batch_size"]), seed=cfg["seed"]))


def rkl_config(cfg: dict) -> train.RklConfig:
    s = cfg["distill"]["rkl"]
    return _checked("distill.rkl", lambda: train.RklConfig(
        learning_rate=float(s["learning_rate"]), epochs=int(s["epochs"]),
        batch_size=int(s["batch_size"]), sample_count=int(s["sample_count"]),
        max_len=int(s["max_len"]), seed=cfg["seed"]))


def dpo_config(cfg: dict) -> train.DpoConfig:
    s = cfg["dpo"]
    return _checked("dpo", lambda: train.DpoConfig(
        beta=float(s["beta"]), lam=float(s["lam"]), learning_rate=float(s["learning_rate"]),
        kl_sample_count=int(s["kl_sample_count"]), seed=cfg["seed"], epochs=int(s["epochs"]),
        batch_size=int(s["batch_size"]), max_sample_len=int(s["max_sample_len"]),
        reference_normalized=bool(s["reference_normalized"])))


def w2s_config(cfg: dict) -> w2s.W2sConfig:
    s = cfg["decode"]
    return _checked("decode", lambda: w2s.W2sConfig(
        naive_floor=float(s["naive_floor"]), ratio_exponent=float(s["ratio_exponent"]),
        max_len=int(s["max_len"])))


def search_config(cfg: dict) -> mcts.SearchConfig:
    s = cfg["collect"]
    return _checked("collect", lambda: mcts.SearchConfig(
        exploration_c=float(s["exploration_c"]), simulations=int(s["budget"]),
        max_depth=int(s["max_depth"]), seed=cfg["seed"]))


# ---------------------------------------------------------------------------
# Files and manifests
# ---------------------------------------------------------------------------

def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)  # file name -> sha256
    outputs: dict = field(default_factory=dict)
    tool_version: str = __version__
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps({"subcommand": self.subcommand, "config": self.config,
                           "seeds": self.seeds, "inputs": self.inputs, "outputs": self.outputs,
                           "tool_version": self.tool_version, "wall_time": self.wall_time},
                          indent=1, sort_keys=True)


class Stage:
    """One subcommand run: inputs are digested as read, outputs are held until commit."""

    def __init__(self, name: str, out_dir: Path, cfg: dict):
        self.name, self.out_dir, self.cfg = name, out_dir, cfg
        self.manifest = RunManifest(name, cfg, {"seed": cfg["seed"]})
        self.pending: dict = {}
        self.t0 = time.perf_counter()

    def has(self, name: str) -> bool:
        return (self.out_dir / name).exists()

    def read_bytes(self, name: str) -> bytes:
        p = self.out_dir / name
        if not p.exists():
            raise ConfigError(f"{self.name}: missing input {p}; run the stage that writes it first")
        data = p.read_bytes()
        self.manifest.inputs[name] = sha256(data)
        return data

    def read_text(self, name: str) -> str:
        return self.read_bytes(name).decode("utf-8")

    def checkpoint(self, tag: str) -> policy.PolicyModel:
        return policy.checkpoint_from_bytes(self.read_bytes(f"{tag}.ckpt"))

    def put(self, name: str, data) -> None:
        self.pending[name] = data.encode("utf-8") if isinstance(data, str) else bytes(data)

    def commit(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, data in sorted(self.pending.items()):
            (self.out_dir / name).write_bytes(data)
            self.manifest.outputs[name] = sha256(data)
        self.manifest.wall_time = time.perf_counter() - self.t0
        (self.out_dir / f"{self.name}.manifest.json").write_text(self.manifest.to_json())


def bare(goal: GoalSpec) -> GoalSpec:
    """Goals are keyed by their predicates; task names only label them."""
    return GoalSpec(goal.predicates)


def _scene(cfg: dict) -> tuple:
    """(scene name, start state) from a scene file or a bundled scene name."""
    spec = str(cfg["scene"])
    if os.path.isfile(spec):
        try:
            return Path(spec).name.split(".")[0], world.load_scene(Path(spec).read_text())
        except EpigroundError as exc:
            raise ConfigError(f"scene file {spec!r}: {exc}") from None
    name = spec[:-len(".scene")] if spec.endswith(".scene") else spec
    try:
        return name, world.bundled_scene(name)
    except OSError:
        raise ConfigError(f"scene {spec!r}: no such file or bundled scene "
                          "(bundled scenes: apartment)") from None


def _tasks(name: str) -> list:
    try:
        return world.load_tasks(world.bundled_text(f"{name}.tasks"))
    except OSError:
        raise ConfigError(f"no bundled task suite for scene {name!r}") from None


def _read_goals(stage: Stage) -> list:
    rows = corpus.loads_jsonl(stage.read_text("goals.jsonl"))
    return [(GoalSpec.parse(r["goal"], r["task"]), r["gold_length"]) for r in rows]


def _read_split(stage: Stage) -> tuple:
    doc = json.loads(stage.read_text("split.json"))
    return [GoalSpec.parse(g) for g in doc["train"]], [GoalSpec.parse(g) for g in doc["held"]]


def _vocab(name: str, start) -> policy.Vocabulary:
    return policy.Vocabulary(corpus.vocabulary_tokens({name: start, pipeline.HOUSEHOLD: start}))


def _prompts(vocab, start, name, goals) -> list:
    return [train.encode_prompt(vocab, corpus.render_prompt(g, start, name)) for g in goals]


def _reports(stage: Stage, tag: str, rep: train.TrainReport) -> None:
    stage.put(f"{tag}_report.json", json.dumps(rep.to_json(), indent=1, sort_keys=True))
    stage.put(f"{tag}_curve.csv", rep.curve_csv())


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _search_one(job) -> list:
    """Distinct positives (shortest first) plus the highest-return failure for one goal."""
    start, goal, search_cfg, scene = job
    r = mcts.search(start, goal, search_cfg, scene)
    positives = {}
    for t in r.explored:
        if t.label is mcts.Label.POSITIVE:
            positives.setdefault(tuple(str(a) for a in t.plan), t)
    keep = [positives[k] for k in sorted(positives, key=lambda p: (len(p), p))]
    failed = [t for t in r.explored if t.label is mcts.Label.NEGATIVE and len(t)]
    if failed:
        keep.append(min(failed, key=lambda t: (-t.total_return, len(t), [str(a) for a in t.plan])))
    return keep


def cmd_collect(stage: Stage, args) -> None:
    cfg, c = stage.cfg, stage.cfg["collect"]
    name, start = _scene(cfg)
    search_cfg = search_config(cfg)
    if args.goal:
        try:
            suite = _tasks(name)
        except ConfigError:
            suite = []  # a scene file without a bundled suite takes goal expressions only
        goal = next((t for t in suite if t.task_name == args.goal), None)
        if goal is None:
            try:
                goal = GoalSpec.parse(args.goal)
            except (ValueError, KeyError):
                raise ConfigError(f"--goal {args.goal!r} is neither a task of scene {name!r} "
                                  "nor a goal like 'at cup table, state tv on'") from None
        try:
            world.eval_predicates(start, goal)
        except EpigroundError as exc:
            raise ConfigError(f"--goal {args.goal!r}: {exc}") from None
        plan = world.shortest_plan(start, goal, max_depth=int(c["gold_max_depth"]))
        goals = [(goal, None if plan is None else len(plan))]
    else:
        pool = pipeline.goal_pool(start, int(c["max_predicates"]), int(c["n_large"]),
                                  int(c["pool_seed"]), int(c["gold_max_depth"]))
        goals = sorted(pool.items(), key=lambda kv: str(kv[0]))
    jobs = [(start, g, search_cfg, name) for g, _ in goals]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            found = list(ex.map(_search_one, jobs, chunksize=4))
    else:
        found = [_search_one(j) for j in jobs]
    stage.put("trajectories.jsonl", corpus.serialize_trajectories(t for g in found for t in g))
    stage.put("goals.jsonl", corpus.dumps_jsonl(
        {"goal": str(g), "task": g.task_name, "gold_length": n} for g, n in goals))


def cmd_build_data(stage: Stage, args) -> None:
    cfg, d = stage.cfg, stage.cfg["data"]
    name, start = _scene(cfg)
    seed = cfg["seed"]
    goals = _read_goals(stage)
    trajs = corpus.deserialize_trajectories(stage.read_text("trajectories.jsonl"))
    ratio = float(d["redundancy_ratio"])
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError("data.redundancy_ratio must lie in [0, 1]")
    pool = {bare(g): n for g, n in goals if n is not None}
    if not pool:
        raise ConfigError("build-data: no collected goal is solvable within collect.gold_max_depth")
    train_goals, held = pipeline.stratified_split(pool, float(d["held_fraction"]), seed)
    by_goal: dict = {}
    for t in trajs:
        by_goal.setdefault(bare(t.goal), []).append(t)
    episodes = {}
    for g in train_goals:
        pos = [t for t in by_goal.get(g, ()) if t.label is mcts.Label.POSITIVE]
        neg = [t for t in by_goal.get(g, ()) if t.label is mcts.Label.NEGATIVE]
        if pos:
            best = min(pos, key=lambda t: (len(t), [str(a) for a in t.plan]))
            episodes[g] = pipeline.Episode(tuple(corpus.compact_plan(best.plan, start, g)),
                                           tuple(neg[0].plan) if neg else None)
    if not episodes:
        raise ConfigError("build-data: search solved none of the training goals; "
                          "raise --budget and rerun collect")
    solved = [g for g in train_goals if g in episodes]
    ep_trajs = pipeline.episode_trajectories(start, episodes, solved, name)
    instructions = corpus.build_instruction_dataset(ep_trajs, scenes={name: start},
                                                    shortest_only=True)
    prefs = corpus.build_preference_dataset(ep_trajs, ratio, np.random.default_rng(3000 + seed),
                                            {name: start})
    rng = np.random.default_rng(2000 + seed)
    questions = []
    for g in solved:
        questions += pipeline.qa_records_for(start, list(episodes[g].plan), rng, name,
                                             int(d["qa_per_plan"]))
    held_q = []
    for g in held:
        plan = world.shortest_plan(start, g, max_depth=int(cfg["collect"]["gold_max_depth"]))
        held_q += pipeline.qa_records_for(start, plan, rng, name, int(d["qa_per_heldout_goal"]))
    pre = pipeline.pretraining_records(start, int(d["n_variants"]),
                                       np.random.default_rng(1000 + seed),
                                       qa_per_plan=int(d["qa_per_plan"]))
    stage.put("split.json", json.dumps({"train": [str(g) for g in train_goals],
                                        "held": [str(g) for g in held]}, indent=1))
    stage.put("instructions.jsonl", corpus.serialize_instructions(instructions))
    stage.put("preferences.jsonl", corpus.serialize_preferences(prefs))
    stage.put("questions.jsonl", corpus.serialize_instructions(questions))
    stage.put("heldout_questions.jsonl", corpus.serialize_instructions(held_q))
    stage.put("pretrain.jsonl", corpus.serialize_instructions(pre))


def cmd_train_sft(stage: Stage, args) -> None:
    cfg, seed = stage.cfg, stage.cfg["seed"]
    pre_cfg, sft_cfg = sft_config(cfg, "pretrain"), sft_config(cfg, "sft")
    name, start = _scene(cfg)
    vocab = _vocab(name, start)
    pre = corpus.deserialize_instructions(stage.read_text("pretrain.jsonl"))
    inst = corpus.deserialize_instructions(stage.read_text("instructions.jsonl"))
    strong = policy.init_model(policy.Capacity.STRONG_TOY, vocab, seed, policy.Role.STRONG)
    strong, r1 = train.train_loop(strong, "sft", pre, pre_cfg)
    naive = policy.init_model(policy.Capacity.WEAK, vocab, 100 + seed, policy.Role.NAIVE)
    expert, r2 = train.train_loop(naive, "sft", inst, sft_cfg)
    expert.role = policy.Role.EXPERT
    stage.put("strong_base.ckpt", policy.checkpoint_bytes(strong))
    stage.put("expert.ckpt", policy.checkpoint_bytes(expert))
    stage.put("naive.ckpt", policy.checkpoint_bytes(naive))
    _reports(stage, "pretrain", r1)
    _reports(stage, "sft", r2)


def cmd_distill(stage: Stage, args) -> None:
    cfg = stage.cfg
    rkl_cfg, sft_cfg = rkl_config(cfg), sft_config(cfg, "distill.sft")
    strong, expert, naive = (stage.checkpoint(t) for t in ("strong_base", "expert", "naive"))
    policy.check_same_vocab(strong, expert, naive)
    plans = corpus.deserialize_instructions(stage.read_text("instructions.jsonl"))
    questions = corpus.deserialize_instructions(stage.read_text("questions.jsonl"))
    prompts = [train.encode_prompt(strong.vocab, x) for x in dict.fromkeys(r.x for r in plans)]
    target = train.PiBarTarget(strong, expert, naive)
    model, reps = train.distill(strong, target, prompts, plans + questions, rkl_cfg, sft_cfg)
    stage.put("strong_distilled.ckpt", policy.checkpoint_bytes(model))
    _reports(stage, "distill_rkl", reps[0])
    _reports(stage, "distill_sft", reps[1])


def cmd_dpo(stage: Stage, args) -> None:
    dcfg = dpo_config(stage.cfg)
    model = stage.checkpoint("strong_distilled")
    prefs = corpus.deserialize_preferences(stage.read_text("preferences.jsonl"))
    ref = model.copy(policy.Role.REFERENCE)
    model, rep = train.train_loop(model, "dpo", prefs, dcfg, ref=ref)
    stage.put("strong_post.ckpt", policy.checkpoint_bytes(model))
    _reports(stage, "dpo", rep)


def cmd_decode(stage: Stage, args) -> None:
    cfg = stage.cfg
    wcfg = w2s_config(cfg)
    name, start = _scene(cfg)
    tag = cfg["decode"]["strong"]
    strong = stage.checkpoint(tag)
    if args.w2s:
        expert, naive = stage.checkpoint("expert"), stage.checkpoint("naive")
        bundle = evalx.ModelBundle(strong, expert, naive, wcfg.max_len, f"{tag}+w2s", wcfg)
    else:
        bundle = evalx.ModelBundle(strong, max_len=wcfg.max_len, tag=tag)
    _, held = _read_split(stage)
    gold = {bare(g): n for g, n in _read_goals(stage)}
    ids = evalx.decode_bundle(bundle, _prompts(strong.vocab, start, name, held))
    rows = []
    for g, out in zip(held, ids):
        plan = train.decode_plan(strong.vocab, out)
        rows.append({"goal": str(g), "gold_length": gold.get(g), "model_tag": bundle.tag,
                     "tokens": train.decode_plan_tokens(strong.vocab, out),
                     "plan": None if plan is None else [str(a) for a in plan]})
    stage.put(f"decode_{bundle.tag}.jsonl", corpus.dumps_jsonl(rows))


def cmd_probe(stage: Stage, args) -> None:
    cfg, p = stage.cfg, stage.cfg["probe"]
    _, start = _scene(cfg)
    model = stage.checkpoint(p["model"])
    answers = pipeline.answer_space(start)
    pcfg = _checked("probe", lambda: probe.ProbeConfig(
        L=model.num_layers, d=model.embed_dim, num_choices=len(answers), seed=cfg["seed"],
        literal_block2=bool(p["literal_block2"]), norm_kind=p["norm_kind"],
        activation_kind=p["activation_kind"], learning_rate=float(p["learning_rate"]),
        epochs=int(p["epochs"]), batch_size=int(p["batch_size"])))
    recs = corpus.deserialize_instructions(stage.read_text("heldout_questions.jsonl"))
    items = [pipeline.qa_item(model.vocab, r, answers) for r in recs]
    counts = np.bincount([q.label for q in items], minlength=len(answers))
    items = [q for q in items if counts[q.label] >= 2]  # probes need two examples per answer
    examples = probe.examples_from_model(model, [q.ids for q in items], [q.label for q in items])
    summary = {"model": p["model"], "question_set": "synthetic: where is an object after k steps",
               "n_questions": len(items), "num_choices": len(answers),
               "greedy_accuracy": pipeline.greedy_answer_accuracy(model, items),
               "layerwise": bool(args.layerwise)}
    if args.layerwise:
        scores = probe.layerwise_probe(examples, pcfg)
        first, last = probe.quartile_means([s.val_accuracy for s in scores])
        summary.update(first_quartile_mean=first, last_quartile_mean=last,
                       best_layer_accuracy=max(s.val_accuracy for s in scores))
    else:
        r = probe.train_probe(examples, pcfg)
        scores = [probe.LayerScore(-1, r.train_accuracy, r.val_accuracy)]
        summary.update(train_accuracy=r.train_accuracy, val_accuracy=r.val_accuracy)
    stage.put("probe_examples.bin", probe.examples_bytes(examples))
    stage.put("probe.csv", probe.profile_csv(scores))
    stage.put("probe_summary.json", json.dumps(summary, indent=1, sort_keys=True))


def _object_path_score(start, cand: Optional[list], gold: list, obj: str) -> float:
    if not cand:
        return 0.0
    try:
        path = evalx.object_path(start, [Action.parse(a) for a in cand], obj)
    except EpigroundError:
        return 0.0
    return evalx.lcs_path_score(path, evalx.object_path(start, gold, obj))


def cmd_eval(stage: Stage, args) -> None:
    cfg = stage.cfg
    _, start = _scene(cfg)
    files = sorted(p.name for p in stage.out_dir.glob("decode_*.jsonl"))
    if not files:
        raise ConfigError(f"eval: no decode_*.jsonl in {stage.out_dir}; run decode first")
    movable = set(pipeline.portable_objects(start))
    depth = int(cfg["collect"]["gold_max_depth"])
    results = []
    for fname in files:
        rows = corpus.loads_jsonl(stage.read_text(fname))
        if not rows:
            continue
        tag = rows[0]["model_tag"]
        goals = [GoalSpec.parse(r["goal"]) for r in rows]
        plans = [r["plan"] for r in rows]
        flags = evalx.success_flags(plans, [(start, g) for g in goals])
        results.append(evalx.EvalResult("success_rate", tag, tuple(float(f) for f in flags)))
        known = [(r["gold_length"], f) for r, f in zip(rows, flags) if r["gold_length"] is not None]
        results += evalx.results_by_bin("success_by_length", tag, [n for n, _ in known],
                                        [f for _, f in known])
        rouge, path = [], []
        for g, plan in zip(goals, plans):
            gold = world.shortest_plan(start, g, max_depth=depth)
            if not gold:
                continue
            rouge.append(evalx.rouge_l(plan, evalx.plan_action_tokens(gold)) if plan else 0.0)
            objs = sorted(world.goal_objects(g) & movable)
            if objs:
                path.append(_object_path_score(start, plan, gold, objs[0]))
        results.append(evalx.EvalResult("rouge_l", tag, tuple(rouge)))
        results.append(evalx.EvalResult("lcs_path", tag, tuple(path)))
    stage.put("eval.csv", evalx.results_csv(results))
    stage.put("eval.json", evalx.results_json(results))


def cmd_transfer(stage: Stage, args) -> None:
    cfg = stage.cfg
    name, start = _scene(cfg)
    names = [args.theme] if args.theme else list(world.THEMES)
    themes = []
    for n in names:
        try:
            themes.append(world.bundled_theme(n))
        except OSError:
            raise ConfigError(f"unknown theme {n!r}; choose from {', '.join(world.THEMES)}") from None
    tasks = _tasks(name)
    tag = cfg["transfer"]["model"]
    model = stage.checkpoint(tag)
    bundle = evalx.ModelBundle(model, max_len=int(cfg["decode"]["max_len"]), tag=tag)
    base = evalx.evaluate_bundle(bundle, start, tasks, name)
    results = [evalx.EvalResult("success_rate", tag, tuple(float(f) for f in base), "base")]
    results += list(evalx.transfer_eval(bundle, themes, tasks, start, name).values())
    stage.put("transfer.csv", evalx.results_csv(results))


def cmd_report(stage: Stage, args) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "key", "value"])
    sources = [f for f in ("eval.csv", "transfer.csv", "probe.csv", "probe_summary.json")
               if stage.has(f)]
    if not sources:
        raise ConfigError("report: nothing to aggregate; run eval, transfer or probe first")
    for fname in sources:
        text = stage.read_text(fname)
        if fname == "probe.csv":
            for r in csv.DictReader(io.StringIO(text)):
                w.writerow([fname, f"layer{r['layer']}/val_acc", r["val_acc"]])
        elif fname.endswith(".json"):
            for k, v in sorted(json.loads(text).items()):
                if isinstance(v, (int, float)) and not isinstance(v, bool):
                    w.writerow([fname, k, repr(v)])
        else:
            for r in csv.DictReader(io.StringIO(text)):
                w.writerow([fname, f"{r['metric']}/{r['model_tag']}/{r['bin_key']}", r["value"]])
    stage.put("report.csv", buf.getvalue())


COMMANDS = {"collect": cmd_collect, "build-data": cmd_build_data, "train-sft": cmd_train_sft,
            "distill": cmd_distill, "dpo": cmd_dpo, "decode": cmd_decode, "probe": cmd_probe,
            "eval": cmd_eval, "transfer": cmd_transfer, "report": cmd_report}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{message} (see epiground --help)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="epiground", description=__doc__.split("\n\n")[0])
    p.add_argument("subcommand", help="one of: " + ", ".join(SUBCOMMANDS))
    p.add_argument("--scene", help="scene file or bundled scene name")
    p.add_argument("--goal", help="collect: a task name from the suite, or a goal expression")
    p.add_argument("--budget", type=int, help="collect: MCTS simulations per goal")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="YAML file, or a bundled preset name (desk)")
    p.add_argument("--jobs", type=int, default=1, help="collect: worker processes")
    p.add_argument("--out-dir", help="defaults to $EPIGROUND_OUT, then ./epiground_out")
    p.add_argument("--w2s", action="store_true", help="decode: steer with the expert/naive pair")
    p.add_argument("--layerwise", action="store_true", help="probe: one probe per layer")
    p.add_argument("--theme", help="transfer: one theme instead of all five")
    return p


def resolve(argv: Sequence[str]) -> tuple:
    """(parsed args, merged config, out dir); raises before anything is written."""
    args = build_parser().parse_args(list(argv))
    if args.subcommand not in COMMANDS:
        raise UnknownSubcommand(f"unknown subcommand {args.subcommand!r}; "
                                f"choose from {', '.join(SUBCOMMANDS)}")
    cfg = load_config(args.config)
    for key, val in (("seed", args.seed), ("scene", args.scene)):
        if val is not None:
            cfg[key] = val
    if args.budget is not None:
        cfg["collect"]["budget"] = args.budget
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed must be an integer")
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out = args.out_dir or os.environ.get("EPIGROUND_OUT") or "epiground_out"
    return args, cfg, Path(out)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on a validation error, 2 on an internal one."""
    argv = sys.argv[1:] if argv is None else argv
    try:
        args, cfg, out_dir = resolve(argv)
        stage = Stage(args.subcommand, out_dir, cfg)
        COMMANDS[args.subcommand](stage, args)
        stage.commit()
    except EpigroundError as exc:
        print(f"epiground: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - anything else is a bug, reported as such
        print(f"epiground: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
