"""Training objectives and the plain SGD loop.

Three losses share one mechanism: each reduces to a weighted sum of per-token
log-probabilities, so its gradient is one ``policy.logprob_grad`` call.

* ``sft_loss``: task-weighted negative log-likelihood (maximised in the usual
  formulation, minimised here after a sign flip).
* ``rkl_loss``: Monte Carlo reverse KL toward a frozen target; samples come
  from the target and only the student's log-probs carry gradient.
* ``dpo_loss``: sigmoid preference term plus an on-policy KL regulariser.
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import policy
from .corpus import InstructionRecord, PreferenceRecord, TaskWeights, plan_tokens
from .errors import DivergenceDetected, EmptyDataset, NonPositiveBeta, VocabMismatch
from .policy import PolicyModel, Rows, Vocabulary
from .world import Action


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def encode_prompt(vocab: Vocabulary, x: str) -> list:
    return [vocab.bos_id] + vocab.encode(x.split())


def encode_plan(vocab: Vocabulary, plan: Sequence[str]) -> list:
    return vocab.encode(plan_tokens(plan)) + [vocab.eos_id]


def decode_plan_tokens(vocab: Vocabulary, ids: Sequence[int]) -> list:
    """Token ids up to EOS, as strings."""
    out = []
    for i in ids:
        if i == vocab.eos_id:
            break
        out.append(vocab.tokens[i])
    return out


def decode_plan(vocab: Vocabulary, ids: Sequence[int]) -> Optional[list]:
    """Generated ids as a list of actions, or None if a non-action token was produced."""
    plan = []
    for tok in decode_plan_tokens(vocab, ids):
        if " " not in tok:
            return None
        plan.append(Action.parse(tok))
    return plan


# ---------------------------------------------------------------------------
# Configs and results
# ---------------------------------------------------------------------------

@dataclass
class SftConfig:
    weights: TaskWeights = field(default_factory=TaskWeights)
    learning_rate: float = 1e-3
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def echo(self) -> dict:
        return {"kind": "sft", "learning_rate": self.learning_rate, "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed,
                "weights": dict(sorted(self.weights.weights.items())),
                "default_weight": self.weights.default}


@dataclass
class DpoConfig:
    beta: float = 0.1
    lam: float = 1.0
    learning_rate: float = 1e-4
    kl_sample_count: int = 8
    seed: int = 0
    epochs: int = 5
    batch_size: int = 16
    max_sample_len: int = 32
    reference_normalized: bool = False  # False: margin on raw log-probs

    def __post_init__(self):
        if not self.beta > 0:
            raise NonPositiveBeta(f"beta must be > 0, got {self.beta}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.kl_sample_count < 1:
            raise ValueError("kl_sample_count must be >= 1")
        if not self.learning_rate >= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("invalid optimisation settings")

    def echo(self) -> dict:
        return {"kind": "dpo", "beta": self.beta, "lambda": self.lam,
                "learning_rate": self.learning_rate, "kl_sample_count": self.kl_sample_count,
                "seed": self.seed, "epochs": self.epochs, "batch_size": self.batch_size,
                "max_sample_len": self.max_sample_len,
                "reference_normalized": self.reference_normalized}


@dataclass
class RklConfig:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 16
    sample_count: int = 8
    max_len: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("invalid optimisation settings")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")

    def echo(self) -> dict:
        return {"kind": "rkl", "learning_rate": self.learning_rate, "epochs": self.epochs,
                "batch_size": self.batch_size, "sample_count": self.sample_count,
                "max_len": self.max_len, "seed": self.seed}


@dataclass
class LossResult:
    loss: float
    grads: dict
    stats: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# SFT
# ---------------------------------------------------------------------------

def sft_loss(model: PolicyModel, batch: Sequence[InstructionRecord],
             weights: TaskWeights = TaskWeights()) -> LossResult:
    if not batch:
        raise EmptyDataset("empty batch")
    pairs = [(encode_prompt(model.vocab, r.x), encode_plan(model.vocab, r.y)) for r in batch]
    alpha = np.array([weights[r.task] for r in batch])
    rows = Rows.build(pairs, model.window)
    lp, cache = policy.row_logprobs(model, rows)
    coef = -alpha[rows.seq] / len(batch)
    loss = float((coef * lp).sum())
    return LossResult(loss, policy.logprob_grad(model, cache, rows.targets, coef))


# ---------------------------------------------------------------------------
# Reverse KL
# ---------------------------------------------------------------------------

class ModelTarget:
    """A plain frozen model used as the distillation target."""

    def __init__(self, model: PolicyModel):
        self.model = model
        self.vocab = model.vocab

    def sample(self, prompts, n, max_len, rng):
        return policy.sample_batch(self.model, prompts, n, max_len, rng)

    def seq_logprobs(self, pairs) -> np.ndarray:
        rows = Rows.build(pairs, self.model.window)
        lp, _ = policy.row_logprobs(self.model, rows)
        return rows.per_sequence(lp)


class PiBarTarget:
    """The weak-to-strong combined distribution as a frozen target."""

    def __init__(self, strong: PolicyModel, expert: PolicyModel, naive: PolicyModel, cfg=None):
        from . import w2s
        self._w2s = w2s
        self.strong, self.expert, self.naive = strong, expert, naive
        self.cfg = cfg or w2s.W2sConfig()
        self.vocab = strong.vocab
        w2s._check(strong, expert, naive, self.cfg)

    def sample(self, prompts, n, max_len, rng):
        return self._w2s.sample_pi_bar(self.strong, self.expert, self.naive, prompts, n, max_len,
                                       rng, self.cfg)

    def seq_logprobs(self, pairs) -> np.ndarray:
        lp, rows = self._w2s.pi_bar_step_logprobs(self.strong, self.expert, self.naive, pairs,
                                                  self.cfg)
        return rows.per_sequence(lp)


def rkl_loss(student: PolicyModel, target, prompts: Sequence[Sequence[int]], sample_count: int,
             rng: Optional[np.random.Generator] = None, max_len: int = 32,
             samples: Optional[list] = None) -> LossResult:
    """Mean over prompts and target samples of ``log pi_bar(y) - log pi_student(y)``.

    ``samples`` (one list of id sequences per prompt) bypasses sampling.
    """
    if target.vocab != student.vocab:
        raise VocabMismatch("student and target vocabularies differ")
    if samples is None:
        samples = target.sample(prompts, sample_count, max_len, rng)
    pairs = [(list(p), list(y)) for p, ys in zip(prompts, samples) for y in ys]
    if not pairs:
        raise EmptyDataset("no prompts")
    tgt = target.seq_logprobs(pairs)
    rows = Rows.build(pairs, student.window)
    lp, cache = policy.row_logprobs(student, rows)
    stu = rows.per_sequence(lp)
    diffs = tgt - stu
    n = len(pairs)
    coef = np.full(len(rows), -1.0 / n)
    grads = policy.logprob_grad(student, cache, rows.targets, coef)
    stderr = float(diffs.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return LossResult(float(diffs.mean()), grads, {"stderr": stderr, "n": n})


# ---------------------------------------------------------------------------
# DPO
# ---------------------------------------------------------------------------

@dataclass
class RegSamples:
    """Regulariser draws: prompts, K sequences per prompt, and their log-probs when drawn."""

    prompts: list
    seqs: list
    behavior_logprob: np.ndarray


def draw_reg_samples(model: PolicyModel, prompts: Sequence[Sequence[int]], k: int, max_len: int,
                     rng: np.random.Generator) -> RegSamples:
    seqs = policy.sample_batch(model, prompts, k, max_len, rng)
    pairs = [(list(p), y) for p, ys in zip(prompts, seqs) for y in ys]
    rows = Rows.build(pairs, model.window)
    lp, _ = policy.row_logprobs(model, rows)
    return RegSamples([list(p) for p in prompts], seqs, rows.per_sequence(lp))


def _seq_lp(model: PolicyModel, pairs) -> tuple:
    rows = Rows.build(pairs, model.window)
    lp, cache = policy.row_logprobs(model, rows)
    return rows.per_sequence(lp), rows, cache


def dpo_loss(model: PolicyModel, ref: PolicyModel, batch: Sequence[PreferenceRecord],
             cfg: DpoConfig = DpoConfig(), rng: Optional[np.random.Generator] = None,
             reg_samples: Optional[RegSamples] = None) -> LossResult:
    """Preference term plus ``lam`` times an importance-weighted KL estimate.

    The regulariser is ``mean_s w_s (log pi(y_s) - log pi_0(y_s))`` with
    ``w_s = pi(y_s) / pi_draw(y_s)``: at the parameters the samples were drawn
    from, its value is the plain Monte Carlo KL estimate and its gradient the
    score-function estimator, while staying a differentiable function of the
    parameters for fixed samples.
    """
    if not cfg.beta > 0:
        raise NonPositiveBeta(f"beta must be > 0, got {cfg.beta}")
    if model.vocab != ref.vocab:
        raise VocabMismatch("policy and reference vocabularies differ")
    if not batch:
        raise EmptyDataset("empty batch")
    V = model.vocab
    prompts = {}
    for r in batch:
        prompts.setdefault(r.x, encode_prompt(V, r.x))
    B = len(batch)
    pos = [(prompts[r.x], encode_plan(V, r.y_pos)) for r in batch]
    neg = [(prompts[r.x], encode_plan(V, r.y_neg)) for r in batch]
    lp_all, rows, cache = _seq_lp(model, pos + neg)
    lp_pos, lp_neg = lp_all[:B], lp_all[B:]
    margin = lp_pos - lp_neg
    if cfg.reference_normalized:
        ref_all, _, _ = _seq_lp(ref, pos + neg)
        margin = margin - (ref_all[:B] - ref_all[B:])
    z = cfg.beta * margin
    pref = float(np.mean(np.logaddexp(0.0, -z)))  # -log sigmoid(z)
    dz = -cfg.beta * np.exp(-np.logaddexp(0.0, z)) / B  # d pref / d margin
    seq_coef = np.concatenate([dz, -dz])
    grads = policy.logprob_grad(model, cache, rows.targets, seq_coef[rows.seq])
    stats = {"pref": pref, "margin_mean": float(margin.mean())}
    reg = 0.0
    if cfg.lam > 0:
        if reg_samples is None:
            rng = rng if rng is not None else np.random.default_rng(cfg.seed)
            reg_samples = draw_reg_samples(model, list(prompts.values()), cfg.kl_sample_count,
                                           cfg.max_sample_len, rng)
        rpairs = [(p, y) for p, ys in zip(reg_samples.prompts, reg_samples.seqs) for y in ys]
        lp_s, srows, scache = _seq_lp(model, rpairs)
        lp_0, _, _ = _seq_lp(ref, rpairs)
        w = np.exp(lp_s - reg_samples.behavior_logprob)
        terms = w * (lp_s - lp_0)
        n = len(rpairs)
        reg = float(terms.mean())
        coef = cfg.lam * w * (lp_s - lp_0 + 1.0) / n
        policy.add_into(grads, policy.logprob_grad(model, scache, srows.targets, coef[srows.seq]))
        stats["reg"] = reg
        stats["reg_stderr"] = float(terms.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return LossResult(pref + cfg.lam * reg, grads, stats)


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    kind: str
    config: dict
    curve: list = field(default_factory=list)  # (epoch, batch, loss, grad_norm)
    epoch_losses: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Optional[str] = None

    @property
    def losses(self) -> list:
        return [c[2] for c in self.curve]

    @property
    def grad_norms(self) -> list:
        return [c[3] for c in self.curve]

    def to_json(self, include_timing: bool = False) -> dict:
        out = {"kind": self.kind, "config": self.config, "epoch_losses": self.epoch_losses,
               "losses": self.losses, "grad_norms": self.grad_norms,
               "checkpoint": self.checkpoint}
        if include_timing:
            out["wall_time"] = self.wall_time
        return out

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "batch", "loss", "grad_norm"])
        for e, b, loss, gn in self.curve:
            w.writerow([e, b, repr(loss), repr(gn)])
        return buf.getvalue()


BatchLoss = Callable[[PolicyModel, list, np.random.Generator], LossResult]


def _finite(res: LossResult) -> bool:
    return math.isfinite(res.loss) and all(np.all(np.isfinite(g)) for g in res.grads.values())


def run_sgd(model: PolicyModel, data: Sequence, batch_loss: BatchLoss, learning_rate: float,
            epochs: int, batch_size: int, seed: int, kind: str, config: dict,
            checkpoint_dir: Optional[str] = None, tag: str = "model",
            epoch_offset: int = 0) -> tuple:
    if not data:
        raise EmptyDataset("no training data")
    t0 = time.perf_counter()
    model = model.copy()
    rng = np.random.default_rng(seed)
    report = TrainReport(kind, config)
    last_good = model.copy()
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        epoch_losses = []
        for b, start in enumerate(range(0, len(data), batch_size)):
            batch = [data[i] for i in order[start:start + batch_size]]
            res = batch_loss(model, batch, rng)
            if not _finite(res):
                if checkpoint_dir:
                    policy.save_checkpoint(last_good, os.path.join(checkpoint_dir, f"{tag}_last_good.ckpt"))
                err = DivergenceDetected(f"non-finite loss at epoch {epoch + epoch_offset}, batch {b}")
                err.last_good = last_good
                raise err
            gn = policy.grad_norm(res.grads)
            for k, p in model.params.items():
                p -= learning_rate * res.grads[k]
            report.curve.append((epoch + epoch_offset, b, res.loss, gn))
            epoch_losses.append(res.loss)
        report.epoch_losses.append(float(np.mean(epoch_losses)))
        last_good = model.copy()
        if checkpoint_dir:
            path = os.path.join(checkpoint_dir, f"{tag}_epoch{epoch + epoch_offset}.ckpt")
            policy.save_checkpoint(model, path)
            report.checkpoint = os.path.basename(path)
    report.wall_time = time.perf_counter() - t0
    return model, report


def train_loop(model: PolicyModel, loss_kind: str, data: Sequence, cfg, ref: Optional[PolicyModel] = None,
               target=None, checkpoint_dir: Optional[str] = None, tag: str = "model") -> tuple:
    """Train a copy of ``model``; returns (trained model, TrainReport).

    ``data`` is InstructionRecords for "sft", PreferenceRecords for "dpo" (with
    ``ref``), and prompt id lists for "rkl" (with ``target``).
    """
    if loss_kind == "sft":
        fn = lambda m, b, rng: sft_loss(m, b, cfg.weights)  # noqa: E731
        lr, ep, bs = cfg.learning_rate, cfg.epochs, cfg.batch_size
    elif loss_kind == "dpo":
        if ref is None:
            raise ValueError("dpo training needs a reference model")
        fn = lambda m, b, rng: dpo_loss(m, ref, b, cfg, rng)  # noqa: E731
        lr, ep, bs = cfg.learning_rate, cfg.epochs, cfg.batch_size
    elif loss_kind == "rkl":
        if target is None:
            raise ValueError("rkl training needs a target")
        fn = lambda m, b, rng: rkl_loss(m, target, b, cfg.sample_count, rng, cfg.max_len)  # noqa: E731
        lr, ep, bs = cfg.learning_rate, cfg.epochs, cfg.batch_size
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return run_sgd(model, data, fn, lr, ep, bs, cfg.seed, loss_kind, cfg.echo(), checkpoint_dir, tag)


def distill(student: PolicyModel, target, prompts: Sequence[Sequence[int]],
            records: Sequence[InstructionRecord], rkl_cfg: RklConfig = RklConfig(),
            sft_cfg: Optional[SftConfig] = None, checkpoint_dir: Optional[str] = None) -> tuple:
    """Two-step recipe: reverse-KL bootstrapping toward the target, then SFT on episodes.

    With default configs that is one epoch of each. Returns (model, [rkl report, sft report]).
    """
    sft_cfg = sft_cfg or SftConfig(epochs=1)
    model, r1 = train_loop(student, "rkl", list(prompts), rkl_cfg, target=target,
                           checkpoint_dir=checkpoint_dir, tag="distill_rkl")
    model, r2 = train_loop(model, "sft", list(records), sft_cfg, checkpoint_dir=checkpoint_dir,
                           tag="distill_sft")
    return model, [r1, r2]


def mean_nll(model: PolicyModel, records: Sequence[InstructionRecord]) -> float:
    """Average per-record negative log-likelihood (nats)."""
    return sft_loss(model, records).loss
