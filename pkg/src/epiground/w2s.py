"""Weak-to-strong decoding: steer a strong policy by an expert/naive ratio.

The combined distribution is ``p_strong * (p_expert / p_naive) ** gamma``,
normalised. Everything happens in log space. Both ratio terms are floored at
``naive_floor`` so a token the two small models agree on never moves the
strong distribution, however unlikely they find it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import policy
from .errors import DimensionMismatch, InvalidDistribution
from .policy import DecodeMode, Greedy, PolicyModel, Rows


@dataclass(frozen=True)
class W2sConfig:
    naive_floor: float = 1e-6
    ratio_exponent: float = 1.0
    mode: DecodeMode = field(default_factory=Greedy)
    max_len: int = 32

    def __post_init__(self):
        if not self.naive_floor > 0:
            raise ValueError("naive_floor must be positive")
        if self.ratio_exponent < 0:
            raise ValueError("ratio_exponent must be >= 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")

    def check_vocab_size(self, V: int) -> None:
        if self.naive_floor >= 1.0 / V:
            raise ValueError(f"naive_floor {self.naive_floor} must stay below 1/V = {1.0 / V}")


@dataclass(frozen=True)
class CombinedDistribution:
    probs: np.ndarray
    log_z: float
    clamp_events: int

    @property
    def logp(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)


NAMES = ("p_strong", "p_expert", "p_naive")


def _validate(ps, pe, pn) -> np.ndarray:
    """Stack the three distributions into a (3, V) array, checking each one."""
    arrs = [np.asarray(p, dtype=np.float64) for p in (ps, pe, pn)]
    for p, name in zip(arrs, NAMES):
        if p.ndim != 1:
            raise DimensionMismatch(f"{name} must be a vector")
    if not arrs[0].shape == arrs[1].shape == arrs[2].shape:
        raise DimensionMismatch("vocabulary sizes differ: "
                                + ", ".join(str(p.size) for p in arrs))
    stack = np.stack(arrs)
    # NaN fails both comparisons and an infinite entry fails the sum test
    ok = (stack.min(axis=1) >= 0.0) & (np.abs(stack.sum(axis=1) - 1.0) <= 1e-6)
    if not ok.all():
        raise InvalidDistribution(f"{NAMES[int(np.argmin(ok))]} is not a probability vector")
    return stack


def combine_logits(log_s: np.ndarray, log_e: np.ndarray, log_n: np.ndarray, floor: float,
                   gamma: float) -> tuple:
    """Row-wise combination on log-probability arrays (..., V).

    Returns (log pi_bar, log Z, clamp counts).
    """
    lf = np.log(floor)
    clamps = (log_n < lf).sum(axis=-1)
    shift = gamma * (np.maximum(log_e, lf) - np.maximum(log_n, lf))
    raw = log_s + shift
    m = raw.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise InvalidDistribution("combined distribution has empty support")
    log_z = m[..., 0] + np.log(np.exp(raw - m).sum(axis=-1))
    return raw - log_z[..., None], log_z, clamps


def combine_step(p_strong, p_expert, p_naive, cfg: W2sConfig = W2sConfig()) -> CombinedDistribution:
    stack = _validate(p_strong, p_expert, p_naive)
    cfg.check_vocab_size(stack.shape[1])
    with np.errstate(divide="ignore"):
        logs = np.log(stack)
    logp, log_z, clamps = combine_logits(logs[0], logs[1], logs[2], cfg.naive_floor,
                                         cfg.ratio_exponent)
    return CombinedDistribution(np.exp(logp), float(log_z), int(clamps))


def _check(strong: PolicyModel, expert: PolicyModel, naive: PolicyModel, cfg: W2sConfig) -> None:
    policy.check_same_vocab(strong, expert, naive)
    cfg.check_vocab_size(len(strong.vocab))


def combined_logp_batch(strong: PolicyModel, expert: PolicyModel, naive: PolicyModel,
                        contexts: Sequence[Sequence[int]], cfg: W2sConfig = W2sConfig()) -> tuple:
    """(log pi_bar (N, V), log Z (N,), clamps (N,)) for each context."""
    ls = policy.step_logprobs_batch(strong, contexts)
    le = policy.step_logprobs_batch(expert, contexts)
    ln = policy.step_logprobs_batch(naive, contexts)
    return combine_logits(ls, le, ln, cfg.naive_floor, cfg.ratio_exponent)


def _entropy(logp: np.ndarray) -> float:
    p = np.exp(logp)
    return float(-(p * np.where(p > 0, logp, 0.0)).sum())


def w2s_decode(strong: PolicyModel, expert: PolicyModel, naive: PolicyModel, x: Sequence,
               cfg: W2sConfig = W2sConfig(), rng: Optional[np.random.Generator] = None,
               trace: Optional[list] = None) -> list:
    """Decode from the combined distribution; no model is modified.

    If ``trace`` is a list, one dict per step is appended to it.
    """
    _check(strong, expert, naive, cfg)
    x_ids = policy._ids(strong, x)

    def step(ctx):
        ls, le, ln = (policy.step_logprobs_batch(m, [ctx])[0] for m in (strong, expert, naive))
        logp, log_z, clamps = combine_logits(ls, le, ln, cfg.naive_floor, cfg.ratio_exponent)
        if trace is not None:
            trace.append({"step": len(trace), "entropy_strong": _entropy(ls),
                          "entropy_expert": _entropy(le), "entropy_naive": _entropy(ln),
                          "log_z": float(log_z), "clamp_events": int(clamps)})
        return logp

    out = policy.decode_with(step, x_ids, cfg.mode, cfg.max_len, rng, strong.vocab.eos_id)
    if trace is not None:
        for rec, tok in zip(trace[-len(out):], out):
            rec["token"] = strong.vocab.tokens[tok]
    return out


def w2s_decode_batch(strong: PolicyModel, expert: PolicyModel, naive: PolicyModel,
                     prompts: Sequence[Sequence[int]], cfg: W2sConfig = W2sConfig()) -> list:
    """Greedy combined decoding of many prompts in lockstep."""
    _check(strong, expert, naive, cfg)
    step = lambda ctxs: combined_logp_batch(strong, expert, naive, ctxs, cfg)[0]  # noqa: E731
    return [o[0] for o in policy.lockstep(step, prompts, 1, cfg.max_len, None, strong.vocab.eos_id)]


def pi_bar_step_logprobs(strong: PolicyModel, expert: PolicyModel, naive: PolicyModel,
                         pairs: Sequence[tuple], cfg: W2sConfig = W2sConfig()) -> tuple:
    """Per-row log pi_bar(target | prefix) over flattened (x_ids, y_ids) pairs, plus the rows."""
    _check(strong, expert, naive, cfg)
    logs = []
    rows = None
    for m in (strong, expert, naive):
        r = Rows.build(pairs, m.window)
        logs.append(policy.forward(m, r.windows).logp)
        rows = rows if rows is not None else r
    logp, _, _ = combine_logits(*logs, cfg.naive_floor, cfg.ratio_exponent)
    return logp[np.arange(len(rows)), rows.targets], rows


def pi_bar_logprob(strong: PolicyModel, expert: PolicyModel, naive: PolicyModel, x: Sequence,
                   y: Sequence, cfg: W2sConfig = W2sConfig()) -> float:
    x_ids, y_ids = policy._ids(strong, x), policy._ids(strong, y)
    if not y_ids:
        return 0.0
    lp, _ = pi_bar_step_logprobs(strong, expert, naive, [(x_ids, y_ids)], cfg)
    return float(lp.sum())


def sample_pi_bar(strong: PolicyModel, expert: PolicyModel, naive: PolicyModel,
                  prompts: Sequence[Sequence[int]], n: int, max_len: int,
                  rng: np.random.Generator, cfg: W2sConfig = W2sConfig()) -> list:
    """``n`` ancestral samples from pi_bar per prompt, in lockstep."""
    _check(strong, expert, naive, cfg)
    step = lambda ctxs: combined_logp_batch(strong, expert, naive, ctxs, cfg)[0]  # noqa: E731
    return policy.lockstep(step, prompts, n, max_len, rng, strong.vocab.eos_id)
