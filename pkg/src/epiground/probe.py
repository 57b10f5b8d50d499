"""Multi-choice predictor over stacked per-layer hidden states, and layer-wise probing.

The predictor has three blocks. Block 1 normalizes each layer's d-vector and maps
it to n1 features. Block 2 mixes along the layer axis, L -> n2, giving an n2 x n1
array. Block 3 flattens, normalizes and maps to C answer logits. With
``literal_block2`` Block 2 instead maps n1 -> n2 within each layer (flatten size
L * n2). Normalization is parameter-free, so every weight is counted by
``d*n1 + L*n2 + n1*n2*C`` plus the biases.

Probes only ever see exported hidden stacks, never the policy's parameters.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import policy, train
from .errors import InsufficientData, ParseError, ShapeMismatch
from .train import LossResult

FORMAT_VERSION = 1
_EPS = 1e-9


@dataclass(frozen=True)
class ProbeConfig:
    L: int
    d: int
    num_choices: int
    n1: Optional[int] = None
    n2: Optional[int] = None
    norm_kind: str = "layernorm"
    activation_kind: str = "swish"
    seed: int = 0
    literal_block2: bool = False
    learning_rate: float = 0.05
    epochs: int = 60
    batch_size: int = 32

    def __post_init__(self):
        if self.n1 is None:
            object.__setattr__(self, "n1", max(1, self.d // 4))
        if self.n2 is None:
            object.__setattr__(self, "n2", max(2, self.L // 2))
        if self.L < 1 or self.d < 1:
            raise ValueError("L and d must be positive")
        if not self.n1 < self.d:
            raise ValueError(f"n1 = {self.n1} must be below d = {self.d}")
        if not self.n2 < self.n1:
            raise ValueError(f"n2 = {self.n2} must be below n1 = {self.n1}")
        if self.num_choices < 2:
            raise ValueError("num_choices must be >= 2")
        if self.norm_kind not in NORMS:
            raise ValueError(f"unknown norm_kind {self.norm_kind!r}")
        if self.activation_kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation_kind {self.activation_kind!r}")

    def single_layer(self, layer: int = 0) -> "ProbeConfig":
        return ProbeConfig(1, self.d, self.num_choices, self.n1, self.n2, self.norm_kind,
                           self.activation_kind, self.seed + 7919 * (layer + 1), False,
                           self.learning_rate, self.epochs, self.batch_size)

    def echo(self) -> dict:
        return {"L": self.L, "d": self.d, "num_choices": self.num_choices, "n1": self.n1,
                "n2": self.n2, "norm_kind": self.norm_kind,
                "activation_kind": self.activation_kind, "seed": self.seed,
                "literal_block2": self.literal_block2, "learning_rate": self.learning_rate,
                "epochs": self.epochs, "batch_size": self.batch_size}


# ---------------------------------------------------------------------------
# Elementwise pieces (value, backward)
# ---------------------------------------------------------------------------

def _layernorm(x: np.ndarray) -> tuple:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _EPS)
    y = xc * inv
    return y, (y, inv)


def _layernorm_back(dy: np.ndarray, cache) -> np.ndarray:
    y, inv = cache
    return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))


def _identity(x):
    return x, None


def _identity_back(dy, cache):
    return dy


NORMS = {"layernorm": (_layernorm, _layernorm_back), "none": (_identity, _identity_back)}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _swish(x):
    s = _sigmoid(x)
    return x * s, (x, s)


def _swish_back(dy, cache):
    x, s = cache
    return dy * (s + x * s * (1.0 - s))


def _tanh(x):
    y = np.tanh(x)
    return y, y


def _tanh_back(dy, y):
    return dy * (1.0 - y * y)


ACTIVATIONS = {"swish": (_swish, _swish_back), "tanh": (_tanh, _tanh_back)}


# ---------------------------------------------------------------------------
# Predictor
# ---------------------------------------------------------------------------

@dataclass
class Predictor:
    cfg: ProbeConfig
    params: dict = field(default_factory=dict)

    def copy(self) -> "Predictor":
        return Predictor(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def flat_size(self) -> int:
        c = self.cfg
        return c.L * c.n2 if c.literal_block2 else c.n1 * c.n2


def predictor_shapes(cfg: ProbeConfig) -> dict:
    flat = cfg.L * cfg.n2 if cfg.literal_block2 else cfg.n1 * cfg.n2
    shapes = {"W1": (cfg.d, cfg.n1), "b1": (cfg.n1,)}
    if cfg.L > 1:
        shapes.update({"W2": (cfg.n1, cfg.n2) if cfg.literal_block2 else (cfg.L, cfg.n2),
                       "b2": (cfg.n2,)})
    else:
        flat = cfg.n1
    shapes.update({"W3": (flat, cfg.num_choices), "b3": (cfg.num_choices,)})
    return shapes


def predictor_param_count(cfg: ProbeConfig) -> int:
    return int(sum(np.prod(s) for s in predictor_shapes(cfg).values()))


def build_predictor(cfg: ProbeConfig, zero_final: bool = False) -> Predictor:
    """Seeded scaled-normal weights, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in predictor_shapes(cfg).items():
        if name.startswith("b") or (zero_final and name == "W3"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return Predictor(cfg, params)


def _check_hidden(pred: Predictor, hidden: np.ndarray) -> np.ndarray:
    h = np.asarray(hidden, dtype=np.float64)
    if h.ndim == 2:
        h = h[None]
    c = pred.cfg
    if h.ndim != 3 or h.shape[1:] != (c.L, c.d):
        raise ShapeMismatch(f"expected hidden of shape ({c.L}, {c.d}), got {np.shape(hidden)}")
    return h


def _forward(pred: Predictor, h: np.ndarray) -> tuple:
    """Batched forward on (N, L, d); returns (log-probs (N, C), cache)."""
    c, p = pred.cfg, pred.params
    norm, _ = NORMS[c.norm_kind]
    act, _ = ACTIVATIONS[c.activation_kind]
    cache = {}
    x1, cache["n1"] = norm(h)
    z1 = x1 @ p["W1"] + p["b1"]  # (N, L, n1)
    a1, cache["a1"] = act(z1)
    cache["x1"] = x1
    if c.L > 1:
        x2, cache["n2"] = norm(a1)
        cache["x2"] = x2
        if c.literal_block2:
            z2 = x2 @ p["W2"] + p["b2"]  # (N, L, n2)
        else:
            z2 = np.einsum("nlf,lk->nkf", x2, p["W2"]) + p["b2"][None, :, None]  # (N, n2, n1)
        a2, cache["a2"] = act(z2)
    else:
        a2 = a1
    flat = a2.reshape(len(h), -1)
    x3, cache["n3"] = norm(flat)
    cache["x3"] = x3
    logits = x3 @ p["W3"] + p["b3"]
    return policy.log_softmax(logits), cache


def _backward(pred: Predictor, h: np.ndarray, cache: dict, dlogits: np.ndarray) -> dict:
    c, p = pred.cfg, pred.params
    _, norm_back = NORMS[c.norm_kind]
    _, act_back = ACTIVATIONS[c.activation_kind]
    g = {"W3": cache["x3"].T @ dlogits, "b3": dlogits.sum(axis=0)}
    dflat = norm_back(dlogits @ p["W3"].T, cache["n3"])
    if c.L > 1:
        shape = (len(h), c.L, c.n2) if c.literal_block2 else (len(h), c.n2, c.n1)
        dz2 = act_back(dflat.reshape(shape), cache["a2"])
        x2 = cache["x2"]
        if c.literal_block2:
            g["W2"] = np.einsum("nlf,nlk->fk", x2, dz2)
            g["b2"] = dz2.sum(axis=(0, 1))
            dx2 = dz2 @ p["W2"].T
        else:
            g["W2"] = np.einsum("nlf,nkf->lk", x2, dz2)
            g["b2"] = dz2.sum(axis=(0, 2))
            dx2 = np.einsum("nkf,lk->nlf", dz2, p["W2"])
        da1 = norm_back(dx2, cache["n2"])
    else:
        da1 = dflat.reshape(len(h), 1, c.n1)
    dz1 = act_back(da1, cache["a1"])
    g["W1"] = np.einsum("nld,nlf->df", cache["x1"], dz1)
    g["b1"] = dz1.sum(axis=(0, 1))
    return g


def predictor_forward(pred: Predictor, hidden) -> np.ndarray:
    """Probability vector over the C choices for one (L, d) stack; (N, C) for a batch."""
    h = _check_hidden(pred, hidden)
    logp, _ = _forward(pred, h)
    probs = np.exp(logp)
    return probs[0] if np.ndim(hidden) == 2 else probs


def probe_loss(pred: Predictor, hidden: np.ndarray, labels: Sequence[int]) -> LossResult:
    """Mean cross-entropy and its exact gradient."""
    h = _check_hidden(pred, hidden)
    y = np.asarray(labels, dtype=np.int64)
    logp, cache = _forward(pred, h)
    n = len(y)
    loss = -float(logp[np.arange(n), y].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    grads = _backward(pred, h, cache, dlogits / n)
    return LossResult(loss, grads, {"n": n})


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeExample:
    hidden: np.ndarray  # (L, d)
    label: int


def _stratified(labels: np.ndarray, val_fraction: float, rng: np.random.Generator) -> tuple:
    tr, va = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = 0 if len(idx) < 2 else min(max(1, int(round(val_fraction * len(idx)))), len(idx) - 1)
        va += idx[:k].tolist()
        tr += idx[k:].tolist()
    return np.array(sorted(tr)), np.array(sorted(va))


def _check_examples(examples: Sequence[ProbeExample], cfg: ProbeConfig) -> tuple:
    if not examples:
        raise InsufficientData("no probe examples")
    labels = np.array([e.label for e in examples])
    if labels.min() < 0 or labels.max() >= cfg.num_choices:
        raise ValueError("label outside [0, num_choices)")
    counts = np.bincount(labels, minlength=cfg.num_choices)
    present = counts[counts > 0]
    if len(present) < 2 or present.min() < 2:
        raise InsufficientData("need at least two classes with two or more examples each")
    return np.stack([np.asarray(e.hidden, dtype=np.float64) for e in examples]), labels


@dataclass
class ProbeResult:
    predictor: Predictor
    train_accuracy: float
    val_accuracy: float
    losses: list


def accuracy(pred: Predictor, hidden: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(predictor_forward(pred, hidden), axis=-1) == labels))


def train_probe(examples: Sequence[ProbeExample], cfg: ProbeConfig,
                split: tuple = (0.7, 0.3)) -> ProbeResult:
    """Fit on a stratified train split and report accuracy on the validation split.

    Every class with at least two examples contributes to both splits; singletons train.
    """
    hidden, labels = _check_examples(examples, cfg)
    if not np.isclose(sum(split), 1.0) or min(split) <= 0:
        raise ValueError("split must be two positive fractions summing to 1")
    tr, va = _stratified(labels, split[1], np.random.default_rng(cfg.seed))
    pred = build_predictor(cfg)
    data = list(tr)

    def batch_loss(m, batch, _rng):
        return probe_loss(m, hidden[batch], labels[batch])

    pred, report = train.run_sgd(pred, data, batch_loss, cfg.learning_rate, cfg.epochs,
                                 cfg.batch_size, cfg.seed, "probe", cfg.echo())
    return ProbeResult(pred, accuracy(pred, hidden[tr], labels[tr]),
                       accuracy(pred, hidden[va], labels[va]), report.epoch_losses)


@dataclass(frozen=True)
class LayerScore:
    layer: int
    train_accuracy: float
    val_accuracy: float


def layerwise_probe(examples: Sequence[ProbeExample], cfg: ProbeConfig,
                    split: tuple = (0.7, 0.3)) -> list:
    """One single-layer probe (Blocks 1 and 3) per layer; returns scores in layer order."""
    if not examples:
        raise InsufficientData("no probe examples")
    out = []
    for layer in range(cfg.L):
        sub = [ProbeExample(np.asarray(e.hidden)[layer:layer + 1], e.label) for e in examples]
        r = train_probe(sub, cfg.single_layer(layer), split)
        out.append(LayerScore(layer, r.train_accuracy, r.val_accuracy))
    return out


def examples_from_model(model: policy.PolicyModel, contexts: Sequence[Sequence[int]],
                        labels: Sequence[int]) -> list:
    """Export last-position hidden stacks; the only point where a probe meets a model."""
    stacks = policy.hidden_stacks(model, [list(c) for c in contexts])
    return [ProbeExample(s, int(y)) for s, y in zip(stacks, labels)]


def quartile_means(profile: Sequence[float]) -> tuple:
    """(mean over the first quarter of layers, mean over the last quarter); at least one each."""
    p = np.asarray(profile, dtype=np.float64)
    q = max(1, len(p) // 4)
    return float(p[:q].mean()), float(p[-q:].mean())


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def examples_bytes(examples: Sequence[ProbeExample]) -> bytes:
    """Header length, JSON header, then per example its float64 (L, d) array."""
    if not examples:
        raise InsufficientData("no probe examples")
    shape = np.asarray(examples[0].hidden).shape
    for e in examples:
        if np.asarray(e.hidden).shape != shape:
            raise ShapeMismatch("probe examples have differing shapes")
    header = json.dumps({"format_version": FORMAT_VERSION, "shape": list(shape),
                         "labels": [int(e.label) for e in examples]}, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(e.hidden, dtype="<f8").tobytes() for e in examples)
    return struct.pack("<Q", len(header)) + header + body


def examples_from_bytes(data: bytes) -> list:
    try:
        (n,) = struct.unpack_from("<Q", data, 0)
        header = json.loads(data[8:8 + n].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"probe examples: bad header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError("probe examples: unsupported format version")
    shape = tuple(header["shape"])
    size = int(np.prod(shape)) * 8
    body = data[8 + n:]
    labels = header["labels"]
    if len(body) != size * len(labels):
        raise ParseError("probe examples: truncated body")
    return [ProbeExample(np.frombuffer(body[i * size:(i + 1) * size], dtype="<f8").reshape(shape),
                         int(y)) for i, y in enumerate(labels)]


def save_examples(examples: Sequence[ProbeExample], path) -> None:
    with open(path, "wb") as f:
        f.write(examples_bytes(examples))


def load_examples(path) -> list:
    with open(path, "rb") as f:
        return examples_from_bytes(f.read())


def profile_csv(scores: Sequence[LayerScore]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "train_acc", "val_acc"])
    for s in scores:
        w.writerow([s.layer, repr(s.train_accuracy), repr(s.val_accuracy)])
    return buf.getvalue()
