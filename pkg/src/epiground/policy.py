"""Fixed-window residual sequence model with exact log-probs and gradients.

Every prediction reads the last ``W`` tokens of its left context (left-padded
with PAD). The window is mixed into one vector by position-gated embeddings,
``h0 = sum_w E[t_w] * P[w]``, then passed through ``L`` residual blocks
``h <- h + tanh(A LN(h) + c)`` and an output map ``U h + u``.

Training code works on flat arrays of (window, target) rows: the gradient of
``sum_n coef[n] * log p(target[n] | window[n])`` is all any loss needs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import UnknownToken, VocabMismatch

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)
LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Ordered token list; PAD, BOS and EOS always occupy indices 0, 1, 2."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.tokens) < 4:
            raise ValueError("vocabulary needs at least 4 tokens")

    pad_id, bos_id, eos_id = 0, 1, 2

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def encode(self, words: Iterable[str]) -> list:
        out = []
        for w in words:
            try:
                out.append(self.index[w])
            except KeyError:
                raise UnknownToken(f"token {w!r} is not in the vocabulary") from None
        return out

    def decode(self, ids: Iterable[int]) -> list:
        return [self.tokens[i] for i in ids]

    def extended(self, new_tokens: Iterable[str]) -> "Vocabulary":
        extra = [t for t in dict.fromkeys(new_tokens) if t not in self.index]
        return Vocabulary(self.tokens + tuple(extra))

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Capacity(str, Enum):
    WEAK = "weak"
    STRONG_TOY = "strong_toy"


CAPACITY_SHAPES = {Capacity.WEAK: (2, 32, 8), Capacity.STRONG_TOY: (8, 128, 16)}  # (L, d, W)


class Role(str, Enum):
    EXPERT = "expert"
    NAIVE = "naive"
    STRONG = "strong"
    REFERENCE = "reference"


def param_names(num_layers: int) -> list:
    names = ["E", "P"]
    for l in range(num_layers):
        names += [f"g{l}", f"b{l}", f"A{l}", f"c{l}"]
    return names + ["U", "u"]


def param_count(V: int, d: int, W: int, L: int) -> int:
    """Closed form: embeddings, position gates, L blocks, output map and bias."""
    return V * d + W * d + L * (d * d + 2 * d) + L * d + d * V + V


@dataclass
class PolicyModel:
    vocab: Vocabulary
    window: int
    embed_dim: int
    num_layers: int
    params: dict
    role: Role = Role.STRONG
    capacity: Optional[Capacity] = None
    seed: int = 0

    def __post_init__(self):
        expected = self.shapes()
        if list(self.params) != list(expected):
            self.params = {k: self.params[k] for k in expected}
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    def shapes(self) -> dict:
        V, d, W = len(self.vocab), self.embed_dim, self.window
        out = {"E": (V, d), "P": (W, d)}
        for l in range(self.num_layers):
            out.update({f"g{l}": (d,), f"b{l}": (d,), f"A{l}": (d, d), f"c{l}": (d,)})
        out.update({"U": (V, d), "u": (V,)})
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self, role: Optional[Role] = None) -> "PolicyModel":
        return PolicyModel(self.vocab, self.window, self.embed_dim, self.num_layers,
                           {k: v.copy() for k, v in self.params.items()},
                           role or self.role, self.capacity, self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k, p in self.params.items():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size


def init_model(capacity: Union[Capacity, str], vocab: Vocabulary, seed: int = 0,
               role: Role = Role.STRONG) -> PolicyModel:
    capacity = Capacity(capacity)
    L, d, W = CAPACITY_SHAPES[capacity]
    return init_custom(vocab, L, d, W, seed, role, capacity)


def init_custom(vocab: Vocabulary, num_layers: int, embed_dim: int, window: int, seed: int = 0,
                role: Role = Role.STRONG, capacity: Optional[Capacity] = None) -> PolicyModel:
    """Gaussian weights scaled by 1/sqrt(fan-in); LN gains 1, biases 0.

    The embedding lookup has fan-in 1 and the window mix fan-in ``W``, so the
    mixed input starts with unit variance.
    """
    rng = np.random.default_rng(seed)
    V, d = len(vocab), embed_dim
    s = 1.0 / np.sqrt(d)
    params = {"E": rng.standard_normal((V, d)),
              "P": rng.standard_normal((window, d)) / np.sqrt(window)}
    for l in range(num_layers):
        params[f"g{l}"] = np.ones(d)
        params[f"b{l}"] = np.zeros(d)
        params[f"A{l}"] = rng.standard_normal((d, d)) * s
        params[f"c{l}"] = np.zeros(d)
    params["U"] = rng.standard_normal((V, d)) * s
    params["u"] = np.zeros(V)
    return PolicyModel(vocab, window, d, num_layers, params, role, capacity, seed)


def zero_model(model: PolicyModel) -> PolicyModel:
    out = model.copy()
    for p in out.params.values():
        p[...] = 0.0
    return out


def check_same_vocab(*models: PolicyModel) -> None:
    first = models[0].vocab
    for m in models[1:]:
        if m.vocab != first:
            raise VocabMismatch("models do not share a vocabulary")


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

def window_of(ids: Sequence[int], W: int) -> np.ndarray:
    tail = list(ids[-W:]) if W else []
    return np.array([0] * (W - len(tail)) + tail, dtype=np.int64)


def sequence_windows(x_ids: Sequence[int], y_ids: Sequence[int], W: int) -> np.ndarray:
    """Row m is the window preceding y[m]."""
    full = list(x_ids) + list(y_ids)
    n = len(x_ids)
    padded = np.concatenate([np.zeros(W, dtype=np.int64), np.asarray(full, dtype=np.int64)])
    return np.stack([padded[n + m:n + m + W] for m in range(len(y_ids))]) if len(y_ids) \
        else np.zeros((0, W), dtype=np.int64)


@dataclass
class Rows:
    """Flat training rows: windows (N, W), targets (N,), and owning sequence ids (N,)."""

    windows: np.ndarray
    targets: np.ndarray
    seq: np.ndarray
    n_seq: int

    @classmethod
    def build(cls, pairs: Sequence[tuple], W: int) -> "Rows":
        wins, tgts, seq = [], [], []
        for i, (x_ids, y_ids) in enumerate(pairs):
            wins.append(sequence_windows(x_ids, y_ids, W))
            tgts.append(np.asarray(y_ids, dtype=np.int64))
            seq.append(np.full(len(y_ids), i, dtype=np.int64))
        if not pairs:
            return cls(np.zeros((0, W), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64), 0)
        return cls(np.concatenate(wins), np.concatenate(tgts), np.concatenate(seq), len(pairs))

    def __len__(self) -> int:
        return len(self.targets)

    def per_sequence(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.seq, weights=values, minlength=self.n_seq)


# ---------------------------------------------------------------------------
# Forward and backward
# ---------------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


@dataclass
class Cache:
    windows: np.ndarray
    emb: np.ndarray  # (N, W, d) gathered embeddings
    hs: list  # block inputs h_0 .. h_L
    xhat: list
    inv_sigma: list
    normed: list
    acts: list  # tanh outputs
    logits: np.ndarray
    logp: np.ndarray = field(default=None)


def forward(model: PolicyModel, windows: np.ndarray) -> Cache:
    P = model.params
    emb = P["E"][windows]
    h = np.einsum("nwd,wd->nd", emb, P["P"])
    hs, xhats, invs, normed, acts = [h], [], [], [], []
    for l in range(model.num_layers):
        mu = h.mean(axis=1, keepdims=True)
        cen = h - mu
        inv = 1.0 / np.sqrt((cen * cen).mean(axis=1, keepdims=True) + LN_EPS)
        xhat = cen * inv
        n = xhat * P[f"g{l}"] + P[f"b{l}"]
        t = np.tanh(n @ P[f"A{l}"].T + P[f"c{l}"])
        h = h + t
        xhats.append(xhat)
        invs.append(inv)
        normed.append(n)
        acts.append(t)
        hs.append(h)
    logits = h @ P["U"].T + P["u"]
    cache = Cache(windows, emb, hs, xhats, invs, normed, acts, logits)
    cache.logp = log_softmax(logits)
    return cache


def backward(model: PolicyModel, cache: Cache, dlogits: np.ndarray) -> dict:
    """Gradients of ``sum(dlogits * logits)`` w.r.t. every parameter."""
    P = model.params
    g = {}
    h_last = cache.hs[-1]
    g["U"] = dlogits.T @ h_last
    g["u"] = dlogits.sum(axis=0)
    dh = dlogits @ P["U"]
    for l in reversed(range(model.num_layers)):
        t = cache.acts[l]
        da = dh * (1.0 - t * t)
        g[f"A{l}"] = da.T @ cache.normed[l]
        g[f"c{l}"] = da.sum(axis=0)
        dn = da @ P[f"A{l}"]
        xhat = cache.xhat[l]
        g[f"g{l}"] = (dn * xhat).sum(axis=0)
        g[f"b{l}"] = dn.sum(axis=0)
        dx = dn * P[f"g{l}"]
        dh = dh + cache.inv_sigma[l] * (dx - dx.mean(axis=1, keepdims=True)
                                        - xhat * (dx * xhat).mean(axis=1, keepdims=True))
    g["P"] = np.einsum("nd,nwd->wd", dh, cache.emb)
    dE = np.zeros_like(P["E"])
    contrib = dh[:, None, :] * P["P"][None, :, :]
    np.add.at(dE, cache.windows.ravel(), contrib.reshape(-1, model.embed_dim))
    g["E"] = dE
    return {k: g[k] for k in P}


def row_logprobs(model: PolicyModel, rows: Rows) -> tuple:
    """Per-row log p(target | window) and the forward cache."""
    cache = forward(model, rows.windows)
    lp = cache.logp[np.arange(len(rows)), rows.targets]
    return lp, cache


def logprob_grad(model: PolicyModel, cache: Cache, targets: np.ndarray, coef: np.ndarray) -> dict:
    """Gradient of ``sum_n coef[n] * log p(targets[n] | window[n])``."""
    probs = np.exp(cache.logp)
    dlogits = -probs * coef[:, None]
    dlogits[np.arange(len(targets)), targets] += coef
    return backward(model, cache, dlogits)


def zeros_like_params(model: PolicyModel) -> dict:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def add_into(acc: dict, g: dict, scale: float = 1.0) -> None:
    for k, v in g.items():
        acc[k] += scale * v


def grad_norm(g: dict) -> float:
    return float(np.sqrt(sum(float((v * v).sum()) for v in g.values())))


# ---------------------------------------------------------------------------
# Public inference API
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HiddenStack:
    states: np.ndarray  # (L, d)

    def __post_init__(self):
        if not np.all(np.isfinite(self.states)):
            raise ValueError("non-finite hidden state")

    def __len__(self) -> int:
        return self.states.shape[0]


def _ids(model: PolicyModel, context: Sequence) -> list:
    if all(isinstance(t, (int, np.integer)) for t in context):
        V = len(model.vocab)
        for t in context:
            if not 0 <= t < V:
                raise UnknownToken(f"token id {t} out of range")
        return list(context)
    return model.vocab.encode(context)


def step_dist(model: PolicyModel, context: Sequence, return_hidden: bool = False):
    """Next-token distribution after ``context`` (token strings or ids)."""
    win = window_of(_ids(model, context), model.window)[None, :]
    cache = forward(model, win)
    probs = np.exp(cache.logp[0])
    if return_hidden:
        return probs, HiddenStack(np.stack([h[0] for h in cache.hs[1:]]))
    return probs


def step_logprobs_batch(model: PolicyModel, contexts: Sequence[Sequence[int]]) -> np.ndarray:
    wins = np.stack([window_of(c, model.window) for c in contexts])
    return forward(model, wins).logp


def hidden_stacks(model: PolicyModel, contexts: Sequence[Sequence[int]]) -> np.ndarray:
    """(N, L, d) hidden states at the last position of each context."""
    wins = np.stack([window_of(c, model.window) for c in contexts])
    cache = forward(model, wins)
    return np.stack(cache.hs[1:], axis=1)


def seq_logprob(model: PolicyModel, x: Sequence, y: Sequence) -> float:
    x_ids, y_ids = _ids(model, x), _ids(model, y)
    rows = Rows.build([(x_ids, y_ids)], model.window)
    if not len(rows):
        return 0.0
    lp, _ = row_logprobs(model, rows)
    return float(lp.sum())


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class Temperature:
    t: float

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("temperature must be positive")


DecodeMode = Union[Greedy, Temperature]


def choose(logp: np.ndarray, mode: DecodeMode, rng: Optional[np.random.Generator]) -> int:
    if isinstance(mode, Greedy):
        return int(np.argmax(logp))  # first maximum, i.e. lowest index
    z = log_softmax(logp / mode.t)
    if rng is None:
        raise ValueError("temperature sampling needs an rng")
    return int(rng.choice(len(z), p=np.exp(z) / np.exp(z).sum()))


def decode_with(step_logp, x_ids: Sequence[int], mode: DecodeMode, max_len: int,
                rng: Optional[np.random.Generator] = None, eos_id: int = 2) -> list:
    """Generic decoding loop over a ``step_logp(context_ids) -> log-prob vector`` callable."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ctx, out = list(x_ids), []
    while len(out) < max_len:
        tok = choose(step_logp(ctx), mode, rng)
        out.append(tok)
        ctx.append(tok)
        if tok == eos_id:
            break
    return out


def sample(model: PolicyModel, x: Sequence, mode: DecodeMode = Greedy(), max_len: int = 32,
           rng: Optional[np.random.Generator] = None) -> list:
    x_ids = _ids(model, x)

    def step(ctx):
        return forward(model, window_of(ctx, model.window)[None, :]).logp[0]
    return decode_with(step, x_ids, mode, max_len, rng, model.vocab.eos_id)


def lockstep(step_batch, prompts: Sequence[Sequence[int]], n: int = 1, max_len: int = 32,
             rng: Optional[np.random.Generator] = None, eos_id: int = 2) -> list:
    """Decode ``n`` continuations per prompt together; greedy when ``rng`` is None.

    ``step_batch(contexts) -> (N, V) log-probs``. Returns [[ids, ...] per prompt].
    """
    ctxs = [list(p) for p in prompts for _ in range(n)]
    outs = [[] for _ in ctxs]
    live = list(range(len(ctxs)))
    while live:
        logp = step_batch([ctxs[i] for i in live])
        if rng is None:
            toks = np.argmax(logp, axis=1)
        else:
            cdf = np.exp(logp).cumsum(axis=1)
            u = rng.random(len(live))
            toks = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1).clip(max=logp.shape[1] - 1)
        nxt = []
        for i, tok in zip(live, toks):
            outs[i].append(int(tok))
            ctxs[i].append(int(tok))
            if tok != eos_id and len(outs[i]) < max_len:
                nxt.append(i)
        live = nxt
    return [outs[j * n:(j + 1) * n] for j in range(len(prompts))]


def sample_batch(model: PolicyModel, prompts: Sequence[Sequence[int]], n: int, max_len: int,
                 rng: Optional[np.random.Generator]) -> list:
    """``n`` ancestral samples per prompt (greedy if ``rng`` is None)."""
    return lockstep(lambda c: step_logprobs_batch(model, c), prompts, n, max_len, rng,
                    model.vocab.eos_id)


def greedy_batch(model: PolicyModel, prompts: Sequence[Sequence[int]], max_len: int = 32) -> list:
    return [o[0] for o in sample_batch(model, prompts, 1, max_len, None)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: PolicyModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def checkpoint_bytes(model: PolicyModel) -> bytes:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "capacity": model.capacity.value if model.capacity else None,
        "role": model.role.value,
        "vocab_hash": model.vocab.digest(),
        "vocab": list(model.vocab.tokens),
        "seed": model.seed,
        "window": model.window, "embed_dim": model.embed_dim, "num_layers": model.num_layers,
        "arrays": [[k, list(v.shape)] for k, v in model.params.items()],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in model.params.values())
    return struct.pack("<Q", len(head)) + head + body


def load_checkpoint(path) -> PolicyModel:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def checkpoint_from_bytes(data: bytes) -> PolicyModel:
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    vocab = Vocabulary(header["vocab"])
    if vocab.digest() != header["vocab_hash"]:
        raise VocabMismatch("checkpoint vocabulary does not match its hash")
    off = 8 + n
    params = {}
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    cap = Capacity(header["capacity"]) if header["capacity"] else None
    return PolicyModel(vocab, header["window"], header["embed_dim"], header["num_layers"], params,
                       Role(header["role"]), cap, header["seed"])
