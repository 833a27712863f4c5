"""Post-LN transformer encoder with a tied masked-LM head.

Exposes a plain forward pass (optionally without positional embeddings)
that records every layer's output, an injected forward pass that overwrites
one position at every layer with previously captured states, and a
recorded forward graph for training.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, InjectionError, LengthError, StateError

MAGIC = b"RPW1"
FORMAT_VERSION = 1
HEAD_KIND = "layernorm+tied-decoder+bias"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    hidden: int = 32
    ff_dim: int = 64
    vocab_size: int = 37
    max_positions: int = 32
    layernorm_eps: float = 1e-12

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "hidden", "ff_dim", "vocab_size", "max_positions"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by n_heads {self.n_heads}")
        if not self.layernorm_eps > 0:
            raise ConfigError("layernorm_eps must be > 0")

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        extra = set(d) - set(known)
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**known)

    def to_dict(self):
        return asdict(self)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical (ordered) parameter names and shapes for a config."""
    d, f = config.hidden, config.ff_dim
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_positions, d),
        "emb_ln.gamma": (d,),
        "emb_ln.beta": (d,),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.w"] = (d, d)
            shapes[p + f"attn.{proj}.b"] = (d,)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ff1.w"] = (f, d)
        shapes[p + "ff1.b"] = (f,)
        shapes[p + "ff2.w"] = (d, f)
        shapes[p + "ff2.b"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    shapes["head_ln.gamma"] = (d,)
    shapes["head_ln.beta"] = (d,)
    shapes["out_bias"] = (config.vocab_size,)
    return shapes


class WeightSet:
    """All learned tensors of one model, keyed by canonical name."""

    def __init__(self, config: ModelConfig, params: dict[str, nn.Parameter]):
        shapes = parameter_shapes(config)
        if list(params) != list(shapes):
            missing = set(shapes) - set(params)
            extra = set(params) - set(shapes)
            raise FormatError(f"parameter set mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise FormatError(f"tensor {name!r}: shape {params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(params[name].value)):
                raise FormatError(f"tensor {name!r}: non-finite values")
        self.config = config
        self.params = params

    def __getitem__(self, name):
        return self.params[name].value

    def __iter__(self):
        return iter(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self):
        return WeightSet(self.config, {k: nn.Parameter(k, p.value.copy()) for k, p in self.params.items()})


def init_weights(config: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> WeightSet:
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            value = np.ones(shape)
        elif name.endswith((".beta", ".b")) or name == "out_bias":
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, std, size=shape)
        params[name] = nn.Parameter(name, value)
    return WeightSet(config, params)


@dataclass
class CapturedStates:
    """Hidden states per layer: index 0 is the embedding output, index l the
    output of encoder layer l. Shape (L+1, n, d), or (L+1, B, n, d) batched."""
    states: np.ndarray

    @property
    def length(self):
        return self.states.shape[-2]


@dataclass
class MlmOutput:
    logits: np.ndarray
    log_probs: np.ndarray


def _check_ids(weights, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim not in (1, 2):
        raise LengthError("ids must be 1-D or 2-D")
    n = ids.shape[-1]
    if n > weights.config.max_positions:
        raise LengthError(f"sequence length {n} exceeds max_positions {weights.config.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= weights.config.vocab_size):
        raise IndexError("token id out of vocabulary range")
    return ids


def _encode(weights, ids, use_positions, inject=None, graph=None):
    """Shared forward. ``ids`` is (B, n). ``inject`` is (states (L+1, n, d), source positions (B,)).

    Returns final logits and the per-layer output list.
    """
    cfg = weights.config
    eps = cfg.layernorm_eps
    B, n = ids.shape
    x = weights["tok_emb"][ids]
    if use_positions:
        x = x + weights["pos_emb"][:n]
    h, ln_cache = nn.layer_norm_forward(x, weights["emb_ln.gamma"], weights["emb_ln.beta"], eps)
    rows = np.arange(B)
    if inject is not None:
        captured, src = inject
        h[rows, src] = captured[0][src]
    states = [h]
    layer_caches = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a, attn_cache = nn.attention_forward(
            h,
            weights[p + "attn.q.w"], weights[p + "attn.q.b"],
            weights[p + "attn.k.w"], weights[p + "attn.k.b"],
            weights[p + "attn.v.w"], weights[p + "attn.v.b"],
            weights[p + "attn.o.w"], weights[p + "attn.o.b"],
            cfg.n_heads,
        )
        h1, ln1_cache = nn.layer_norm_forward(h + a, weights[p + "ln1.gamma"], weights[p + "ln1.beta"], eps)
        u, ff1_cache = nn.linear_forward(h1, weights[p + "ff1.w"], weights[p + "ff1.b"])
        f, ff2_cache = nn.linear_forward(nn.gelu(u), weights[p + "ff2.w"], weights[p + "ff2.b"])
        h2, ln2_cache = nn.layer_norm_forward(h1 + f, weights[p + "ln2.gamma"], weights[p + "ln2.beta"], eps)
        if inject is not None:
            h2[rows, src] = captured[i + 1][src]
        states.append(h2)
        h = h2
        if graph is not None:
            layer_caches.append((attn_cache, ln1_cache, u, ff1_cache, ff2_cache, ln2_cache))
    z, head_cache = nn.layer_norm_forward(h, weights["head_ln.gamma"], weights["head_ln.beta"], eps)
    logits = z @ weights["tok_emb"].T + weights["out_bias"]
    if graph is not None:
        graph._caches = (ids, use_positions, ln_cache, layer_caches, head_cache, z)
    return logits, states


def forward_plain(weights: WeightSet, ids, use_positions: bool = True):
    """Unhooked forward pass. Returns (MlmOutput, CapturedStates)."""
    ids = _check_ids(weights, ids)
    single = ids.ndim == 1
    logits, states = _encode(weights, ids[None] if single else ids, use_positions)
    stacked = np.stack(states)
    if single:
        logits, stacked = logits[0], stacked[:, 0]
    return MlmOutput(logits, nn.log_softmax_rows(logits)), CapturedStates(stacked)


def forward_injected(weights: WeightSet, masked_ids, source_pos, captured: CapturedStates) -> MlmOutput:
    """Forward with positions on; after the embedding layer and after every
    encoder layer, row ``source_pos`` is overwritten with the captured state.

    ``masked_ids`` may be a batch (B, n) with one source position per row.
    """
    ids = _check_ids(weights, masked_ids)
    single = ids.ndim == 1
    ids2 = ids[None] if single else ids
    B, n = ids2.shape
    states = np.asarray(captured.states)
    cfg = weights.config
    if states.shape != (cfg.n_layers + 1, n, cfg.hidden):
        raise InjectionError(
            f"captured states shape {states.shape} incompatible with sequence length {n} "
            f"and model ({cfg.n_layers + 1} layers, width {cfg.hidden})"
        )
    src = np.broadcast_to(np.asarray(source_pos, dtype=np.int64), (B,))
    if src.min() < 0 or src.max() >= n:
        raise IndexError(f"source position out of range for length {n}")
    logits, _ = _encode(weights, ids2, True, inject=(states, src))
    if single:
        logits = logits[0]
    return MlmOutput(logits, nn.log_softmax_rows(logits))


def target_log_probs(output: MlmOutput, targets):
    """For each (position, token id) return (log p, log(1 - p)).

    log(1 - p) is the log-sum-exp of the other logits minus the full
    log-sum-exp, so it stays accurate when p is close to 1.
    """
    logits = output.logits
    if logits.ndim != 2:
        raise ValueError("target_log_probs expects a single (n, V) output")
    n, V = logits.shape
    out = []
    for pos, tok in targets:
        if not (0 <= pos < n and 0 <= tok < V):
            raise IndexError(f"target ({pos}, {tok}) out of range")
        row = logits[pos]
        total = nn.logsumexp_rows(row)
        others = np.delete(row, tok)
        rest = nn.logsumexp_rows(others) if others.size else -np.inf
        out.append((float(row[tok] - total), float(rest - total)))
    return out


def batch_target_log_probs(logits, positions, tokens):
    """Vectorised ``target_log_probs`` over arbitrary index arrays into (..., n, V) logits."""
    rows = logits[positions]
    total = nn.logsumexp_rows(rows)
    sel = np.take_along_axis(rows, tokens[..., None], axis=-1)[..., 0]
    excl = rows.copy()
    np.put_along_axis(excl, tokens[..., None], -np.inf, axis=-1)
    return sel - total, nn.logsumexp_rows(excl) - total


# --- training graph ---------------------------------------------------------

class ForwardGraph:
    """Caches of one recorded forward pass; consumed by :func:`backward`."""

    def __init__(self):
        self._caches = None
        self.weights = None
        self.logits = None


def forward_graph(weights: WeightSet, ids, use_positions: bool = True) -> ForwardGraph:
    ids = _check_ids(weights, ids)
    if ids.ndim == 1:
        ids = ids[None]
    graph = ForwardGraph()
    graph.weights = weights
    graph.logits, _ = _encode(weights, ids, use_positions, graph=graph)
    return graph


def backward(graph: ForwardGraph, dlogits) -> None:
    """Accumulate parameter gradients given d(loss)/d(logits) of shape (B, n, V)."""
    if graph is None or graph._caches is None:
        raise StateError("backward called without a recorded forward pass")
    weights = graph.weights
    cfg = weights.config
    P = weights.params
    ids, use_positions, ln_cache, layer_caches, head_cache, z = graph._caches
    graph._caches = None
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(graph.logits.shape)

    V = cfg.vocab_size
    dl2 = dlogits.reshape(-1, V)
    P["out_bias"].grad += dl2.sum(axis=0)
    P["tok_emb"].grad += dl2.T @ z.reshape(-1, cfg.hidden)
    dz = dlogits @ weights["tok_emb"]
    dh, dg, db = nn.layer_norm_backward(dz, head_cache)
    P["head_ln.gamma"].grad += dg
    P["head_ln.beta"].grad += db

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}."
        attn_cache, ln1_cache, u, ff1_cache, ff2_cache, ln2_cache = layer_caches[i]
        dr2, dg, db = nn.layer_norm_backward(dh, ln2_cache)
        P[p + "ln2.gamma"].grad += dg
        P[p + "ln2.beta"].grad += db
        dgu, dw, db = nn.linear_backward(dr2, ff2_cache)
        P[p + "ff2.w"].grad += dw
        P[p + "ff2.b"].grad += db
        dh1_ff, dw, db = nn.linear_backward(dgu * nn.gelu_grad(u), ff1_cache)
        P[p + "ff1.w"].grad += dw
        P[p + "ff1.b"].grad += db
        dh1 = dr2 + dh1_ff
        dr1, dg, db = nn.layer_norm_backward(dh1, ln1_cache)
        P[p + "ln1.gamma"].grad += dg
        P[p + "ln1.beta"].grad += db
        dx_attn, *grads = nn.attention_backward(dr1, attn_cache)
        for name, g in zip(("q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b"), grads):
            P[p + "attn." + name].grad += g
        dh = dr1 + dx_attn

    dx, dg, db = nn.layer_norm_backward(dh, ln_cache)
    P["emb_ln.gamma"].grad += dg
    P["emb_ln.beta"].grad += db
    np.add.at(P["tok_emb"].grad, ids.reshape(-1), dx.reshape(-1, cfg.hidden))
    if use_positions:
        P["pos_emb"].grad[: ids.shape[1]] += dx.sum(axis=0)


def masked_cross_entropy(logits, targets, flags):
    """Mean cross-entropy over flagged positions, and its gradient w.r.t. logits."""
    flags = np.asarray(flags, dtype=bool)
    count = int(flags.sum())
    dlogits = np.zeros_like(logits)
    if count == 0:
        return 0.0, dlogits
    rows = logits[flags]
    logp = nn.log_softmax_rows(rows)
    t = np.asarray(targets)[flags]
    loss = -logp[np.arange(count), t].sum() / count
    g = np.exp(logp)
    g[np.arange(count), t] -= 1.0
    dlogits[flags] = g / count
    return float(loss), dlogits


def mlm_loss_and_grads(weights: WeightSet, ids, targets, flags, use_positions: bool = True) -> float:
    """Forward + backward of the masked-LM loss; gradients accumulate into ``weights``."""
    graph = forward_graph(weights, ids, use_positions)
    loss, dlogits = masked_cross_entropy(graph.logits, np.atleast_2d(targets), np.atleast_2d(flags))
    backward(graph, dlogits)
    return loss


# --- weight container ---------------------------------------------------------

def save_weights(weights: WeightSet, path) -> None:
    """Write the RPW1 container: magic, u32 version, u64 index length, JSON index, raw f64 LE."""
    index = {"config": weights.config.to_dict(), "head": HEAD_KIND, "tensors": []}
    offset = 0
    chunks = []
    for name, p in weights.params.items():
        data = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        index["tensors"].append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += len(data)
        chunks.append(data)
    blob = json.dumps(index, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_weights(path) -> WeightSet:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (n_index,) = struct.unpack_from("<Q", raw, 8)
    if 16 + n_index > len(raw):
        raise FormatError(f"{path}: truncated index")
    try:
        index = json.loads(raw[16:16 + n_index].decode("utf-8"))
        config = ModelConfig.from_dict(index["config"])
        tensors = index["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed index ({exc})") from exc
    if index.get("head") != HEAD_KIND:
        raise FormatError(f"{path}: unsupported head {index.get('head')!r}")
    data = memoryview(raw)[16 + n_index:]
    expected = parameter_shapes(config)
    params = {}
    end = 0
    for entry in tensors:
        name = entry.get("name")
        shape = tuple(entry.get("shape", ()))
        if name not in expected:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
        if shape != expected[name]:
            raise FormatError(f"{path}: tensor {name!r} has shape {shape}, expected {expected[name]}")
        start = int(entry["offset"])
        stop = start + 8 * int(np.prod(shape))
        if start < 0 or stop > len(data):
            raise FormatError(f"{path}: tensor {name!r} extends past end of file (truncated)")
        params[name] = nn.Parameter(name, np.frombuffer(data[start:stop], dtype="<f8").reshape(shape).astype(np.float64))
        end = max(end, stop)
    if end != len(data):
        raise FormatError(f"{path}: {len(data) - end} trailing bytes")
    ordered = {}
    for name in expected:
        if name not in params:
            raise FormatError(f"{path}: missing tensor {name!r}")
        ordered[name] = params[name]
    return WeightSet(config, ordered)
