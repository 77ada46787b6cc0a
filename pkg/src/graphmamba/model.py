"""The GraphMamba network as pure functions over a parameter mapping.

Data flow for a batch of patches::

    patches -> tokenize -> (spatial, spectral, tokens)
    tokens  -> prioritize -> graph_propagate          -> graph_out
    (spatial, spectral)   -> cross_attention          -> attn_out
    (graph_out, attn_out) -> fuse -> gru_ssm -> classify -> logits

Shapes use ``batch`` for the mini-batch extent and ``bands`` for spectral
channels; the two are unrelated.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from graphmamba import numerics as nx
from graphmamba.errors import ArgumentError, CheckpointError, DimensionError
from graphmamba.numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    bands: int
    n_classes: int
    patch_size: int = 7
    feature_dim: int = 64
    model_dim: int = 128
    n_spectral_tokens: int | None = None
    n_priority: int | None = None
    l2: float = 0.01

    def __post_init__(self):
        for name in ("bands", "n_classes", "patch_size", "feature_dim", "model_dim"):
            if int(getattr(self, name)) < 1:
                raise ArgumentError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_spectral_tokens is not None and self.n_spectral_tokens < 1:
            raise ArgumentError(f"n_spectral_tokens must be >= 1, got {self.n_spectral_tokens}")
        if self.n_priority is not None and not 1 <= self.n_priority <= self.n_tokens:
            raise ArgumentError(
                f"n_priority must lie in [1, {self.n_tokens}], got {self.n_priority}"
            )
        if self.l2 < 0:
            raise ArgumentError(f"l2 must be non-negative, got {self.l2}")

    @property
    def n_spatial(self) -> int:
        return self.patch_size * self.patch_size

    @property
    def n_spectral(self) -> int:
        return self.patch_size if self.n_spectral_tokens is None else self.n_spectral_tokens

    @property
    def n_tokens(self) -> int:
        return self.n_spatial + self.n_spectral

    @property
    def n_selected(self) -> int:
        return math.ceil(self.n_tokens / 2) if self.n_priority is None else self.n_priority

    @property
    def seq_len(self) -> int:
        return self.n_selected + self.n_spatial

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ModelParams(dict):
    """Named parameter arrays, keyed by dotted path (e.g. ``gru.U_z``)."""

    def total_size(self) -> int:
        return int(sum(v.size for v in self.values()))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.items()})

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.items()})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    F, D = config.feature_dim, config.model_dim
    Bb, Ns, C = config.bands, config.n_spectral, config.n_classes
    shapes = {
        "spatial.kernel": (3, 3, Bb, F),
        "spatial.bias": (F,),
        "spatial.proj.W": (F, F),
        "spatial.proj.b": (F,),
        "spectral.kernel": (1, 1, Bb, Ns * F),
        "spectral.bias": (Ns * F,),
        "spectral.proj.W": (F, F),
        "spectral.proj.b": (F,),
        "score.W": (F, 1),
        "score.b": (1,),
        "graph.W": (F, F),
        "graph.b": (F,),
        "attn.W_q": (F, D),
        "attn.b_q": (D,),
        "attn.W_k": (F, D),
        "attn.b_k": (D,),
        "attn.W_v": (F, F),
        "attn.b_v": (F,),
        "fuse.graph.W": (F, D),
        "fuse.graph.b": (D,),
        "fuse.attn.W": (F, D),
        "fuse.attn.b": (D,),
    }
    for gate in ("z", "r", "h"):
        shapes[f"gru.W_{gate}"] = (D, D)
        shapes[f"gru.U_{gate}"] = (D, D)
        shapes[f"gru.b_{gate}"] = (D,)
    shapes["classifier.W"] = (D, C)
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for path, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[path] = np.zeros(shape, dtype=dtype)
            continue
        receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[path] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


@dataclass
class ForwardTrace:
    spatial_tokens: Tensor
    spectral_tokens: Tensor
    tokens: Tensor
    scores: Tensor
    indices: np.ndarray
    selected: Tensor
    adjacency: Tensor
    graph_agg: Tensor
    graph_out: Tensor
    query: Tensor
    key: Tensor
    value: Tensor
    attn_weights: Tensor
    attn_out: Tensor
    fused: Tensor
    hidden: Tensor
    logits: Tensor

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {f.name: tuple(np.shape(_data(getattr(self, f.name)))) for f in fields(self)}


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def trace_shapes(config: ModelConfig, batch: int) -> dict[str, tuple[int, ...]]:
    """Expected shape of every ForwardTrace field."""
    F, D = config.feature_dim, config.model_dim
    Nsp, Nspc, T, N = config.n_spatial, config.n_spectral, config.n_tokens, config.n_selected
    return {
        "spatial_tokens": (batch, Nsp, F),
        "spectral_tokens": (batch, Nspc, F),
        "tokens": (batch, T, F),
        "scores": (batch, T, 1),
        "indices": (batch, N),
        "selected": (batch, N, F),
        "adjacency": (batch, N, N),
        "graph_agg": (batch, N, F),
        "graph_out": (batch, N, F),
        "query": (batch, Nsp, D),
        "key": (batch, Nspc, D),
        "value": (batch, Nspc, F),
        "attn_weights": (batch, Nsp, Nspc),
        "attn_out": (batch, Nsp, F),
        "fused": (batch, N + Nsp, D),
        "hidden": (batch, N + Nsp, D),
        "logits": (batch, config.n_classes),
    }


def _tensors(params: Mapping) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _check_params(p: Mapping[str, Tensor], config: ModelConfig) -> None:
    for path, shape in param_shapes(config).items():
        if path not in p:
            raise DimensionError(f"missing parameter {path!r}")
        if tuple(p[path].shape) != shape:
            raise DimensionError(f"parameter {path!r} has shape {tuple(p[path].shape)}, expected {shape}")


def tokenize(patches: Tensor, p: Mapping[str, Tensor], config: ModelConfig):
    """Spatial (3x3 conv) and spectral (1x1 conv) token streams and their stack."""
    if patches.ndim != 4 or patches.shape[0] < 1:
        raise DimensionError(f"patch batch must be batch x S x S x bands, got {patches.shape}")
    S = config.patch_size
    if patches.shape[1:] != (S, S, config.bands):
        raise DimensionError(f"patches {patches.shape[1:]} do not match config {(S, S, config.bands)}")
    batch, F = patches.shape[0], config.feature_dim

    sp = nx.relu(nx.conv2d(patches, p["spatial.kernel"], p["spatial.bias"], padding="same"))
    sp = nx.reshape(sp, (batch, config.n_spatial, F))
    spatial = nx.dense(sp, p["spatial.proj.W"], p["spatial.proj.b"])

    spc = nx.relu(nx.conv2d(patches, p["spectral.kernel"], p["spectral.bias"], padding="same"))
    spc = nx.mean(spc, axis=(1, 2))
    spc = nx.reshape(spc, (batch, config.n_spectral, F))
    spectral = nx.dense(spc, p["spectral.proj.W"], p["spectral.proj.b"])

    tokens = nx.concat([spatial, spectral], axis=1)
    return spatial, spectral, tokens


def top_indices(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n largest scores per row, descending, ties to the lower index."""
    scores = np.asarray(scores)
    if n > scores.shape[-1] or n < 1:
        raise ArgumentError(f"cannot select {n} of {scores.shape[-1]} tokens")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :n]


def prioritize(tokens: Tensor, p: Mapping[str, Tensor], n: int, indices: np.ndarray | None = None):
    """Score tokens, keep the top ``n`` and gather them in descending-score order.

    Passing ``indices`` bypasses the selection (used to freeze the discrete
    choice during finite-difference checks).
    """
    if not 1 <= n <= tokens.shape[1]:
        raise ArgumentError(f"cannot select {n} of {tokens.shape[1]} tokens")
    scores = nx.relu(nx.dense(tokens, p["score.W"], p["score.b"]))
    if indices is None:
        indices = top_indices(scores.data[..., 0], n)
    selected = nx.gather_rows(tokens, indices)
    return scores, indices, selected


def graph_propagate(selected: Tensor, p: Mapping[str, Tensor]):
    adjacency = nx.matmul(selected, nx.transpose_last(selected))
    agg = nx.matmul(adjacency, selected)
    out = nx.relu(nx.dense(agg, p["graph.W"], p["graph.b"]))
    return adjacency, agg, out


def cross_attention(spatial: Tensor, spectral: Tensor, p: Mapping[str, Tensor]):
    """Queries from spatial tokens; keys and values from spectral tokens."""
    q = nx.dense(spatial, p["attn.W_q"], p["attn.b_q"])
    k = nx.dense(spectral, p["attn.W_k"], p["attn.b_k"])
    v = nx.dense(spectral, p["attn.W_v"], p["attn.b_v"])
    d_k = k.shape[-1]
    logits = nx.scaled(nx.matmul(q, nx.transpose_last(k)), 1.0 / math.sqrt(d_k))
    weights = nx.softmax_lastdim(logits)
    out = nx.matmul(weights, v)
    return q, k, v, weights, out


def fuse(graph_out: Tensor, attn_out: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    if graph_out.shape[0] != attn_out.shape[0]:
        raise DimensionError(f"batch mismatch: {graph_out.shape} vs {attn_out.shape}")
    g = nx.dense(graph_out, p["fuse.graph.W"], p["fuse.graph.b"])
    a = nx.dense(attn_out, p["fuse.attn.W"], p["fuse.attn.b"])
    return nx.concat([g, a], axis=1)


def gru_ssm(seq: Tensor, p: Mapping[str, Tensor], h0: Tensor | None = None):
    """Run the gated recurrence over the token axis; returns (h_final, all states)."""
    if seq.ndim != 3 or seq.shape[1] < 1:
        raise ArgumentError(f"GRU needs a non-empty batch x T x D sequence, got {seq.shape}")
    batch, steps, _ = seq.shape
    D = p["gru.U_z"].shape[0]
    # input-side projections for all timesteps at once
    xz = nx.dense(seq, p["gru.W_z"], p["gru.b_z"])
    xr = nx.dense(seq, p["gru.W_r"], p["gru.b_r"])
    xh = nx.dense(seq, p["gru.W_h"], p["gru.b_h"])
    h = h0 if h0 is not None else Tensor(np.zeros((batch, D), dtype=seq.dtype))
    states = []
    for t in range(steps):
        z = nx.sigmoid(xz[:, t, :] + nx.dense(h, p["gru.U_z"]))
        r = nx.sigmoid(xr[:, t, :] + nx.dense(h, p["gru.U_r"]))
        cand = nx.tanh(xh[:, t, :] + nx.dense(r * h, p["gru.U_h"]))
        h = (1.0 - z) * h + z * cand
        states.append(nx.reshape(h, (batch, 1, D)))
    return h, nx.concat(states, axis=1)


def classify(h: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return nx.dense(h, p["classifier.W"])


def forward(patches, params: Mapping, config: ModelConfig, indices: np.ndarray | None = None):
    """Full network; returns (logits, ForwardTrace)."""
    p = _tensors(params)
    _check_params(p, config)
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=p["classifier.W"].dtype))
    spatial, spectral, tokens = tokenize(x, p, config)
    scores, idx, selected = prioritize(tokens, p, config.n_selected, indices)
    adjacency, agg, graph_out = graph_propagate(selected, p)
    q, k, v, weights, attn_out = cross_attention(spatial, spectral, p)
    fused = fuse(graph_out, attn_out, p)
    h, hidden = gru_ssm(fused, p)
    logits = classify(h, p)
    trace = ForwardTrace(
        spatial, spectral, tokens, scores, idx, selected, adjacency, agg, graph_out,
        q, k, v, weights, attn_out, fused, hidden, logits,
    )
    return logits, trace


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"GMCK"
CKPT_VERSION = 1
_U32 = struct.Struct("<I")


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, np.ndarray], config: ModelConfig,
                    meta: Mapping | None = None) -> None:
    """Write params (as float32) plus config/metadata JSON; byte-stable for equal inputs."""
    header = json.dumps({"model": config.to_dict(), "meta": dict(meta or {})}, sort_keys=True).encode()
    chunks = [CKPT_MAGIC, _U32.pack(CKPT_VERSION), _U32.pack(len(header)), header, _U32.pack(len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        enc = name.encode()
        chunks += [_U32.pack(len(enc)), enc, _U32.pack(arr.ndim)]
        chunks += [_U32.pack(d) for d in arr.shape]
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, ModelConfig, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = raw[pos : pos + n]
        pos += n
        return out

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if (version := u32()) != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(take(u32()).decode())
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad checkpoint header: {exc}") from exc
    params = ModelParams()
    for _ in range(u32()):
        name = take(u32()).decode()
        shape = tuple(u32() for _ in range(u32()))
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    expected = param_shapes(config)
    if set(params) != set(expected) or any(params[k].shape != s for k, s in expected.items()):
        raise CheckpointError(f"{path}: tensors do not match the stored model config")
    return params, config, header.get("meta", {})
