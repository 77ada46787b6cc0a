"""Closed-form parameter, FLOP and training-memory estimates.

FLOPs count a multiply-add as 2 operations and keep only the matmul-like
leading terms; elementwise activations and gating are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from graphmamba.model import ModelConfig, trace_shapes
from graphmamba.training import TrainConfig

BYTES_PER_VALUE = 4  # float32
STAGES = ("tokenization", "graph", "attention", "fusion", "ssm")


def count_params(config: ModelConfig) -> int:
    F, D = config.feature_dim, config.model_dim
    Bb, Ns, C = config.bands, config.n_spectral, config.n_classes
    spatial = 9 * Bb * F + F + F * F + F
    spectral = Bb * Ns * F + Ns * F + F * F + F
    score = F + 1
    graph = F * F + F
    attention = 2 * (F * D + D) + F * F + F
    fusion = 2 * (F * D + D)
    gru = 3 * (2 * D * D + D)
    classifier = D * C
    return spatial + spectral + score + graph + attention + fusion + gru + classifier


def estimate_flops(config: ModelConfig, batch: int = 1) -> dict[str, dict[str, int]]:
    """Per-stage, per-term operation counts for ``batch`` samples."""
    F, D, Bb = config.feature_dim, config.model_dim, config.bands
    P = config.patch_size**2  # conv output positions
    Nsp, Nspc, T, N = config.n_spatial, config.n_spectral, config.n_tokens, config.n_selected
    L = config.seq_len
    terms = {
        "tokenization": {
            "spatial_conv": 2 * P * 9 * Bb * F,
            "spatial_proj": 2 * Nsp * F * F,
            "spectral_conv": 2 * P * Bb * Nspc * F,
            "spectral_proj": 2 * Nspc * F * F,
        },
        "graph": {
            "scores": 2 * T * F,
            "adjacency": 2 * N * N * F,
            "aggregation": 2 * N * N * F,
            "projection": 2 * N * F * F,
        },
        "attention": {
            "projections": 2 * Nsp * F * D + 2 * Nspc * F * D + 2 * Nspc * F * F,
            "weights": 2 * Nsp * Nspc * D,
            "aggregation": 2 * Nsp * Nspc * F,
        },
        "fusion": {
            "graph_proj": 2 * N * F * D,
            "attn_proj": 2 * Nsp * F * D,
        },
        "ssm": {
            "input_gates": 3 * 2 * L * D * D,
            "recurrent_gates": 3 * 2 * L * D * D,
            "classifier": 2 * D * config.n_classes,
        },
    }
    return {stage: {k: v * batch for k, v in t.items()} for stage, t in terms.items()}


def sort_comparisons(config: ModelConfig, batch: int = 1) -> int:
    """Comparison count of the top-N selection sort, T log2 T per sample."""
    T = config.n_tokens
    return int(math.ceil(batch * T * math.log2(T))) if T > 1 else 0


@dataclass(frozen=True)
class ResourceReport:
    n_params: int
    batch: int
    param_bytes: int
    activation_bytes: int
    gradient_bytes: int
    optimizer_bytes: int
    total_bytes: int
    flops: dict[str, dict[str, int]] = field(default_factory=dict)
    sort_comparisons: int = 0

    @property
    def stage_flops(self) -> dict[str, int]:
        return {stage: sum(t.values()) for stage, t in self.flops.items()}

    @property
    def total_flops(self) -> int:
        return sum(self.stage_flops.values())

    def to_text(self) -> str:
        lines = [
            "# flops count one multiply-add as 2 operations; memory assumes float32",
            f"params = {self.n_params}",
            f"batch = {self.batch}",
            f"param_bytes = {self.param_bytes}",
            f"activation_bytes = {self.activation_bytes}",
            f"gradient_bytes = {self.gradient_bytes}",
            f"optimizer_bytes = {self.optimizer_bytes}",
            f"total_bytes = {self.total_bytes}",
        ]
        for stage, total in self.stage_flops.items():
            lines.append(f"flops.{stage} = {total}")
            lines += [f"flops.{stage}.{k} = {v}" for k, v in self.flops[stage].items()]
        lines.append(f"flops.total = {self.total_flops}")
        lines.append(f"sort_comparisons = {self.sort_comparisons}")
        return "\n".join(lines) + "\n"


def activation_elements(config: ModelConfig, batch: int) -> int:
    """Elements across every float-valued stage output of a forward pass."""
    shapes = trace_shapes(config, batch)
    shapes.pop("indices")  # integer bookkeeping, not an activation
    return int(sum(np.prod(s) for s in shapes.values()))


def memory_breakdown(n_params: int, n_activations: int) -> dict[str, int]:
    """Byte budget: float32 params, gradients sized like activations, two Adam moments."""
    param_bytes = BYTES_PER_VALUE * n_params
    activation_bytes = BYTES_PER_VALUE * n_activations
    parts = {
        "param_bytes": param_bytes,
        "activation_bytes": activation_bytes,
        "gradient_bytes": activation_bytes,
        "optimizer_bytes": 2 * param_bytes,
    }
    parts["total_bytes"] = sum(parts.values())
    return parts


def estimate_memory(config: ModelConfig, train_config: TrainConfig = TrainConfig()) -> ResourceReport:
    batch = train_config.batch_size
    n = count_params(config)
    return ResourceReport(
        n_params=n,
        batch=batch,
        **memory_breakdown(n, activation_elements(config, batch)),
        flops=estimate_flops(config, batch),
        sort_comparisons=sort_comparisons(config, batch),
    )
