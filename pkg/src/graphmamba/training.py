"""Loss, the Adam training loop, accuracy metrics and full-scene prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from graphmamba import numerics as nx
from graphmamba.data import HsiCube, PatchSet, SplitSpec, extract_patches, normalize_bands
from graphmamba.errors import ArgumentError, NonFiniteError
from graphmamba.model import ModelConfig, ModelParams, forward, init_params
from graphmamba.numerics import AdamState, Tensor, adam_step

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 56
    learning_rate: float = 0.001
    l2: float = 0.01
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ArgumentError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.l2 < 0:
            raise ArgumentError(f"l2 must be >= 0, got {self.l2}")
        if self.precision not in PRECISIONS:
            raise ArgumentError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


def loss(logits: Tensor, labels, classifier_w: Tensor, l2: float) -> Tensor:
    """Mean softmax cross-entropy plus ``l2 * ||classifier_w||^2``.

    ``labels`` are zero-based class indices.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n_classes = logits.shape[-1]
    if labels.shape != logits.shape[:1]:
        raise ArgumentError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ArgumentError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    logp = nx.log_softmax_lastdim(logits)
    picked = logp[np.arange(len(labels)), labels]
    ce = -nx.mean(picked)
    return ce + nx.scaled(nx.tsum(classifier_w * classifier_w), l2)


@dataclass
class History:
    epochs: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    oa: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["epoch,loss,oa"]
        for e, l, a in zip(self.epochs, self.loss, self.oa):
            rows.append(f"{e},{l:.9g},{'' if np.isnan(a) else f'{a:.9g}'}")
        return "\n".join(rows) + "\n"


def _batch_loss_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray, config: ModelConfig, l2: float):
    wrt = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with nx.Tape() as tape:
        logits, _ = forward(x, wrt, config)
        value = loss(logits, y, wrt["classifier.W"], l2)
    return value.item(), tape.gradient(value, wrt)


def train(
    patches: np.ndarray,
    labels: np.ndarray,
    config: ModelConfig,
    train_config: TrainConfig = TrainConfig(),
    params: ModelParams | None = None,
    eval_set: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[ModelParams, History]:
    """Fit the network on ``patches`` with zero-based ``labels``.

    The train set is shuffled with ``seed + epoch`` each epoch and walked in
    mini-batches (the last partial batch is kept).  ``eval_set`` adds a
    held-out OA column to the history.
    """
    dtype = train_config.dtype
    patches = np.asarray(patches, dtype=dtype)
    labels = np.asarray(labels, dtype=np.intp)
    if len(patches) == 0:
        raise ArgumentError("empty training set")
    if len(np.unique(labels)) < 2:
        raise ArgumentError("training needs at least 2 classes")
    if params is None:
        params = init_params(config, seed=train_config.seed, dtype=dtype)
    else:
        params = params.astype(dtype)
    state = AdamState(lr=train_config.learning_rate)
    history = History()
    n = len(patches)
    bs = min(train_config.batch_size, n)
    for epoch in range(1, train_config.epochs + 1):
        order = np.random.default_rng(train_config.seed + epoch).permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            try:
                value, grads = _batch_loss_and_grads(params, patches[idx], labels[idx], config, train_config.l2)
                if not np.isfinite(value):
                    raise NonFiniteError("loss is not finite")
                adam_step(params, grads, state)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, step {step}: {exc}") from exc
            total += value * len(idx)
        oa = float("nan")
        if eval_set is not None:
            pred = predict_labels(params, eval_set[0], config)
            oa = float(np.mean(pred == np.asarray(eval_set[1])))
        history.epochs.append(epoch)
        history.loss.append(total / n)
        history.oa.append(oa)
        log.debug("epoch %d loss %.6f oa %.4f", epoch, total / n, oa)
    return params, history


def predict_logits(params: ModelParams, patches: np.ndarray, config: ModelConfig, batch_size: int = 256) -> np.ndarray:
    dtype = next(iter(params.values())).dtype
    patches = np.asarray(patches, dtype=dtype)
    out = [forward(patches[i : i + batch_size], params, config)[0].data for i in range(0, len(patches), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, config.n_classes), dtype=dtype)


def predict_labels(params: ModelParams, patches: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Zero-based argmax class per patch."""
    return predict_logits(params, patches, config).argmax(axis=-1)


@dataclass(frozen=True)
class Metrics:
    confusion: np.ndarray  # rows = truth, cols = prediction

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def per_class(self) -> np.ndarray:
        """Recall per class; NaN for classes with no truth samples."""
        support = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.confusion) / np.maximum(support, 1), np.nan)

    @property
    def oa(self) -> float:
        return float(np.trace(self.confusion) / self.total)

    @property
    def aa(self) -> float:
        return float(np.nanmean(self.per_class))

    @property
    def kappa(self) -> float:
        n = self.total
        p_o = np.trace(self.confusion) / n
        p_e = float(self.confusion.sum(axis=0) @ self.confusion.sum(axis=1)) / (n * n)
        if p_e == 1.0:
            # single-class degenerate case: agreement is perfect or undefined
            return 1.0 if p_o == 1.0 else 0.0
        return float((p_o - p_e) / (1.0 - p_e))

    def to_text(self) -> str:
        lines = [
            f"oa = {self.oa:.6f}",
            f"aa = {self.aa:.6f}",
            f"kappa = {self.kappa:.6f}",
            f"samples = {self.total}",
            f"classes = {len(self.confusion)}",
        ]
        for c, acc in enumerate(self.per_class, start=1):
            lines.append(f"class_{c}_accuracy = {'nan' if np.isnan(acc) else f'{acc:.6f}'}")
        lines.append("[confusion]")
        lines += [" ".join(str(int(v)) for v in row) for row in self.confusion]
        return "\n".join(lines) + "\n"


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.intp)
    pred = np.asarray(pred, dtype=np.intp)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def evaluate(params: ModelParams, patchset: PatchSet, split: SplitSpec | np.ndarray, config: ModelConfig) -> Metrics:
    """Metrics on the test indices of ``split`` (or an explicit index array)."""
    idx = split.test if isinstance(split, SplitSpec) else np.asarray(split)
    if len(idx) == 0:
        raise ArgumentError("evaluation split is empty")
    pred = predict_labels(params, patchset.patches[idx], config)
    return Metrics(confusion_matrix(patchset.labels[idx] - 1, pred, config.n_classes))


def predict_map(
    params: ModelParams, cube: HsiCube, config: ModelConfig, normalize: bool = True
) -> np.ndarray:
    """H x W map of 1-based classes; border pixels without a full patch are 0."""
    values = normalize_bands(cube.values) if normalize else cube.values
    ps = extract_patches(HsiCube(values), config.patch_size, 1)
    out = np.zeros((cube.height, cube.width), dtype=np.int32)
    pred = predict_labels(params, ps.patches, config) + 1
    out[ps.centers[:, 0], ps.centers[:, 1]] = pred
    return out
