"""Self-contained multilayer perceptron for exercising the quantizers.

Provides everything the compression pipeline needs from a "real" model at
desk scale: deterministic Adam training on synthetic or CSV data, analytic
gradients, two per-parameter curvature backends (exact second derivatives
by central differences of the gradient, and a fast one-pass Gauss-Newton
style approximation), the free curvature proxy from Adam's second moments,
magnitude pruning, shared-center fine-tuning, and accuracy evaluation of
both plain and quantized parameter vectors.

Parameters live in one flat vector; layer ``l`` contributes spans
``layer{l}.weight`` (input x output, row-major) and ``layer{l}.bias``.
All math runs in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import (
    CURVATURE_FLOOR,
    CurvatureDiag,
    CurvatureSource,
    DivergenceError,
    ParamSet,
    PruneMask,
    Span,
)
from .quantizers import Codebook, scatter_dequantize

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "none")
LOSSES = ("softmax_cross_entropy", "mean_square_error")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of the reference net: layer widths, nonlinearity, loss."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    loss: str = "softmax_cross_entropy"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError("need at least input and output widths, all positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def param_count(self) -> int:
        return sum(
            din * dout + dout
            for din, dout in zip(self.layer_widths, self.layer_widths[1:])
        )

    def spans(self) -> tuple[Span, ...]:
        spans = []
        offset = 0
        for l, (din, dout) in enumerate(
            zip(self.layer_widths, self.layer_widths[1:])
        ):
            spans.append(Span(f"layer{l}.weight", offset, din * dout))
            offset += din * dout
            spans.append(Span(f"layer{l}.bias", offset, dout))
            offset += dout
        return tuple(spans)


def _unpack(spec: MlpSpec, w: np.ndarray):
    """Views of the flat vector as (weight matrix, bias) pairs."""
    layers = []
    offset = 0
    for din, dout in zip(spec.layer_widths, spec.layer_widths[1:]):
        W = w[offset : offset + din * dout].reshape(din, dout)
        offset += din * dout
        b = w[offset : offset + dout]
        offset += dout
        layers.append((W, b))
    if offset != w.size:
        raise ValueError(f"parameter vector has {w.size} entries, spec needs {offset}")
    return layers


def init_params(spec: MlpSpec, seed: int = 0) -> ParamSet:
    """He/Xavier-style gaussian init, deterministic per seed."""
    rng = np.random.default_rng(seed)
    chunks = []
    for din, dout in zip(spec.layer_widths, spec.layer_widths[1:]):
        scale = np.sqrt(2.0 / din) if spec.activation == "relu" else np.sqrt(1.0 / din)
        chunks.append(rng.normal(0.0, scale, size=din * dout))
        chunks.append(np.zeros(dout))
    return ParamSet(np.concatenate(chunks), spec.spans())


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Inputs plus labels, partitioned into named splits by index.

    ``labels`` holds class indices (classification) or a target matrix
    (regression under the squared-error loss). The ``hessian`` split falls
    back to ``train`` when absent, matching how curvature is normally
    estimated from training data.
    """

    inputs: np.ndarray
    labels: np.ndarray
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("inputs must be a non-empty samples x features matrix")
        y = np.asarray(self.labels)
        if np.issubdtype(y.dtype, np.floating) and y.ndim == 2:
            y = np.ascontiguousarray(y, dtype=np.float64)
        else:
            y = np.ascontiguousarray(y, dtype=np.int64)
            if y.ndim != 1:
                raise ValueError("class labels must be a flat vector")
        if y.shape[0] != x.shape[0]:
            raise ValueError("inputs and labels disagree on sample count")
        if not self.splits:
            raise ValueError("at least one split is required")
        for name, idx in self.splits.items():
            idx = np.asarray(idx)
            if idx.size == 0:
                raise ValueError(f"split {name!r} is empty")
            if idx.min() < 0 or idx.max() >= x.shape[0]:
                raise ValueError(f"split {name!r} indexes out of range")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(
            self,
            "splits",
            {k: np.ascontiguousarray(v, dtype=np.int64) for k, v in self.splits.items()},
        )

    @property
    def n_features(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def n_classes(self) -> int:
        if self.labels.ndim == 2:
            return int(self.labels.shape[1])
        return int(self.labels.max()) + 1

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "hessian" and "hessian" not in self.splits:
            name = "train"
        if name not in self.splits:
            raise ValueError(f"no split named {name!r}")
        idx = self.splits[name]
        return self.inputs[idx], self.labels[idx]


def make_blobs(
    n_samples: int,
    n_classes: int,
    n_features: int,
    seed: int = 0,
    center_spread: float = 3.0,
    noise: float = 1.0,
    input_scale=1.0,
    eval_frac: float = 0.3,
) -> Dataset:
    """Gaussian-blob classification data, deterministic per seed.

    Class centers are drawn uniformly in a box of half-width
    ``center_spread`` (before scaling); samples add isotropic noise.
    ``input_scale`` (a scalar, or one value per feature) multiplies the
    inputs, which spreads the magnitudes and curvatures of the first-layer
    weights that consume them.
    """
    if n_samples < n_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-center_spread, center_spread, size=(n_classes, n_features))
    labels = rng.integers(0, n_classes, size=n_samples)
    inputs = centers[labels] + rng.normal(0.0, noise, size=(n_samples, n_features))
    inputs *= np.broadcast_to(np.asarray(input_scale, dtype=np.float64), (n_features,))

    order = rng.permutation(n_samples)
    n_eval = max(1, int(round(eval_frac * n_samples)))
    splits = {"train": np.sort(order[n_eval:]), "eval": np.sort(order[:n_eval])}
    return Dataset(inputs, labels, splits)


def load_csv(path, eval_frac: float = 0.3, seed: int = 0) -> Dataset:
    """Load a dataset from CSV: label in the first column, features after."""
    raw = np.loadtxt(Path(path), delimiter=",", dtype=np.float64, ndmin=2)
    if raw.shape[1] < 2:
        raise ValueError("CSV needs a label column plus at least one feature")
    labels_f = raw[:, 0]
    inputs = raw[:, 1:]
    if np.all(labels_f == np.round(labels_f)) and labels_f.min() >= 0:
        labels = labels_f.astype(np.int64)
    else:
        raise ValueError("labels must be nonnegative integers in the first column")
    rng = np.random.default_rng(seed)
    order = rng.permutation(raw.shape[0])
    n_eval = max(1, int(round(eval_frac * raw.shape[0])))
    splits = {"train": np.sort(order[n_eval:]), "eval": np.sort(order[:n_eval])}
    return Dataset(inputs, labels, splits)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _params64(spec: MlpSpec, params) -> np.ndarray:
    if isinstance(params, ParamSet):
        w = params.as_f64()
    else:
        w = np.ascontiguousarray(params, dtype=np.float64)
    if w.size != spec.param_count():
        raise ValueError(
            f"parameter vector has {w.size} entries, spec needs {spec.param_count()}"
        )
    return w


def _act(spec: MlpSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    if spec.activation == "tanh":
        return np.tanh(z)
    return z


def _act_grad(spec: MlpSpec, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if spec.activation == "relu":
        return (z > 0).astype(np.float64)
    if spec.activation == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _forward(spec: MlpSpec, w: np.ndarray, x: np.ndarray):
    layers = _unpack(spec, w)
    acts = [x]
    pre = []
    for l, (W, b) in enumerate(layers):
        z = acts[-1] @ W + b
        pre.append(z)
        acts.append(_act(spec, z) if l < len(layers) - 1 else z)
    return layers, pre, acts


def _targets(spec: MlpSpec, labels: np.ndarray, width: int) -> np.ndarray:
    if labels.ndim == 2:
        return labels
    onehot = np.zeros((labels.size, width))
    onehot[np.arange(labels.size), labels] = 1.0
    return onehot


def _loss_and_delta(spec: MlpSpec, logits: np.ndarray, labels: np.ndarray):
    """Mean loss over the batch and its gradient w.r.t. the output layer."""
    batch = logits.shape[0]
    if spec.loss == "softmax_cross_entropy":
        if labels.ndim != 1:
            raise ValueError("cross entropy needs integer class labels")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        loss = float(np.mean(logz - shifted[np.arange(batch), labels]))
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        delta = probs.copy()
        delta[np.arange(batch), labels] -= 1.0
        return loss, delta / batch
    targets = _targets(spec, labels, logits.shape[1])
    resid = logits - targets
    loss = float(0.5 * np.sum(resid * resid) / batch)
    return loss, resid / batch


def forward_loss(spec: MlpSpec, params, inputs, labels) -> tuple[float, np.ndarray]:
    """Mean batch loss and the gradient for every parameter, flattened.

    Cross entropy is in nats; the squared-error loss is
    ``0.5 * ||output - target||^2`` averaged over the batch.
    """
    w = _params64(spec, params)
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    layers, pre, acts = _forward(spec, w, x)
    loss, delta = _loss_and_delta(spec, acts[-1], np.asarray(labels))

    grad = np.zeros_like(w)
    glayers = _unpack(spec, grad)
    for l in range(len(layers) - 1, -1, -1):
        gW, gb = glayers[l]
        gW += acts[l].T @ delta
        gb += delta.sum(axis=0)
        if l > 0:
            delta = (delta @ layers[l][0].T) * _act_grad(spec, pre[l - 1], acts[l])
    return loss, grad


def eval_accuracy(spec: MlpSpec, params, inputs, labels) -> float:
    """Fraction of samples whose argmax output matches the class label.

    ``params`` may be a flat vector, a ParamSet, or an
    ``(assignment, codebook)`` pair, which is dequantized first.
    """
    if isinstance(params, tuple):
        assignment, codebook = params
        params = scatter_dequantize(len(assignment), assignment, codebook)
    w = _params64(spec, params)
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError("accuracy needs integer class labels")
    if y.size == 0:
        raise ValueError("empty evaluation split")
    _, _, acts = _forward(spec, w, x)
    return float(np.mean(np.argmax(acts[-1], axis=1) == y))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 64
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass(frozen=True)
class AdamState:
    """Optimizer moments captured at the end of training."""

    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float
    beta1: float
    beta2: float
    eps: float

    def __post_init__(self):
        v = np.ascontiguousarray(self.v, dtype=np.float64)
        if np.any(v < 0):
            raise ValueError("second moments must be nonnegative")
        object.__setattr__(self, "v", v)
        object.__setattr__(
            self, "m", np.ascontiguousarray(self.m, dtype=np.float64)
        )


@dataclass(frozen=True)
class TrainedModel:
    params: ParamSet
    final_loss: float
    eval_accuracy: float
    adam: AdamState

    def __post_init__(self):
        if not 0.0 <= self.eval_accuracy <= 1.0:
            raise ValueError("accuracy out of range")


def train_adam(spec: MlpSpec, ds: Dataset, cfg: TrainConfig) -> TrainedModel:
    """Mini-batch Adam, bit-reproducible for a fixed config and seed.

    Batches are drawn by reshuffling the training split every epoch with the
    config's RNG. Aborts with :class:`DivergenceError` if the loss goes
    non-finite. With ``steps == 0`` the initial parameters come back
    untouched.
    """
    if ds.n_features != spec.layer_widths[0]:
        raise ValueError("dataset feature width disagrees with the spec")
    w = init_params(spec, cfg.seed).as_f64()
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    rng = np.random.default_rng(cfg.seed + 1)

    train_x, train_y = ds.split("train")
    order = rng.permutation(train_x.shape[0])
    cursor = 0
    for t in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > order.size:
            order = rng.permutation(train_x.shape[0])
            cursor = 0
        batch = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size

        loss, grad = forward_loss(spec, w, train_x[batch], train_y[batch])
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite at step {t}")
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        mhat = m / (1.0 - cfg.beta1**t)
        vhat = v / (1.0 - cfg.beta2**t)
        w -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)

    final_loss, _ = forward_loss(spec, w, train_x, train_y)
    params = ParamSet(w, spec.spans())
    eval_x, eval_y = ds.split("eval")
    acc = eval_accuracy(spec, params, eval_x, eval_y)
    state = AdamState(cfg.steps, m, v, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return TrainedModel(params, final_loss, acc, state)


# ---------------------------------------------------------------------------
# Curvature backends
# ---------------------------------------------------------------------------


def hessian_diag_exact(
    spec: MlpSpec, params, inputs, labels, step: float = 1e-4
) -> CurvatureDiag:
    """Second derivative of the mean loss w.r.t. each parameter.

    Central finite differences of the analytic gradient, one coordinate at
    a time (two gradient passes per parameter), with a relative step. Raw
    negative values, possible away from a minimum, are clamped to the
    curvature floor; the clamp count is logged.
    """
    w = _params64(spec, params).copy()
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    y = np.asarray(labels)
    h = np.empty_like(w)
    for i in range(w.size):
        delta = step * (1.0 + abs(w[i]))
        orig = w[i]
        w[i] = orig + delta
        gp = forward_loss(spec, w, x, y)[1][i]
        w[i] = orig - delta
        gm = forward_loss(spec, w, x, y)[1][i]
        w[i] = orig
        h[i] = (gp - gm) / (2.0 * delta)
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite second derivative")
    clamped = int(np.count_nonzero(h < CURVATURE_FLOOR))
    if clamped:
        log.warning("clamped %d non-positive curvature entries", clamped)
    return CurvatureDiag(np.maximum(h, CURVATURE_FLOOR), CurvatureSource.EXACT_HESSIAN)


def hessian_diag_gn(spec: MlpSpec, params, inputs, labels) -> CurvatureDiag:
    """Fast nonnegative curvature via one curvature-backpropagation pass.

    Propagates the diagonal second derivative of the loss backward through
    squared weights and squared activation slopes, dropping the term with
    the activation's own second derivative. Costs the same order as a
    gradient pass and is exact for a single linear layer under the
    squared-error loss.
    """
    w = _params64(spec, params)
    x = np.ascontiguousarray(inputs, dtype=np.float64)
    y = np.asarray(labels)
    layers, pre, acts = _forward(spec, w, x)
    batch = x.shape[0]

    logits = acts[-1]
    if spec.loss == "softmax_cross_entropy":
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        s = probs * (1.0 - probs) / batch
    else:
        s = np.full_like(logits, 1.0 / batch)

    h = np.zeros_like(w)
    hlayers = _unpack(spec, h)
    for l in range(len(layers) - 1, -1, -1):
        hW, hb = hlayers[l]
        hW += (acts[l] * acts[l]).T @ s
        hb += s.sum(axis=0)
        if l > 0:
            W = layers[l][0]
            s = (s @ (W * W).T) * _act_grad(spec, pre[l - 1], acts[l]) ** 2
    return CurvatureDiag(np.maximum(h, CURVATURE_FLOOR), CurvatureSource.GAUSS_NEWTON)


def adam_curvature(state: AdamState, eps_alt: float = 0.0) -> CurvatureDiag:
    """Curvature proxy from Adam: sqrt of the bias-corrected second moment.

    Free at the end of training, no extra passes over the data.
    """
    if state.step > 0:
        vhat = state.v / (1.0 - state.beta2**state.step)
    else:
        vhat = np.zeros_like(state.v)
    return CurvatureDiag(np.sqrt(vhat) + eps_alt, CurvatureSource.ADAM_SQRT_MOMENT)


def identity_curvature(n: int) -> CurvatureDiag:
    """Unit weights; curvature-weighted methods degrade to plain ones."""
    return CurvatureDiag(np.ones(n), CurvatureSource.IDENTITY)


# ---------------------------------------------------------------------------
# Pruning and fine-tuning
# ---------------------------------------------------------------------------


def prune_magnitude(ps: ParamSet, fraction: float) -> PruneMask:
    """Mark the ``floor(fraction * n)`` smallest-magnitude parameters pruned.

    Magnitude ties are broken by pruning the lower index first.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    n = ps.n
    n_prune = int(fraction * n)
    order = np.argsort(np.abs(ps.as_f64()), kind="stable")
    kept = np.ones(n, dtype=bool)
    kept[order[:n_prune]] = False
    return PruneMask(kept)


@dataclass(frozen=True)
class FineTuneConfig:
    steps: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0


def fine_tune_centers(
    spec: MlpSpec,
    ps: ParamSet,
    assignment,
    codebook: Codebook,
    ds: Dataset,
    cfg: FineTuneConfig,
    positions=None,
) -> tuple[Codebook, float]:
    """Plain SGD on the shared cluster centers, assignments frozen.

    Each center's gradient is the sum of the gradients of its member
    parameters (the chain rule for a shared value). Pruned parameters stay
    exactly zero: ``positions`` maps assignment entries to their slots in
    the full vector. Returns the updated codebook and the evaluation
    accuracy of the fine-tuned model.
    """
    a = np.ascontiguousarray(assignment, dtype=np.int64)
    if positions is None:
        if a.size != ps.n:
            raise ValueError("assignment length disagrees with the parameter set")
        pos = np.arange(ps.n, dtype=np.int64)
    else:
        pos = np.ascontiguousarray(positions, dtype=np.int64)
        if pos.size != a.size:
            raise ValueError("positions length disagrees with the assignment")
    if codebook.n_params != a.size:
        raise ValueError("codebook counts disagree with the assignment")

    centers = codebook.centers.copy()
    k = codebook.k
    rng = np.random.default_rng(cfg.seed)
    train_x, train_y = ds.split("train")
    order = rng.permutation(train_x.shape[0])
    cursor = 0
    for t in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > order.size:
            order = rng.permutation(train_x.shape[0])
            cursor = 0
        batch = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size

        w_full = np.zeros(ps.n)
        w_full[pos] = centers[a]
        loss, grad = forward_loss(spec, w_full, train_x[batch], train_y[batch])
        if not np.isfinite(loss):
            raise DivergenceError(f"fine-tuning loss became non-finite at step {t}")
        center_grad = np.bincount(a, weights=grad[pos], minlength=k)
        centers -= cfg.lr * center_grad

    tuned = Codebook(centers, codebook.counts)
    w_full = np.zeros(ps.n)
    w_full[pos] = tuned.centers[a]
    eval_x, eval_y = ds.split("eval")
    acc = eval_accuracy(spec, w_full, eval_x, eval_y)
    return tuned, acc
