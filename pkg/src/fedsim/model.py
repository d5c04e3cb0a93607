"""Differentiable classifiers with analytic gradients and local SGD.

Two model families share one flat-parameter representation: multinomial
logistic regression and a one-hidden-layer ReLU MLP. Losses are mean
cross-entropy, optionally augmented with a proximal L2 pull toward an
anchor vector. The local-training loop mirrors the per-round client
procedure: reshuffle each epoch, split into batches, step with SGD
momentum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Layout, ParamVector, Rng, first_bad_segment, make_layout
from .data import Dataset
from .errors import IncompatibleShape, InvalidArgument, NumericError

MODEL_KINDS = ("logreg", "mlp")
MASKS = ("all", "global-only", "local-only")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    n_features: int
    n_classes: int
    hidden: int | None = None
    init_scale: float = 0.1
    layer_split: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise InvalidArgument(f"unknown model kind {self.kind!r}")
        if self.n_features < 1 or self.n_classes < 2:
            raise InvalidArgument("need n_features >= 1 and n_classes >= 2")
        if self.kind == "mlp" and (self.hidden is None or self.hidden < 1):
            raise InvalidArgument("mlp requires hidden >= 1")
        if self.init_scale < 0.0:
            raise InvalidArgument("init_scale must be >= 0")
        if not 0 <= self.layer_split < len(self.segment_sizes()):
            raise InvalidArgument("layer_split must be < segment count")

    def segment_sizes(self) -> list[tuple[str, int]]:
        f, k = self.n_features, self.n_classes
        if self.kind == "logreg":
            return [("w", f * k), ("b", k)]
        h = self.hidden
        return [("w1", f * h), ("b1", h), ("w2", h * k), ("b2", k)]

    def layout(self) -> Layout:
        return make_layout(self.segment_sizes())

    def n_params(self) -> int:
        layout = self.layout()
        return layout[-1].offset + layout[-1].length

    def local_boundary(self) -> int:
        """Offset where the trailing `layer_split` local segments begin."""
        if self.layer_split == 0:
            return self.n_params()
        layout = self.layout()
        return layout[len(layout) - self.layer_split].offset


@dataclass(frozen=True)
class OptState:
    """SGD-with-momentum state; velocity layout matches the model."""

    lr: float
    momentum: float
    velocity: ParamVector

    def __post_init__(self):
        if self.lr <= 0.0:
            raise InvalidArgument("learning rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgument("momentum must be in [0, 1)")

    @staticmethod
    def initial(lr: float, momentum: float, spec: ModelSpec) -> "OptState":
        return OptState(lr, momentum, ParamVector(np.zeros(spec.n_params()), spec.layout()))


@dataclass(frozen=True)
class LocalTrainSpec:
    epochs: int
    batch_size: int
    prox_mu: float = 0.0
    mask: str = "all"

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidArgument("epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.prox_mu < 0.0:
            raise InvalidArgument("prox_mu must be >= 0")
        if self.mask not in MASKS:
            raise InvalidArgument(f"unknown mask {self.mask!r}")


def init_params(spec: ModelSpec, rng: Rng) -> ParamVector:
    """Uniform(-init_scale, init_scale) weights, zero biases."""
    layout = spec.layout()
    values = np.zeros(spec.n_params())
    for seg in layout:
        if seg.name.startswith("w"):
            u = rng.uniform(seg.length)
            values[seg.offset : seg.offset + seg.length] = (
                (u * 2.0 - 1.0) * spec.init_scale
            )
    return ParamVector(values, layout)


def _unpack(spec: ModelSpec, theta: np.ndarray) -> list[np.ndarray]:
    out = []
    offset = 0
    f, k = spec.n_features, spec.n_classes
    if spec.kind == "logreg":
        shapes = [(f, k), (k,)]
    else:
        h = spec.hidden
        shapes = [(f, h), (h,), (h, k), (k,)]
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(theta[offset : offset + size].reshape(shape))
        offset += size
    return out


def _logits(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    if spec.kind == "logreg":
        w, b = _unpack(spec, theta)
        return x @ w + b
    w1, b1, w2, b2 = _unpack(spec, theta)
    hidden = np.maximum(x @ w1 + b1, 0.0)
    return hidden @ w2 + b2


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _loss_grad_arrays(
    spec: ModelSpec,
    theta: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    anchor: np.ndarray | None,
    prox_mu: float,
) -> tuple[float, np.ndarray]:
    # non-finite values are detected explicitly below; silence numpy's
    # overflow warnings so the NumericError is the single signal
    with np.errstate(all="ignore"):
        return _loss_grad_unchecked(spec, theta, x, y, anchor, prox_mu)


def _loss_grad_unchecked(spec, theta, x, y, anchor, prox_mu):
    n = x.shape[0]
    grad = np.empty_like(theta)
    if spec.kind == "logreg":
        w, b = _unpack(spec, theta)
        z = x @ w + b
        probs = _softmax(z)
        dz = probs.copy()
        dz[np.arange(n), y] -= 1.0
        dz /= n
        gw, gb = _unpack(spec, grad)
        gw[:] = x.T @ dz
        gb[:] = dz.sum(axis=0)
    else:
        w1, b1, w2, b2 = _unpack(spec, theta)
        pre = x @ w1 + b1
        hidden = np.maximum(pre, 0.0)
        z = hidden @ w2 + b2
        probs = _softmax(z)
        dz = probs.copy()
        dz[np.arange(n), y] -= 1.0
        dz /= n
        dh = (dz @ w2.T) * (pre > 0.0)
        gw1, gb1, gw2, gb2 = _unpack(spec, grad)
        gw1[:] = x.T @ dh
        gb1[:] = dh.sum(axis=0)
        gw2[:] = hidden.T @ dz
        gb2[:] = dz.sum(axis=0)
    # clip avoids log(0) for saturated probabilities
    loss = float(-np.log(np.clip(probs[np.arange(n), y], 1e-300, None)).mean())
    if prox_mu > 0.0:
        diff = theta - anchor
        loss += 0.5 * prox_mu * float(diff @ diff)
        grad += prox_mu * diff
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        layout = _layout_of(spec)
        seg = first_bad_segment(grad, layout)
        if seg == "<none>":
            seg = first_bad_segment(theta, layout)
        raise NumericError(f"non-finite forward pass (segment {seg})")
    return loss, grad


_LAYOUT_CACHE: dict[ModelSpec, Layout] = {}


def _layout_of(spec: ModelSpec) -> Layout:
    layout = _LAYOUT_CACHE.get(spec)
    if layout is None:
        layout = spec.layout()
        _LAYOUT_CACHE[spec] = layout
    return layout


def forward_loss_grad(
    spec: ModelSpec,
    params: ParamVector,
    batch: tuple[np.ndarray, np.ndarray],
    anchor: ParamVector | None = None,
    prox_mu: float = 0.0,
) -> tuple[float, ParamVector]:
    """Mean cross-entropy (+ prox term) and its exact gradient."""
    x, y = batch
    if x.shape[0] == 0:
        raise InvalidArgument("batch must be non-empty")
    if (anchor is not None) != (prox_mu > 0.0):
        raise InvalidArgument("anchor must be supplied iff prox_mu > 0")
    anchor_arr = anchor.values if anchor is not None else None
    loss, grad = _loss_grad_arrays(
        spec, params.values, x, np.asarray(y, dtype=np.int64), anchor_arr, prox_mu
    )
    return loss, ParamVector(grad, params.layout)


def _mask_slice(spec: ModelSpec, mask: str) -> slice:
    boundary = spec.local_boundary()
    if mask == "all":
        return slice(None)
    if mask == "global-only":
        return slice(0, boundary)
    return slice(boundary, None)


def sgd_step(
    params: ParamVector,
    grad: ParamVector,
    opt: OptState,
    mask: str = "all",
    spec: ModelSpec | None = None,
) -> tuple[ParamVector, OptState]:
    """velocity <- momentum*velocity + grad; masked params -= lr*velocity.

    Velocity always integrates the full gradient; the mask only limits
    which segments the parameter update touches. Masks other than
    "all" need `spec` for the global/local boundary.
    """
    if params.layout != grad.layout or params.layout != opt.velocity.layout:
        raise IncompatibleShape("sgd_step over mismatched layouts")
    if mask not in MASKS:
        raise InvalidArgument(f"unknown mask {mask!r}")
    if mask != "all" and spec is None:
        raise InvalidArgument("masked sgd_step requires the model spec")
    vel = opt.momentum * opt.velocity.values + grad.values
    new = params.values.copy()
    sl = slice(None) if mask == "all" else _mask_slice(spec, mask)
    new[sl] -= opt.lr * vel[sl]
    return (
        ParamVector(new, params.layout),
        OptState(opt.lr, opt.momentum, ParamVector(vel, params.layout)),
    )


@dataclass(frozen=True)
class LocalStats:
    steps: int
    mean_loss: float


def _local_train(
    spec: ModelSpec,
    params: ParamVector,
    features: np.ndarray,
    labels: np.ndarray,
    train: LocalTrainSpec,
    opt: OptState,
    rng: Rng,
    grad_offset: np.ndarray | None = None,
) -> tuple[ParamVector, LocalStats]:
    n = labels.shape[0]
    if n == 0:
        raise InvalidArgument("client data must be non-empty")
    theta = params.values.copy()
    vel = np.zeros_like(theta)
    anchor = params.values if train.prox_mu > 0.0 else None
    sl = _mask_slice(spec, train.mask)
    steps = 0
    loss_total = 0.0
    for _ in range(train.epochs):
        order = rng.permutation(n)
        for start in range(0, n, train.batch_size):
            idx = order[start : start + train.batch_size]
            loss, grad = _loss_grad_arrays(
                spec, theta, features[idx], labels[idx], anchor, train.prox_mu
            )
            if grad_offset is not None:
                grad = grad + grad_offset
            vel = opt.momentum * vel + grad
            theta[sl] -= opt.lr * vel[sl]
            steps += 1
            loss_total += loss
    # 0.0 rather than NaN for the no-step case keeps logs comparable
    mean_loss = loss_total / steps if steps else 0.0
    return ParamVector(theta, params.layout), LocalStats(steps, mean_loss)


def client_update(
    spec: ModelSpec,
    global_params: ParamVector,
    client_data: tuple[np.ndarray, np.ndarray],
    train: LocalTrainSpec,
    opt_template: OptState,
    rng: Rng,
    grad_offset: ParamVector | None = None,
) -> ParamVector:
    """Copy global params and run E epochs of batched SGD.

    Each epoch reshuffles and splits into batches of `batch_size`; the
    short remainder batch is kept. E=0 returns the copy unchanged.
    `grad_offset`, when given, is added to every batch gradient (the
    control-variate correction hook). The optimizer argument is a
    template: every call starts from zero velocity.
    """
    x, y = client_data
    offset = grad_offset.values if grad_offset is not None else None
    out, _ = _local_train(
        spec, global_params, x, np.asarray(y, dtype=np.int64), train, opt_template, rng, offset
    )
    return out


def local_steps(n_samples: int, train: LocalTrainSpec) -> int:
    """Number of SGD steps client_update performs: E * ceil(n / B)."""
    return train.epochs * -(-n_samples // train.batch_size)


def evaluate(spec: ModelSpec, params: ParamVector, data: Dataset, index_set) -> float:
    """Fraction of indexed samples whose argmax score equals the label.

    Argmax ties break toward the lowest class id.
    """
    idx = np.asarray(index_set, dtype=np.int64)
    if idx.size == 0:
        raise InvalidArgument("index set must be non-empty")
    logits = _logits(spec, params.values, data.features[idx])
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == data.labels[idx]))
