"""Dense networks with closed-form backpropagation.

Parameters are float64 numpy arrays. A network is a list of ``(W, b)`` pairs
with ``W`` shaped ``(out, in)``; the activation is applied after every layer
except the last, so the final layer always produces raw scores.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")
LOSS_KINDS = ("cross_entropy", "soft_cross_entropy", "kl_to_reference")
PROB_CLAMP = 1e-12

# learning rates reported for the image-scale setting; kept as a named preset
IMAGE_LP_LR = 30.0
IMAGE_FT_LR = 1e-5


@dataclass
class MLP:
    layers: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        layers = []
        for k, (W, b) in enumerate(self.layers):
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {k}: W {W.shape} and b {b.shape} do not form a dense layer")
            if layers and layers[-1][0].shape[0] != W.shape[1]:
                raise ShapeError(
                    f"layer {k} expects width {W.shape[1]}, previous layer emits {layers[-1][0].shape[0]}"
                )
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k} has non-finite parameters")
            layers.append((W, b))
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [W.shape[0] for W, _ in self.layers]

    def copy(self) -> "MLP":
        return MLP([(W.copy(), b.copy()) for W, b in self.layers], self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def equals(self, other: "MLP") -> bool:
        """Bitwise parameter equality."""
        if self.activation != other.activation or len(self.layers) != len(other.layers):
            return False
        return all(
            W1.shape == W2.shape and np.array_equal(W1, W2) and np.array_equal(b1, b2)
            for (W1, b1), (W2, b2) in zip(self.layers, other.layers)
        )


@dataclass
class Gradients:
    """Parameter gradients, shape-congruent with the model they came from."""

    layers: list

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in self.layers])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([(a + c, b + d) for (a, b), (c, d) in zip(self.layers, other.layers)])

    def scale(self, factor: float) -> "Gradients":
        return Gradients([(factor * dW, factor * db) for dW, db in self.layers])


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float
    momentum: float = 0.9
    batch_size: int = 128

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError("batch_size must be a positive integer")


# ---------------------------------------------------------------------------
# construction


def init_params(widths, activation: str = "relu", scheme: str = "uniform", seed=0) -> MLP:
    """Build an MLP with layer widths ``[in, h1, ..., out]``.

    ``scheme="uniform"`` draws every weight and bias from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)); ``scheme="zeros"`` gives all zeros.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError("widths needs at least an input and an output size")
    if min(widths) < 1:
        raise ValueError(f"nonpositive dimension in {widths}")
    if scheme not in ("uniform", "zeros"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        if scheme == "zeros":
            layers.append((np.zeros((fan_out, fan_in)), np.zeros(fan_out)))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = rng.uniform(-bound, bound, size=fan_out)
            layers.append((W, b))
    return MLP(layers, activation)


def identity_mlp(dim: int) -> MLP:
    return MLP([(np.eye(dim), np.zeros(dim))], "identity")


# ---------------------------------------------------------------------------
# forward pass


def _act(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    return a


def _act_grad(name, pre, post):
    if name == "relu":
        return (pre > 0).astype(pre.dtype)
    if name == "tanh":
        return 1.0 - post * post
    return np.ones_like(pre)


def _check_input(model: MLP, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match model input width {model.in_dim}")
    return x


def forward_cache(model: MLP, x):
    """Forward pass that keeps every layer input and pre-activation."""
    x = _check_input(model, x)
    inputs, pres = [], []
    h = x
    last = len(model.layers) - 1
    for k, (W, b) in enumerate(model.layers):
        inputs.append(h)
        a = h @ W.T + b
        pres.append(a)
        h = a if k == last else _act(model.activation, a)
    return h, (inputs, pres)


def forward(model: MLP, x):
    """Return ``(penultimate, logits)``; penultimate is the final layer's input."""
    logits, (inputs, _) = forward_cache(model, x)
    return inputs[-1], logits


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# losses


def _labels_in_range(labels, num_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("labels must be a 1-D vector of class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes")
    return labels.astype(np.int64)


def cross_entropy(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = _labels_in_range(labels, probs.shape[1])
    if labels.shape[0] != probs.shape[0]:
        raise ShapeError("labels do not match number of rows")
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_CLAMP))))


def _check_soft_targets(targets, shape):
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != shape:
        raise ShapeError(f"soft targets shape {targets.shape} does not match {shape}")
    if np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("soft-target rows must sum to 1")
    return targets


def soft_cross_entropy(probs, soft_targets) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    q = _check_soft_targets(soft_targets, probs.shape)
    return float(np.mean(-np.sum(q * np.log(np.maximum(probs, PROB_CLAMP)), axis=1)))


def kl_rows(p, q) -> np.ndarray:
    """Row-wise KL(p || q) with 0 log 0 = 0; both logs clamp at 1e-12, so KL(p || p) is exactly 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"KL arguments differ in shape: {p.shape} vs {q.shape}")
    safe_p = np.where(p > 0, np.maximum(p, PROB_CLAMP), 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, PROB_CLAMP))), 0.0)
    return terms.sum(axis=-1)


def kl_divergence(p, q) -> float:
    return float(kl_rows(p, q))


# ---------------------------------------------------------------------------
# backward pass


def backprop(model: MLP, cache, dout, need_input_grad: bool = False):
    """Propagate ``dout`` (gradient w.r.t. the model output) to every parameter."""
    inputs, pres = cache
    grads = [None] * len(model.layers)
    delta = dout
    last = len(model.layers) - 1
    for k in range(last, -1, -1):
        W, _ = model.layers[k]
        if k != last:
            post = _act(model.activation, pres[k])
            delta = delta * _act_grad(model.activation, pres[k], post)
        grads[k] = (delta.T @ inputs[k], delta.sum(axis=0))
        if k > 0 or need_input_grad:
            delta = delta @ W
    return Gradients(grads), (delta if need_input_grad else None)


def loss_and_logit_grad(logits, loss_kind: str, targets):
    """Mean loss over rows and its gradient with respect to ``logits``.

    ``targets`` is a label vector for ``cross_entropy``, a soft-target matrix
    for ``soft_cross_entropy`` and a reference distribution for
    ``kl_to_reference`` (loss KL(reference || softmax(logits))).
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    probs = softmax(logits)
    n = probs.shape[0]
    if loss_kind == "cross_entropy":
        labels = _labels_in_range(targets, probs.shape[1])
        if labels.shape[0] != n:
            raise ShapeError("labels do not match number of rows")
        q = np.zeros_like(probs)
        q[np.arange(n), labels] = 1.0
        loss = cross_entropy(probs, labels)
    elif loss_kind == "soft_cross_entropy":
        q = _check_soft_targets(targets, probs.shape)
        loss = soft_cross_entropy(probs, q)
    else:
        q = np.asarray(targets, dtype=np.float64)
        if q.shape != probs.shape:
            raise ShapeError(f"reference shape {q.shape} does not match {probs.shape}")
        loss = float(np.mean(kl_rows(q, probs)))
    return loss, (probs - q) / n


def backward(model: MLP, x, loss_kind: str, targets, return_input_grad: bool = False):
    """Exact gradients of the mean loss.

    Returns ``(grads, loss)`` or ``(grads, loss, dx)`` when the input-space
    gradient is requested.
    """
    logits, cache = forward_cache(model, x)
    loss, dlogits = loss_and_logit_grad(logits, loss_kind, targets)
    grads, dx = backprop(model, cache, dlogits, need_input_grad=return_input_grad)
    if return_input_grad:
        return grads, loss, dx
    return grads, loss


def loss_value(model: MLP, x, loss_kind: str, targets) -> float:
    logits, _ = forward_cache(model, x)
    loss, _ = loss_and_logit_grad(logits, loss_kind, targets)
    return loss


# ---------------------------------------------------------------------------
# optimisation


def zero_state(model: MLP) -> list:
    """Momentum buffers for :func:`sgd_step`."""
    return [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.layers]


def sgd_step(model: MLP, grads: Gradients, state: list, config: OptimConfig) -> None:
    """In-place momentum SGD: v <- momentum * v + g; theta <- theta - lr * v."""
    if len(grads.layers) != len(model.layers) or len(state) != len(model.layers):
        raise ShapeError("gradients/state do not match the model")
    for k, ((W, b), (dW, db), (vW, vb)) in enumerate(zip(model.layers, grads.layers, state)):
        if dW.shape != W.shape or db.shape != b.shape:
            raise ShapeError(f"layer {k}: gradient shape mismatch")
        vW *= config.momentum
        vW += dW
        vb *= config.momentum
        vb += db
        W -= config.learning_rate * vW
        b -= config.learning_rate * vb


# ---------------------------------------------------------------------------
# verification


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(fn, params: list, step: float = 1e-4) -> list:
    """Central-difference gradient of scalar ``fn()`` w.r.t. arrays in ``params``.

    Each array is perturbed in place and restored.
    """
    out = []
    for arr in params:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn()
            flat[i] = orig - step
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out.append(g)
    return out


def gradient_check(model: MLP, x, loss_kind: str, targets, step: float = 1e-4) -> float:
    """Max elementwise relative error between analytic and central-difference gradients."""
    model = model.copy()
    grads, _ = backward(model, x, loss_kind, targets)
    params = [arr for layer in model.layers for arr in layer]
    numeric = numeric_gradient(lambda: loss_value(model, x, loss_kind, targets), params, step)
    analytic = [arr for layer in grads.layers for arr in layer]
    return float(max(relative_error(a, n).max() for a, n in zip(analytic, numeric)))


# ---------------------------------------------------------------------------
# AMDL checkpoints

AMDL_MAGIC = b"AMDL"
AMDL_VERSION = 1
_ACT_TAGS = {"relu": 0, "tanh": 1, "identity": 2}


def round_to_f32(model: MLP) -> MLP:
    """Copy of ``model`` with parameters rounded to float32 (checkpoint precision)."""
    return MLP(
        [(W.astype(np.float32).astype(np.float64), b.astype(np.float32).astype(np.float64)) for W, b in model.layers],
        model.activation,
    )


def save_model(model: MLP, path) -> None:
    chunks = [struct.pack("<4sII", AMDL_MAGIC, AMDL_VERSION, len(model.layers))]
    for W, b in model.layers:
        chunks.append(struct.pack("<II", *W.shape))
        chunks.append(np.ascontiguousarray(W, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    chunks.append(struct.pack("<I", _ACT_TAGS[model.activation]))
    Path(path).write_bytes(b"".join(chunks))


def load_model(path) -> MLP:
    path = Path(path)
    raw = path.read_bytes()
    try:
        magic, version, count = struct.unpack_from("<4sII", raw, 0)
        if magic != AMDL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != AMDL_VERSION:
            raise FormatError(f"{path}: bad version {version}")
        offset = 12
        layers = []
        for _ in range(count):
            out, inp = struct.unpack_from("<II", raw, offset)
            offset += 8
            W = np.frombuffer(raw, dtype="<f4", count=out * inp, offset=offset).reshape(out, inp)
            offset += 4 * out * inp
            b = np.frombuffer(raw, dtype="<f4", count=out, offset=offset)
            offset += 4 * out
            layers.append((W.astype(np.float64), b.astype(np.float64)))
        (tag,) = struct.unpack_from("<I", raw, offset)
        offset += 4
    except struct.error as exc:
        raise FormatError(f"{path}: truncated payload") from exc
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated payload") from exc
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes after payload")
    names = {v: k for k, v in _ACT_TAGS.items()}
    if tag not in names:
        raise FormatError(f"{path}: bad activation tag {tag}")
    return MLP(layers, names[tag])
