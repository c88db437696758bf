"""Dense feed-forward classifier with hand-written backpropagation.

Weights are stored as ``(out, in)`` matrices so that row ``j`` of the final
layer is the classifier row for logit column ``j``. The canonical flat
parameter order is, layer by layer, the weight in row-major order followed by
the bias. Every gradient produced here uses that order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

RELU = "relu"
IDENTITY = "identity"
_ACTIVATION_CODES = {RELU: 0, IDENTITY: 1}
_SNAPSHOT_MAGIC = b"LTCILMLP"


class ShapeError(ValueError):
    """Input dimensions do not agree with the model or with each other."""


class DegenerateBatchError(ValueError):
    """Per-sample weights sum to zero, so the weighted mean is undefined."""


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class MlpModel:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def copy(self) -> "MlpModel":
        return MlpModel(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def get_flat(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.weight.ravel())
            parts.append(layer.bias)
        return np.concatenate(parts)

    def with_flat(self, flat: np.ndarray) -> "MlpModel":
        """Return a new model with the same architecture and parameters ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ShapeError(
                f"flat parameter vector has length {flat.size}, model has {self.n_params}"
            )
        layers = []
        pos = 0
        for layer in self.layers:
            w_size = layer.weight.size
            w = flat[pos : pos + w_size].reshape(layer.weight.shape).copy()
            pos += w_size
            b = flat[pos : pos + layer.bias.size].copy()
            pos += layer.bias.size
            layers.append(Layer(w, b, layer.activation))
        return MlpModel(layers)


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


def init_mlp(input_dim, hidden_sizes, output_dim, rng=None) -> MlpModel:
    """Build an MLP with ReLU hidden layers and an identity output layer.

    Parameters are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    rng = np.random.default_rng(rng)
    dims = [int(input_dim), *[int(h) for h in hidden_sizes], int(output_dim)]
    if min(dims) < 1:
        raise ShapeError(f"all layer widths must be positive, got {dims}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w, b = _uniform_layer(rng, fan_in, fan_out)
        act = IDENTITY if i == len(dims) - 2 else RELU
        layers.append(Layer(w, b, act))
    return MlpModel(layers)


def _check_inputs(model: MlpModel, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"expected inputs of shape (batch, {model.input_dim}), got {x.shape}"
        )
    return x


def forward_activations(model: MlpModel, inputs) -> list[np.ndarray]:
    """Return the input followed by every layer's post-activation output."""
    a = _check_inputs(model, inputs)
    acts = [a]
    for layer in model.layers:
        z = a @ layer.weight.T + layer.bias
        if layer.activation == RELU:
            z = np.maximum(z, 0.0)
        acts.append(z)
        a = z
    return acts


def forward(model: MlpModel, inputs) -> np.ndarray:
    return forward_activations(model, inputs)[-1]


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def ce_loss_and_grad(logits, labels, per_sample_weights=None):
    """Weighted-mean cross-entropy and its gradient w.r.t. the logits.

    ``loss = sum_i w_i * CE_i / sum_i w_i``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.intp)
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError(f"labels shape {y.shape} does not match {n} logit rows")
    if n and (y.min() < 0 or y.max() >= k):
        raise ShapeError(f"labels must lie in [0, {k})")
    if per_sample_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(per_sample_weights, dtype=np.float64)
        if w.shape != (n,):
            raise ShapeError(f"weights shape {w.shape} does not match {n} rows")
        if np.any(w < 0):
            raise ValueError("per-sample weights must be non-negative")
    total = w.sum()
    if not total > 0:
        raise DegenerateBatchError("per-sample weights sum to zero")
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = float(-(w * logp[rows, y]).sum() / total)
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad


def kd_loss_and_grad(student_logits, teacher_logits, temperature=2.0, old_class_count=None):
    """Soft-target distillation restricted to the first ``old_class_count`` columns.

    Returns ``tau^2 * mean_i KL(q_i || p_i)`` with ``q = softmax(teacher/tau)``
    and ``p = softmax(student/tau)``, plus the gradient w.r.t. the student
    logits (zero on columns past ``old_class_count``).
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    m = t.shape[1] if old_class_count is None else int(old_class_count)
    if s.shape[0] != t.shape[0] or m > s.shape[1] or m > t.shape[1] or m < 0:
        raise ShapeError(
            f"cannot distil {m} columns from teacher {t.shape} into student {s.shape}"
        )
    grad = np.zeros_like(s)
    n = s.shape[0]
    if m == 0 or n == 0:
        return 0.0, grad
    tau = float(temperature)
    log_q = log_softmax(t[:, :m] / tau)
    log_p = log_softmax(s[:, :m] / tau)
    q = np.exp(log_q)
    loss = float(tau * tau * (q * (log_q - log_p)).sum() / n)
    grad[:, :m] = (tau / n) * (np.exp(log_p) - q)
    return loss, grad


def backward(model: MlpModel, inputs, dlogits, activations=None) -> np.ndarray:
    """Flattened parameter gradient of the scalar whose logit gradient is ``dlogits``.

    ``activations`` may be passed from :func:`forward_activations` to skip the
    recomputation of the forward pass.
    """
    if activations is None:
        activations = forward_activations(model, inputs)
    delta = np.asarray(dlogits, dtype=np.float64)
    if delta.shape != activations[-1].shape:
        raise ShapeError(
            f"dlogits shape {delta.shape} does not match logits {activations[-1].shape}"
        )
    grads: list[np.ndarray] = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if layer.activation == RELU:
            delta = delta * (activations[i + 1] > 0)
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ activations[i]).ravel())
        if i:
            delta = delta @ layer.weight
    return np.concatenate(grads[::-1])


def sgd_step(model: MlpModel, grad, lr: float) -> MlpModel:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (model.n_params,):
        raise ShapeError(
            f"gradient has length {grad.size}, model has {model.n_params} parameters"
        )
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return model.with_flat(model.get_flat() - lr * grad)


def expand_head(model: MlpModel, new_class_count: int, rng=None) -> MlpModel:
    """Widen the output layer to ``new_class_count`` logits.

    Existing rows are kept bit-exactly; new rows use the same uniform scheme
    as :func:`init_mlp`.
    """
    old = model.output_dim
    if new_class_count <= old:
        raise ShapeError(f"cannot expand head from {old} to {new_class_count} classes")
    rng = np.random.default_rng(rng)
    head = model.layers[-1]
    fan_in = head.weight.shape[1]
    w_new, b_new = _uniform_layer(rng, fan_in, new_class_count - old)
    out = model.copy()
    out.layers[-1] = Layer(
        np.vstack([head.weight, w_new]),
        np.concatenate([head.bias, b_new]),
        head.activation,
    )
    return out


def embed_index(old: MlpModel, new: MlpModel) -> np.ndarray:
    """Positions of ``old``'s flat parameters inside ``new``'s flat vector.

    ``new`` must equal ``old`` except for extra rows in the output layer, as
    produced by :func:`expand_head`.
    """
    if len(old.layers) != len(new.layers):
        raise ShapeError("models differ in depth")
    index = []
    offset = 0
    for i, (lo, ln) in enumerate(zip(old.layers, new.layers)):
        (ro, co), (rn, cn) = lo.weight.shape, ln.weight.shape
        if co != cn or rn < ro or (rn != ro and i != len(old.layers) - 1):
            raise ShapeError("only the output layer may grow")
        index.append(offset + np.arange(ro * co))
        offset += rn * cn
        index.append(offset + np.arange(ro))
        offset += rn
    return np.concatenate(index)


def dumps_model(model: MlpModel) -> bytes:
    """Serialize to the flat binary snapshot layout (little-endian)."""
    header = [_SNAPSHOT_MAGIC, struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        out_dim, in_dim = layer.weight.shape
        header.append(
            struct.pack("<IIB", in_dim, out_dim, _ACTIVATION_CODES[layer.activation])
        )
    return b"".join(header) + model.get_flat().astype("<f8").tobytes()


def loads_model(data: bytes) -> MlpModel:
    if data[: len(_SNAPSHOT_MAGIC)] != _SNAPSHOT_MAGIC:
        raise ValueError("not a model snapshot (bad magic)")
    pos = len(_SNAPSHOT_MAGIC)
    (n_layers,) = struct.unpack_from("<I", data, pos)
    pos += 4
    codes = {v: k for k, v in _ACTIVATION_CODES.items()}
    layers = []
    for _ in range(n_layers):
        in_dim, out_dim, code = struct.unpack_from("<IIB", data, pos)
        pos += 9
        layers.append(Layer(np.zeros((out_dim, in_dim)), np.zeros(out_dim), codes[code]))
    skeleton = MlpModel(layers)
    flat = np.frombuffer(data, dtype="<f8", offset=pos)
    if flat.size != skeleton.n_params:
        raise ValueError(
            f"snapshot holds {flat.size} values, header implies {skeleton.n_params}"
        )
    return skeleton.with_flat(flat.astype(np.float64))


def save_model(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        return loads_model(fh.read())
