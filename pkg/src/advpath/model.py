"""Desk-scale patch classifier: spec, initialization, forward pass, training."""

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .exceptions import ConfigError, DataError, DimensionError, SpecError
from .utils import check_binary_labels, check_image, check_images, make_rng

N_CLASSES = 2


def default_layers():
    return [
        {"type": "conv2d", "out_channels": 8, "kernel": 3, "stride": 1, "pad": 1},
        {"type": "relu"},
        {"type": "maxpool2"},
        {"type": "conv2d", "out_channels": 16, "kernel": 3, "stride": 1, "pad": 1},
        {"type": "relu"},
        {"type": "maxpool2"},
        {"type": "flatten"},
        {"type": "dense", "out_features": 32},
        {"type": "relu"},
        {"type": "dense", "out_features": 2},
    ]


_LAYER_KEYS = {
    "conv2d": {"out_channels", "kernel", "stride", "pad"},
    "dense": {"out_features"},
    "relu": set(),
    "maxpool2": set(),
    "flatten": set(),
}


@dataclass
class ModelSpec:
    input_shape: tuple = (3, 32, 32)
    layers: list = field(default_factory=default_layers)
    n_classes: int = N_CLASSES
    norm: float = 255.0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [dict(layer) for layer in self.layers]
        self.validate()

    def validate(self):
        """Infer every layer's output shape; raise :class:`SpecError` on the first misfit."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input shape must be positive [C,H,W], got {self.input_shape}")
        if self.n_classes != N_CLASSES:
            raise SpecError(f"class count is fixed at {N_CLASSES}, got {self.n_classes}")
        if not self.norm > 0:
            raise SpecError(f"normalization constant must be > 0, got {self.norm}")
        if not self.layers or self.layers[-1].get("type") != "dense":
            raise SpecError("the last layer must be dense")
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            kind = layer.get("type")
            where = f"layer {i} ({kind})"
            if kind not in _LAYER_KEYS:
                raise SpecError(f"{where}: unknown layer type")
            extra = set(layer) - _LAYER_KEYS[kind] - {"type"}
            if extra:
                raise SpecError(f"{where}: unknown keys {sorted(extra)}")
            if kind == "conv2d":
                if len(shape) != 3:
                    raise SpecError(f"{where}: needs [C,H,W] input, got {shape}")
                k = int(layer.get("kernel", 3))
                s = int(layer.get("stride", 1))
                p = int(layer.get("pad", 0))
                co = int(layer.get("out_channels", 0))
                if co < 1 or k < 1 or s < 1 or p < 0:
                    raise SpecError(f"{where}: invalid hyperparameters {layer}")
                ho, wo = E._conv_out(shape[1], k, s, p), E._conv_out(shape[2], k, s, p)
                if ho is None or wo is None:
                    raise SpecError(f"{where}: kernel {k}/stride {s}/pad {p} does not tile input {shape}")
                shape = (co, ho, wo)
            elif kind == "maxpool2":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise SpecError(f"{where}: needs [C,H,W] with even H, W, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise SpecError(f"{where}: needs a flat input, got {shape}; add a flatten layer")
                out = int(layer.get("out_features", 0))
                if out < 1:
                    raise SpecError(f"{where}: out_features must be >= 1")
                shape = (out,)
            shapes.append(shape)
        if shapes[-1] != (self.n_classes,):
            raise SpecError(f"layer {len(self.layers) - 1} (dense): must output {self.n_classes} logits, got {shapes[-1]}")
        return shapes

    def param_shapes(self):
        out = []
        shape = self.input_shape
        for layer, nxt in zip(self.layers, self.validate()):
            if layer["type"] == "conv2d":
                k = int(layer.get("kernel", 3))
                out.append((nxt[0], shape[0], k, k))
                out.append((nxt[0],))
            elif layer["type"] == "dense":
                out.append((nxt[0], shape[0]))
                out.append((nxt[0],))
            shape = nxt
        return out

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [dict(layer) for layer in self.layers],
            "n_classes": self.n_classes,
            "norm": self.norm,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(input_shape=tuple(d["input_shape"]), layers=d["layers"], n_classes=d.get("n_classes", 2), norm=d.get("norm", 255.0))


@dataclass
class Model:
    spec: ModelSpec
    params: list
    seed: int = 0
    epochs: int = 0

    def copy(self):
        return Model(self.spec, [E.Tensor(p.data, dtype=p.dtype) for p in self.params], self.seed, self.epochs)

    def astype(self, dtype):
        return Model(self.spec, [E.Tensor(p.data, dtype=dtype) for p in self.params], self.seed, self.epochs)

    def flat_params(self):
        return np.concatenate([p.data.reshape(-1) for p in self.params])

    def set_flat_params(self, flat):
        flat = np.asarray(flat)
        i = 0
        for p in self.params:
            n = p.size
            p.data = np.ascontiguousarray(flat[i:i + n].reshape(p.shape).astype(p.dtype))
            i += n
        if i != flat.size:
            raise DimensionError(f"flat parameter vector has {flat.size} entries, model needs {i}")


def build_model(spec, seed=0):
    """Initialize parameters with He-uniform weights and zero biases."""
    spec.validate()
    rng = make_rng(seed, "init")
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            params.append(E.Tensor(np.zeros(shape), dtype=np.float32))
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params.append(E.Tensor(rng.uniform(-bound, bound, size=shape), dtype=np.float32))
    return Model(spec, params, int(seed), 0)


def _run(model, x, stop_before_last=False):
    """Forward pass over the layer list; ``x`` is a Tensor on the 0-255 scale."""
    batched = x.data.ndim == 4
    h = E.scale(x, 1.0 / model.spec.norm)
    it = iter(model.params)
    last = len(model.spec.layers) - 1
    for i, layer in enumerate(model.spec.layers):
        kind = layer["type"]
        if kind == "dense" and i == last and stop_before_last:
            return h
        if kind == "conv2d":
            K, b = next(it), next(it)
            h = E.conv2d(h, K, b, stride=layer.get("stride", 1), pad=layer.get("pad", 0))
        elif kind == "relu":
            h = E.relu(h)
        elif kind == "maxpool2":
            h = E.maxpool2(h)
        elif kind == "flatten":
            h = E.flatten(h, batched=batched)
        elif kind == "dense":
            W, b = next(it), next(it)
            h = E.dense(h, W, b)
    return h


def _input_tensor(model, x):
    if isinstance(x, E.Tensor):
        if tuple(x.shape[-3:]) != model.spec.input_shape or x.data.ndim not in (3, 4):
            raise DimensionError(f"input shape {x.shape} does not match model input {model.spec.input_shape}")
        return x
    arr = np.asarray(x)
    if arr.ndim == 4:
        arr = check_images(arr, model.spec.input_shape, dtype=model.params[0].dtype)
    else:
        arr = check_image(arr, model.spec.input_shape, dtype=model.params[0].dtype)
    return E.Tensor._wrap(arr)


def logits(model, x):
    """Logits for one image ``[C,H,W]`` (returns ``[2]``) or a batch (``[N,2]``)."""
    return _run(model, _input_tensor(model, x))


def penultimate_features(model, x):
    """Activation vector feeding the final dense layer (numpy array)."""
    return _run(model, _input_tensor(model, x), stop_before_last=True).data.copy()


def predict(model, image):
    """Return ``(probabilities, predicted_class, confidence)`` for one image."""
    p = E._softmax(logits(model, image).data)
    if p.ndim != 1:
        raise DimensionError("predict takes a single [C,H,W] image; use predict_proba for batches")
    cls = int(np.argmax(p))
    return p, cls, float(p[cls])


def predict_proba(model, X, batch_size=256):
    X = check_images(X, model.spec.input_shape)
    out = [E._softmax(logits(model, X[i:i + batch_size]).data) for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES), dtype=np.float32)


def dataset_loss(model, X, y, batch_size=256):
    """Mean cross-entropy of the model over ``(X, y)``."""
    X = check_images(X, model.spec.input_shape)
    y = check_binary_labels(y, len(X))
    total = 0.0
    for i in range(0, len(X), batch_size):
        xb, yb = X[i:i + batch_size], y[i:i + batch_size]
        total += float(E.softmax_cross_entropy(logits(model, xb), yb).data) * len(xb)
    return total / len(X)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    optimizer: str = "adadelta"
    lr: float = 0.01
    epochs: int = 25
    batch_size: int = 16
    seed: int = 0
    snapshot_every: int = 1
    rho: float = 0.9
    eps: float = 1e-6

    def validate(self):
        problems = []
        if self.optimizer not in ("adadelta", "sgd"):
            problems.append(f"optimizer must be 'adadelta' or 'sgd', got {self.optimizer!r}")
        if not self.lr > 0:
            problems.append(f"learning rate must be > 0, got {self.lr}")
        if int(self.epochs) < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if int(self.batch_size) < 1:
            problems.append(f"batch size must be >= 1, got {self.batch_size}")
        if int(self.snapshot_every) < 1:
            problems.append(f"snapshot cadence must be >= 1, got {self.snapshot_every}")
        if not 0 < self.rho < 1:
            problems.append(f"rho must lie in (0, 1), got {self.rho}")
        if problems:
            raise ConfigError(problems)
        return self


class AdaDelta:
    """AdaDelta with a learning-rate multiplier on the update.

    Keeps running averages of squared gradients and squared updates; the
    update is ``-sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g``.
    """

    def __init__(self, params, lr=1.0, rho=0.9, eps=1e-6):
        self.params = params
        self.lr = np.float32(lr)
        self.rho = np.float32(rho)
        self.eps = np.float32(eps)
        self.sq_grad = [np.zeros_like(p.data) for p in params]
        self.sq_delta = [np.zeros_like(p.data) for p in params]

    def step(self):
        one = np.float32(1)
        for p, sg, sd in zip(self.params, self.sq_grad, self.sq_delta):
            g = p.grad
            sg *= self.rho
            sg += (one - self.rho) * g * g
            delta = np.sqrt(sd + self.eps) / np.sqrt(sg + self.eps) * g
            sd *= self.rho
            sd += (one - self.rho) * delta * delta
            p.data -= self.lr * delta


class SGD:
    def __init__(self, params, lr=0.01):
        self.params = params
        self.lr = np.float32(lr)

    def step(self):
        for p in self.params:
            p.data -= self.lr * p.grad


def _dataset_arrays(data):
    if hasattr(data, "arrays"):
        return data.arrays()
    X, y = data
    return np.asarray(X, dtype=np.float32), np.asarray(y)


def train(model, train_set, cfg):
    """Train ``model`` on ``train_set`` (a Dataset or an ``(X, y)`` pair).

    Returns ``(model, snapshots, losses)``; the input model is not modified.
    ``snapshots`` is a ``[S, P]`` array of flattened parameters holding the
    initial weights, one row per ``cfg.snapshot_every`` epochs, and the final
    weights.  ``losses`` has one mean training loss per epoch.
    """
    cfg.validate()
    X, y = _dataset_arrays(train_set)
    X = check_images(X, model.spec.input_shape)
    y = check_binary_labels(y, len(X))
    if len(X) == 0:
        raise DataError("training set is empty")
    if len(np.unique(y)) < 2:
        raise DataError("training set must contain both classes")
    model = model.copy()
    for p in model.params:
        p.requires_grad = True
    if cfg.optimizer == "adadelta":
        opt = AdaDelta(model.params, lr=cfg.lr, rho=cfg.rho, eps=cfg.eps)
    else:
        opt = SGD(model.params, lr=cfg.lr)
    rng = make_rng(cfg.seed, "train-order")
    snapshots = [model.flat_params().copy()]
    losses = []
    bs = int(cfg.batch_size)
    for epoch in range(int(cfg.epochs)):
        order = rng.permutation(len(X))
        total = 0.0
        for i in range(0, len(X), bs):
            idx = order[i:i + bs]
            with E.Tape() as tape:
                loss = E.softmax_cross_entropy(logits(model, X[idx]), y[idx])
            tape.backward(loss)
            opt.step()
            total += float(loss.data) * len(idx)
        losses.append(total / len(X))
        model.epochs += 1
        if (epoch + 1) % cfg.snapshot_every == 0 or epoch + 1 == cfg.epochs:
            snapshots.append(model.flat_params().copy())
    for p in model.params:
        p.requires_grad = False
        p.grad = None
    return model, np.stack(snapshots), losses


__all__ = [
    "AdaDelta",
    "Model",
    "ModelSpec",
    "SGD",
    "TrainConfig",
    "build_model",
    "dataset_loss",
    "default_layers",
    "logits",
    "penultimate_features",
    "predict",
    "predict_proba",
    "train",
]
