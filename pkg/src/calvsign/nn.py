"""Small numpy neural-network substrate with hand-written backpropagation.

Supported layers: dense, conv1d, global average pooling, ReLU, softmax and a
fixed (non-trainable) input normalisation layer. Every network is described by
a :class:`NetworkSpec`; parameters live in a flat ``dict`` keyed ``"<layer>.W"``
and ``"<layer>.b"``.

Anything that exposes ``params``, ``with_params``, ``loss`` and
``loss_and_gradients`` can be trained with :func:`train`; the fusion models
rely on that.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-12
FORMAT_VERSION = 1

LAYER_TYPES = ("dense", "conv1d", "gap", "relu", "softmax", "normalize")


class ContractError(ValueError):
    """Input or configuration that violates a stated contract."""


class TrainingError(RuntimeError):
    """Training diverged; the partial history is attached."""

    def __init__(self, message: str, history: "TrainHistory | None" = None):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# layer descriptors


def dense(n_in: int, n_out: int) -> dict:
    return {"type": "dense", "in": int(n_in), "out": int(n_out)}


def conv1d(in_channels: int, out_channels: int, kernel: int, stride: int = 1) -> dict:
    return {
        "type": "conv1d",
        "in_channels": int(in_channels),
        "out_channels": int(out_channels),
        "kernel": int(kernel),
        "stride": int(stride),
    }


def gap() -> dict:
    return {"type": "gap"}


def relu() -> dict:
    return {"type": "relu"}


def softmax() -> dict:
    return {"type": "softmax"}


def normalize(shape: Sequence[int]) -> dict:
    """Fixed affine ``(x - mean) / scale``; ``shape`` must broadcast to one sample."""
    return {"type": "normalize", "shape": [int(s) for s in shape]}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    hlo_tap: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(dict(l) for l in self.layers))
        if not self.layers:
            raise ContractError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.get("type") not in LAYER_TYPES:
                raise ContractError(f"layer {i}: unknown type {layer.get('type')!r}")
        shapes = self._propagate()
        object.__setattr__(self, "_shapes", shapes)
        if self.hlo_tap is not None and not 0 <= self.hlo_tap < len(self.layers):
            raise ContractError(f"hlo_tap {self.hlo_tap} outside 0..{len(self.layers) - 1}")

    def _propagate(self) -> list:
        # ("vec", d) or ("seq", c); None until fixed by the first sized layer
        state = None
        out = []
        for i, layer in enumerate(self.layers):
            kind = layer["type"]
            if kind == "dense":
                if state is not None and state != ("vec", layer["in"]):
                    raise ContractError(f"layer {i}: dense expects ('vec', {layer['in']}), got {state}")
                state = ("vec", layer["out"])
            elif kind == "conv1d":
                if layer["kernel"] < 1 or layer["stride"] < 1:
                    raise ContractError(f"layer {i}: kernel and stride must be >= 1")
                if state is not None and state != ("seq", layer["in_channels"]):
                    raise ContractError(
                        f"layer {i}: conv1d expects ('seq', {layer['in_channels']}), got {state}"
                    )
                state = ("seq", layer["out_channels"])
            elif kind == "gap":
                if state is None or state[0] != "seq":
                    raise ContractError(f"layer {i}: gap needs a sequence input, got {state}")
                state = ("vec", state[1])
            elif kind == "normalize":
                shape = layer["shape"]
                if state is None:
                    nxt = next((l for l in self.layers[i + 1:] if l["type"] in ("dense", "conv1d")), None)
                    if nxt is None:
                        raise ContractError("cannot infer input shape for leading normalize layer")
                    state = ("vec", nxt["in"]) if nxt["type"] == "dense" else ("seq", nxt["in_channels"])
                expected = [state[1]] if state[0] == "vec" else [state[1], 1]
                if shape != expected:
                    raise ContractError(f"layer {i}: normalize shape {shape} != {expected}")
            elif state is None:
                raise ContractError(f"layer {i}: {kind} cannot be the first sized layer")
            out.append(state)
        return out

    @property
    def input_kind(self) -> tuple:
        first = next(l for l in self.layers if l["type"] in ("dense", "conv1d"))
        return ("vec", first["in"]) if first["type"] == "dense" else ("seq", first["in_channels"])

    def output_shape(self, index: int) -> tuple:
        return self._shapes[index]

    def to_dict(self) -> dict:
        return {"layers": [dict(l) for l in self.layers], "hlo_tap": self.hlo_tap}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["layers"]), d.get("hlo_tap"))


# ---------------------------------------------------------------------------
# layer kernels


def _im2col(x, k, stride):
    """(B, C, L) -> (B * L_out, C * k) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)[:, :, ::stride, :]
    b, c, l_out, _ = win.shape
    return win.transpose(0, 2, 1, 3).reshape(b * l_out, c * k), l_out


def _conv_forward(x, W, b, stride):
    # x: (B, C, L); W: (O, C, K)
    cols, l_out = _im2col(x, W.shape[2], stride)
    out = cols @ W.reshape(W.shape[0], -1).T + b
    return out.reshape(x.shape[0], l_out, W.shape[0]).transpose(0, 2, 1)


def _conv_backward(x, W, stride, g):
    o, c, k = W.shape
    cols, l_out = _im2col(x, k, stride)
    gmat = g.transpose(0, 2, 1).reshape(-1, o)
    gW = (gmat.T @ cols).reshape(W.shape)
    gcols = (gmat @ W.reshape(o, -1)).reshape(x.shape[0], l_out, c, k)
    gx = np.zeros((x.shape[0], x.shape[2], c), dtype=gcols.dtype)
    stop = stride * (l_out - 1) + 1
    for j in range(k):
        gx[:, j:j + stop:stride] += gcols[:, :, :, j]
    return gW, g.sum(axis=(0, 2)), gx.transpose(0, 2, 1)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean clamped cross-entropy and its gradient with respect to ``probs``."""
    labels = np.asarray(labels, dtype=int)
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = -np.log(clamped).sum() / n
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = np.where(picked > PROB_FLOOR, -1.0 / (n * clamped), 0.0)
    return loss, grad


# ---------------------------------------------------------------------------
# network


@dataclass
class Network:
    spec: NetworkSpec
    params: dict
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.param_shapes(self.spec)
        if set(expected) != set(self.params):
            raise ContractError(f"parameter keys {sorted(self.params)} != {sorted(expected)}")
        for key, shape in expected.items():
            arr = np.asarray(self.params[key], dtype=float)
            if arr.shape != shape:
                raise ContractError(f"parameter {key}: shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"parameter {key} has non-finite entries")
            self.params[key] = arr
        for i, layer in enumerate(self.spec.layers):
            if layer["type"] == "normalize":
                for name, default in (("mean", 0.0), ("scale", 1.0)):
                    key = f"{i}.{name}"
                    arr = np.asarray(self.buffers.get(key, np.full(layer["shape"], default)), dtype=float)
                    if arr.shape != tuple(layer["shape"]):
                        raise ContractError(f"buffer {key}: shape {arr.shape} != {tuple(layer['shape'])}")
                    self.buffers[key] = arr
                if np.any(self.buffers[f"{i}.scale"] <= 0):
                    raise ContractError(f"buffer {i}.scale must be positive")

    @staticmethod
    def param_shapes(spec: NetworkSpec) -> dict:
        shapes = {}
        for i, layer in enumerate(spec.layers):
            if layer["type"] == "dense":
                shapes[f"{i}.W"] = (layer["in"], layer["out"])
                shapes[f"{i}.b"] = (layer["out"],)
            elif layer["type"] == "conv1d":
                shapes[f"{i}.W"] = (layer["out_channels"], layer["in_channels"], layer["kernel"])
                shapes[f"{i}.b"] = (layer["out_channels"],)
        return shapes

    @classmethod
    def init(cls, spec: NetworkSpec, seed: int | np.random.Generator = 0) -> "Network":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for key, shape in cls.param_shapes(spec).items():
            if key.endswith(".b"):
                params[key] = np.zeros(shape)
                continue
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:
                fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
            a = math.sqrt(6.0 / (fan_in + fan_out))
            params[key] = rng.uniform(-a, a, size=shape)
        return cls(spec, params)

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "Network":
        return cls(spec, {k: np.zeros(s) for k, s in cls.param_shapes(spec).items()})

    def with_params(self, params: dict) -> "Network":
        return Network(self.spec, {k: np.array(v, dtype=float) for k, v in params.items()},
                       {k: v.copy() for k, v in self.buffers.items()})

    def with_normalizer(self, layer: int, mean, scale) -> "Network":
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        buffers[f"{layer}.mean"] = np.asarray(mean, dtype=float)
        buffers[f"{layer}.scale"] = np.asarray(scale, dtype=float)
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()}, buffers)

    # -- forward / backward --------------------------------------------------

    def _batched(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x)
        kind, size = self.spec.input_kind
        sample_ndim = 1 if kind == "vec" else 2
        single = x.ndim == sample_ndim
        if single:
            x = x[None]
        if x.ndim != sample_ndim + 1 or x.shape[1] != size:
            want = f"(*, {size})" if kind == "vec" else f"(*, {size}, L)"
            raise ContractError(f"input shape {x.shape} does not match network input {want}")
        return x, single

    def forward_batch(self, x, dtype=np.float64, keep_cache: bool = False, params: dict | None = None):
        """Run a batch through the network.

        Returns ``(output, hlo, cache)``; ``hlo`` is ``None`` without a tap and
        ``cache`` is ``None`` unless ``keep_cache``. ``params`` overrides the
        stored parameters (used by the gradient oracle).
        """
        P = self.params if params is None else params
        x, _ = self._batched(x)
        h = x.astype(dtype, copy=False)
        cache = [] if keep_cache else None
        hlo = None
        for i, layer in enumerate(self.spec.layers):
            if keep_cache:
                cache.append(h)
            kind = layer["type"]
            if kind == "dense":
                h = h @ P[f"{i}.W"].astype(dtype) + P[f"{i}.b"].astype(dtype)
            elif kind == "conv1d":
                if h.shape[2] < layer["kernel"]:
                    raise ContractError(f"layer {i}: sequence length {h.shape[2]} < kernel {layer['kernel']}")
                h = _conv_forward(h, P[f"{i}.W"].astype(dtype), P[f"{i}.b"].astype(dtype), layer["stride"])
            elif kind == "gap":
                h = h.mean(axis=2)
            elif kind == "relu":
                h = np.maximum(h, 0)
            elif kind == "softmax":
                h = _softmax(h)
            elif kind == "normalize":
                h = (h - self.buffers[f"{i}.mean"].astype(dtype)) / self.buffers[f"{i}.scale"].astype(dtype)
            if i == self.spec.hlo_tap:
                hlo = h
        return h, hlo, cache

    def backward(self, cache: list, output: np.ndarray, grad_out: np.ndarray,
                 grad_hlo: np.ndarray | None = None) -> tuple[dict, np.ndarray]:
        """Backpropagate ``grad_out`` (d loss / d output); returns (param grads, input grad)."""
        grads = {}
        g = grad_out
        h_out = output
        for i in range(len(self.spec.layers) - 1, -1, -1):
            if i == self.spec.hlo_tap and grad_hlo is not None:
                g = g + grad_hlo
            layer = self.spec.layers[i]
            x = cache[i]
            kind = layer["type"]
            if kind == "dense":
                grads[f"{i}.W"] = x.T @ g
                grads[f"{i}.b"] = g.sum(axis=0)
                g = g @ self.params[f"{i}.W"].T
            elif kind == "conv1d":
                gW, gb, g = _conv_backward(x, self.params[f"{i}.W"], layer["stride"], g)
                grads[f"{i}.W"] = gW
                grads[f"{i}.b"] = gb
            elif kind == "gap":
                g = np.repeat(g[:, :, None], x.shape[2], axis=2) / x.shape[2]
            elif kind == "relu":
                g = g * (x > 0)
            elif kind == "softmax":
                g = h_out * (g - (g * h_out).sum(axis=-1, keepdims=True))
            elif kind == "normalize":
                g = g / self.buffers[f"{i}.scale"]
            h_out = x
        return grads, g

    # -- trainable protocol --------------------------------------------------

    def loss(self, inputs, labels, dtype=np.float64, params: dict | None = None) -> float:
        out, _, _ = self.forward_batch(inputs, dtype=dtype, params=params)
        return cross_entropy(out, labels)[0]

    def loss_and_gradients(self, inputs, labels) -> tuple[float, dict]:
        if len(labels) == 0:
            raise ContractError("empty batch")
        if self.spec.layers[-1]["type"] != "softmax":
            raise ContractError("cross-entropy needs a softmax output layer")
        out, _, cache = self.forward_batch(inputs, keep_cache=True)
        loss, g = cross_entropy(out, labels)
        grads, _ = self.backward(cache, out, g)
        return loss, grads

    def predict(self, inputs, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray | None]:
        x, single = self._batched(inputs)
        outs, hlos = [], []
        for start in range(0, len(x), batch_size):
            out, hlo, _ = self.forward_batch(x[start:start + batch_size])
            outs.append(out)
            hlos.append(hlo)
        out = np.concatenate(outs)
        hlo = None if hlos[0] is None else np.concatenate(hlos)
        if single:
            return out[0], None if hlo is None else hlo[0]
        return out, hlo

    # -- persistence ---------------------------------------------------------

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.params[key], dtype="<f8").tobytes())
        for key in sorted(self.buffers):
            h.update(key.encode())
            h.update(np.ascontiguousarray(self.buffers[key], dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "format": "calvsign.network",
            "version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in sorted(self.params.items())},
            "buffers": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                        for k, v in sorted(self.buffers.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        if d.get("format") != "calvsign.network":
            raise ContractError("not a network file")
        if d.get("version") != FORMAT_VERSION:
            raise ContractError(f"unsupported network format version {d.get('version')}")

        def arrays(block):
            return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in block.items()}

        return cls(NetworkSpec.from_dict(d["spec"]), arrays(d["params"]), arrays(d.get("buffers", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "Network":
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(net: Network, x) -> tuple[np.ndarray, np.ndarray | None]:
    """Forward a single sample (or a batch); returns ``(output, hlo)``."""
    return net.predict(x)


def loss_and_gradients(model, inputs, labels) -> tuple[float, dict]:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("empty batch")
    if np.any((labels != 0) & (labels != 1)):
        raise ContractError("labels must be 0 or 1")
    return model.loss_and_gradients(inputs, labels)


def sgd_step(model, gradients: dict, lr: float):
    if set(gradients) != set(model.params):
        raise ContractError("gradient keys do not match parameters")
    new = {}
    for key, p in model.params.items():
        g = np.asarray(gradients[key])
        if g.shape != p.shape:
            raise ContractError(f"gradient {key}: shape {g.shape} != {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {key}")
        new[key] = p - lr * g
    return model.with_params(new)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    batch_size: int = 20
    lr_decay_factor: float = 5.0
    patience_decay: int = 2
    patience_stop: int = 2
    max_epochs: int = 60
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.lr_decay_factor > 1:
            raise ContractError("lr_decay_factor must be > 1")
        if self.patience_decay < 1 or self.patience_stop < 1 or self.max_epochs < 1:
            raise ContractError("patience values and max_epochs must be >= 1")


class PlateauSchedule:
    """Validation-loss driven learning-rate decay and early stopping.

    ``patience_decay`` consecutive increases divide the rate by the decay
    factor. Within the first ``patience_stop + 1`` epochs after a decay,
    ``patience_stop`` consecutive increases stop training instead.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.prev: float | None = None
        self.increases = 0
        self.since_decay: int | None = None

    def update(self, val_loss: float) -> str:
        """Feed one epoch's validation loss; returns "continue", "decay" or "stop"."""
        if self.since_decay is not None:
            self.since_decay += 1
        if self.prev is not None and val_loss > self.prev:
            self.increases += 1
        else:
            self.increases = 0
        self.prev = val_loss
        armed = self.since_decay is not None and self.since_decay <= self.cfg.patience_stop + 1
        if armed and self.increases >= self.cfg.patience_stop:
            return "stop"
        if self.increases >= self.cfg.patience_decay:
            self.lr /= self.cfg.lr_decay_factor
            self.increases = 0
            self.since_decay = 0
            return "decay"
        return "continue"


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    events: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    policy: str = ("decay after patience_decay consecutive val-loss increases; "
                   "stop after patience_stop consecutive increases within "
                   "patience_stop+1 epochs of a decay")

    def to_dict(self) -> dict:
        return asdict(self)


def take(inputs, idx):
    """Index an array or a tuple of arrays along the sample axis."""
    if isinstance(inputs, tuple):
        return tuple(a[idx] for a in inputs)
    return inputs[idx]


def n_samples(inputs) -> int:
    return len(inputs[0]) if isinstance(inputs, tuple) else len(inputs)


def _row_hashes(inputs, labels) -> set:
    parts = inputs if isinstance(inputs, tuple) else (inputs,)
    out = set()
    for i in range(len(labels)):
        h = hashlib.blake2b(digest_size=16)
        for a in parts:
            h.update(np.ascontiguousarray(a[i]).tobytes())
        out.add(h.digest())
    return out


def train(model, train_set: tuple, val_set: tuple, cfg: TrainConfig):
    """Mini-batch SGD with plateau decay; returns ``(best_model, history)``.

    ``train_set`` and ``val_set`` are ``(inputs, labels)``; inputs may be a tuple
    of aligned arrays. The returned model carries the parameters of the epoch
    with the lowest validation loss.
    """
    x_tr, y_tr = train_set
    x_va, y_va = val_set
    y_tr = np.asarray(y_tr, dtype=int)
    y_va = np.asarray(y_va, dtype=int)
    if len(y_tr) == 0 or len(y_va) == 0:
        raise ContractError("train and validation sets must be non-empty")
    if n_samples(x_tr) != len(y_tr) or n_samples(x_va) != len(y_va):
        raise ContractError("inputs and labels differ in length")
    if _row_hashes(x_tr, y_tr) & _row_hashes(x_va, y_va):
        raise ContractError("train and validation sets share samples")

    rng = np.random.default_rng(cfg.seed)
    schedule = PlateauSchedule(cfg)
    history = TrainHistory()
    best_loss, best_model = math.inf, model
    n = len(y_tr)
    for epoch in range(cfg.max_epochs):
        lr = schedule.lr
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = model.loss_and_gradients(take(x_tr, idx), y_tr[idx])
            if not math.isfinite(loss):
                history.stop_reason = "diverged"
                raise TrainingError(f"non-finite training loss at epoch {epoch}", history)
            try:
                model = sgd_step(model, grads, lr)
            except TrainingError as exc:
                history.stop_reason = "diverged"
                raise TrainingError(f"epoch {epoch}: {exc}", history) from None
            total += loss * len(idx)
        val = model.loss(x_va, y_va)
        history.train_loss.append(total / n)
        history.val_loss.append(val)
        history.learning_rate.append(lr)
        if not math.isfinite(val):
            history.stop_reason = "diverged"
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", history)
        if val < best_loss:
            best_loss, best_model = val, model
            history.best_epoch = epoch
        action = schedule.update(val)
        if action == "decay":
            history.events.append({"epoch": epoch, "event": "lr_decay", "new_lr": schedule.lr})
        elif action == "stop":
            history.events.append({"epoch": epoch, "event": "early_stop"})
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"
    return best_model, history


# ---------------------------------------------------------------------------
# gradient oracle


def numeric_gradients(model, inputs, labels, epsilon: float, dtype=np.longdouble) -> dict:
    """Central differences of the loss, evaluated at ``dtype`` precision."""
    if not epsilon > 0:
        raise ContractError("epsilon must be > 0")
    labels = np.asarray(labels, dtype=int)
    base = {k: v.astype(dtype) for k, v in model.params.items()}
    out = {}
    for key, p in base.items():
        g = np.zeros(p.shape, dtype=dtype)
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + dtype(epsilon)
            up = model.loss(inputs, labels, dtype=dtype, params=base)
            flat[j] = orig - dtype(epsilon)
            down = model.loss(inputs, labels, dtype=dtype, params=base)
            flat[j] = orig
            g.reshape(-1)[j] = (up - down) / (2 * dtype(epsilon))
        out[key] = g
    return out


def finite_difference_check(model, inputs, labels, epsilon: float = 1e-6) -> float:
    """Max over parameters of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)."""
    _, analytic = model.loss_and_gradients(inputs, np.asarray(labels, dtype=int))
    numeric = numeric_gradients(model, inputs, labels, epsilon)
    worst = 0.0
    for key, a in analytic.items():
        n = numeric[key].astype(float)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
