"""
Dense Tensor and Reverse-Mode Gradient Engine
Small CNN layers (conv, relu, max-pool, dense) with softmax cross-entropy,
backprop for parameters and inputs, finite-difference checking, momentum SGD
and the MBNET1 checkpoint format.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"MBNET1\n"
DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a tensor shape does not fit a layer"""


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """out = floor((in + 2*pad - kernel) / stride) + 1"""
    return (size + 2 * padding - kernel) // stride + 1


@dataclass
class Conv2D:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    kind = "conv2d"

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.in_channels, self.out_channels, self.stride) < 1:
            raise ValueError(f"Invalid conv2d dimensions: {self.header()}")
        if self.padding < 0:
            raise ValueError(f"Negative padding in conv2d: {self.padding}")
        if self.weight is None:
            self.weight = np.zeros((self.out_channels, self.in_channels, self.kernel_h, self.kernel_w), DTYPE)
        if self.bias is None:
            self.bias = np.zeros(self.out_channels, DTYPE)

    def header(self) -> str:
        return (f"{self.kind} {self.kernel_h} {self.kernel_w} {self.in_channels} "
                f"{self.out_channels} {self.stride} {self.padding}")

    def params(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def fans(self) -> Tuple[int, int]:
        area = self.kernel_h * self.kernel_w
        return self.in_channels * area, self.out_channels * area

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"{self.kind} expects ({self.in_channels}, H, W), got {shape}")
        out_h = conv_output_size(shape[1], self.kernel_h, self.stride, self.padding)
        out_w = conv_output_size(shape[2], self.kernel_w, self.stride, self.padding)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"{self.kind} kernel larger than padded input {shape}")
        return (self.out_channels, out_h, out_w)

    def _columns(self, x: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...], int, int]:
        p, s = self.padding, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(xp, (self.kernel_h, self.kernel_w), axis=(2, 3))[:, :, ::s, ::s]
        n, c, out_h, out_w = windows.shape[:4]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, -1)
        return cols, xp.shape, out_h, out_w

    def forward(self, x: np.ndarray):
        cols, padded_shape, out_h, out_w = self._columns(x)
        w2 = self.weight.reshape(self.out_channels, -1)
        out = cols @ w2.T + self.bias
        out = out.reshape(x.shape[0], out_h, out_w, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, padded_shape, x.shape)

    def backward(self, dout: np.ndarray, cache):
        cols, padded_shape, in_shape = cache
        n, _, out_h, out_w = dout.shape
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        w2 = self.weight.reshape(self.out_channels, -1)
        grads = {
            "weight": (d2.T @ cols).reshape(self.weight.shape),
            "bias": d2.sum(axis=0),
        }
        dcols = (d2 @ w2).reshape(n, out_h, out_w, self.in_channels, self.kernel_h, self.kernel_w)
        dxp = np.zeros(padded_shape, DTYPE)
        s = self.stride
        for i in range(self.kernel_h):
            for j in range(self.kernel_w):
                dxp[:, :, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.padding
        dx = dxp[:, :, p:p + in_shape[2], p:p + in_shape[3]] if p else dxp
        return dx, grads


@dataclass
class ReLU:
    kind = "relu"

    def header(self) -> str:
        return self.kind

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return shape

    def forward(self, x: np.ndarray):
        active = x > 0
        return np.where(active, x, 0.0), active

    def backward(self, dout: np.ndarray, cache):
        return np.where(cache, dout, 0.0), {}


@dataclass
class MaxPool:
    window: int = 2
    stride: int = 2

    kind = "maxpool"

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError(f"Invalid maxpool dimensions: {self.header()}")

    def header(self) -> str:
        return f"{self.kind} {self.window} {self.stride}"

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(shape) != 3:
            raise ShapeError(f"{self.kind} expects (C, H, W), got {shape}")
        out_h = conv_output_size(shape[1], self.window, self.stride, 0)
        out_w = conv_output_size(shape[2], self.window, self.stride, 0)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"{self.kind} window larger than input {shape}")
        return (shape[0], out_h, out_w)

    def forward(self, x: np.ndarray):
        k, s = self.window, self.stride
        windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = windows.reshape(windows.shape[:4] + (k * k,))
        # argmax returns the first maximum in row-major order, which fixes tie routing
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, dout: np.ndarray, cache):
        idx, in_shape = cache
        k, s = self.window, self.stride
        n, c, out_h, out_w = idx.shape
        nn, cc, oh, ow = np.meshgrid(np.arange(n), np.arange(c), np.arange(out_h), np.arange(out_w),
                                     indexing="ij")
        rows = oh * s + idx // k
        cols = ow * s + idx % k
        dx = np.zeros(in_shape, DTYPE)
        np.add.at(dx, (nn, cc, rows, cols), dout)
        return dx, {}


@dataclass
class Dense:
    in_features: int
    out_features: int
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    kind = "dense"

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError(f"Invalid dense dimensions: {self.header()}")
        if self.weight is None:
            self.weight = np.zeros((self.out_features, self.in_features), DTYPE)
        if self.bias is None:
            self.bias = np.zeros(self.out_features, DTYPE)

    def header(self) -> str:
        return f"{self.kind} {self.in_features} {self.out_features}"

    def params(self) -> Dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def fans(self) -> Tuple[int, int]:
        return self.in_features, self.out_features

    def output_shape(self, shape: Tuple[int, ...]) -> Tuple[int, ...]:
        size = int(np.prod(shape))
        if size != self.in_features:
            raise ShapeError(f"{self.kind} expects {self.in_features} inputs, got shape {shape}")
        return (self.out_features,)

    def forward(self, x: np.ndarray):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.weight.T + self.bias, (flat, x.shape)

    def backward(self, dout: np.ndarray, cache):
        flat, in_shape = cache
        grads = {"weight": dout.T @ flat, "bias": dout.sum(axis=0)}
        return (dout @ self.weight).reshape(in_shape), grads


Layer = Union[Conv2D, ReLU, MaxPool, Dense]


@dataclass
class Model:
    """Ordered layer stack; the flattened output of the last layer is the logits vector"""
    layers: List[Layer]
    input_shape: Tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.num_classes < 1:
            raise ValueError(f"Class count must be positive, got {self.num_classes}")
        shape = self.input_shape
        for index, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as e:
                raise ShapeError(f"layer {index} ({layer.kind}): {e}") from e
        if int(np.prod(shape)) != self.num_classes:
            raise ShapeError(f"Model output {shape} does not match {self.num_classes} classes")
        for index, layer in enumerate(self.layers):
            for name, value in layer.params().items():
                if not np.all(np.isfinite(value)):
                    raise FloatingPointError(f"layer {index} ({layer.kind}) {name} is not finite")

    def parameter_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params().values())

    def copy(self) -> "Model":
        return Model(_copy_layers(self.layers), self.input_shape, self.num_classes)


@dataclass
class Gradients:
    """Per-layer parameter gradients plus the optional input gradient"""
    params: List[Dict[str, np.ndarray]]
    input: Optional[np.ndarray] = None


@dataclass
class MomentumState:
    velocity: List[Dict[str, np.ndarray]] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, model: Model) -> "MomentumState":
        return cls([{name: np.zeros_like(p) for name, p in layer.params().items()} for layer in model.layers])


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    coordinates_checked: int
    worst_coordinate: str
    kinks_skipped: int = 0


def _copy_layers(layers: Sequence[Layer]) -> List[Layer]:
    copied = []
    for layer in layers:
        if isinstance(layer, Conv2D):
            copied.append(Conv2D(layer.kernel_h, layer.kernel_w, layer.in_channels, layer.out_channels,
                                 layer.stride, layer.padding, layer.weight.copy(), layer.bias.copy()))
        elif isinstance(layer, Dense):
            copied.append(Dense(layer.in_features, layer.out_features, layer.weight.copy(), layer.bias.copy()))
        elif isinstance(layer, MaxPool):
            copied.append(MaxPool(layer.window, layer.stride))
        else:
            copied.append(ReLU())
    return copied


def _check_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim < 1 or tuple(batch.shape[1:]) != model.input_shape:
        first = model.layers[0].kind if model.layers else "output"
        raise ShapeError(f"layer 0 ({first}): batch shape {batch.shape} does not match "
                         f"model input (N, {', '.join(map(str, model.input_shape))})")
    return batch


def _run_forward(model: Model, batch: np.ndarray):
    caches = []
    x = batch
    for layer in model.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x.reshape(x.shape[0], -1), caches


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Logits for an N x (input shape) batch"""
    batch = _check_batch(model, batch)
    logits, _ = _run_forward(model, batch)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("forward produced non-finite logits")
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample softmax cross-entropy"""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return log_z - shifted[np.arange(len(labels)), labels]


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != n:
        raise ShapeError(f"Got {len(labels)} labels for a batch of {n}")
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        raise ValueError(f"Label {labels[bad][0]} out of range [0, {num_classes})")
    return labels


def loss_and_grads(model: Model, batch: np.ndarray, labels, want_input_grad: bool = False
                   ) -> Tuple[float, Gradients]:
    """Mean softmax cross-entropy and its gradients w.r.t. every parameter (and the input)"""
    batch = _check_batch(model, batch)
    labels = _check_labels(labels, batch.shape[0], model.num_classes)
    logits, caches = _run_forward(model, batch)
    loss = float(cross_entropy(logits, labels).mean())
    if not np.isfinite(loss):
        raise FloatingPointError("loss is not finite")

    n = batch.shape[0]
    dlogits = softmax(logits)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    out_shapes = []
    shape = model.input_shape
    for layer in model.layers:
        shape = layer.output_shape(shape)
        out_shapes.append((n,) + tuple(shape))

    param_grads: List[Dict[str, np.ndarray]] = [{} for _ in model.layers]
    d = dlogits
    for index in range(len(model.layers) - 1, -1, -1):
        d, param_grads[index] = model.layers[index].backward(d.reshape(out_shapes[index]), caches[index])
    input_grad = d.reshape(batch.shape) if want_input_grad else None
    return loss, Gradients(param_grads, input_grad)


def _relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _loss_and_route(model: Model, batch: np.ndarray, labels: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Mean loss plus the ReLU / max-pool routing decisions taken on the way"""
    logits, caches = _run_forward(model, batch)
    decisions = [cache if isinstance(layer, ReLU) else cache[0]
                 for layer, cache in zip(model.layers, caches) if isinstance(layer, (ReLU, MaxPool))]
    return float(cross_entropy(logits, labels).mean()), decisions


def grad_check(model: Model, batch: np.ndarray, labels, h: float = 1e-4, tol: float = 1e-3,
               max_coordinates: int = 1000, seed: int = 0) -> GradCheckReport:
    """
    Compare backprop gradients against central differences on every parameter and
    input coordinate, or on a seeded random subsample when there are more than
    max_coordinates of them.

    A coordinate whose +h and -h evaluations take different ReLU or max-pool decisions
    straddles a kink, where the loss has no derivative; it is skipped and counted.
    """
    if h <= 0 or tol < 0:
        raise ValueError(f"grad_check needs h > 0 and tol >= 0 (got h={h}, tol={tol})")
    batch = _check_batch(model, batch).copy()
    _, grads = loss_and_grads(model, batch, labels, want_input_grad=True)
    labels = _check_labels(labels, batch.shape[0], model.num_classes)

    targets = []
    for index, layer in enumerate(model.layers):
        for name, value in layer.params().items():
            targets.append((f"layer{index}.{name}", value, grads.params[index][name]))
    targets.append(("input", batch, grads.input))

    coordinates = [(t, i) for t, (_, value, _) in enumerate(targets) for i in range(value.size)]
    if len(coordinates) > max_coordinates:
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(len(coordinates), size=max_coordinates, replace=False))
        coordinates = [coordinates[i] for i in picked]

    max_err, worst, kinks = 0.0, "", 0
    for t, i in coordinates:
        label, value, analytic = targets[t]
        flat = value.reshape(-1)
        original = flat[i]
        flat[i] = original + h
        plus, plus_route = _loss_and_route(model, batch, labels)
        flat[i] = original - h
        minus, minus_route = _loss_and_route(model, batch, labels)
        flat[i] = original
        if not all(np.array_equal(a, b) for a, b in zip(plus_route, minus_route)):
            kinks += 1
            continue
        numeric = (plus - minus) / (2 * h)
        err = _relative_error(float(analytic.reshape(-1)[i]), numeric)
        if err > max_err:
            max_err, worst = err, f"{label}[{i}]"

    checked = len(coordinates) - kinks
    logging.info(f"Gradient check over {checked} coordinates ({kinks} kinks skipped): "
                 f"max_rel_err={max_err:.3e} at {worst or '-'}")
    return GradCheckReport(max_err, max_err <= tol, checked, worst, kinks)


def sgd_step(model: Model, grads: Gradients, lr: float, momentum: float,
             state: Optional[MomentumState] = None) -> Tuple[Model, MomentumState]:
    """v <- momentum*v + g; p <- p - lr*v, returned as a new model and state"""
    if lr < 0 or not 0 <= momentum < 1:
        raise ValueError(f"sgd_step needs lr >= 0 and 0 <= momentum < 1 (got {lr}, {momentum})")
    if len(grads.params) != len(model.layers):
        raise ShapeError(f"Gradients cover {len(grads.params)} layers, model has {len(model.layers)}")
    if state is None or not state.velocity:
        state = MomentumState.zeros_like(model)

    updated = model.copy()
    velocity = []
    for index, layer in enumerate(updated.layers):
        layer_velocity = {}
        for name, param in layer.params().items():
            g = grads.params[index].get(name)
            if g is None or g.shape != param.shape:
                raise ShapeError(f"layer {index} ({layer.kind}) {name}: gradient shape "
                                 f"{None if g is None else g.shape} != {param.shape}")
            v = momentum * state.velocity[index][name] + g
            param -= lr * v
            layer_velocity[name] = v
        velocity.append(layer_velocity)
    return updated, MomentumState(velocity)


def init_model(layer_specs: Sequence[Tuple], input_shape: Tuple[int, ...], num_classes: int,
               seed: int = 0) -> Model:
    """
    Build a model from compact specs and Glorot-uniform initialise its weights.

    Specs: ("conv", out_ch, kernel, stride, padding), ("relu",), ("maxpool", window, stride),
    ("dense", out_features); the last dense layer may use out_features=None for the class count.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers: List[Layer] = []
    for spec in layer_specs:
        kind = spec[0]
        if kind == "conv":
            _, out_ch, kernel, stride, padding = spec
            layer = Conv2D(kernel, kernel, shape[0], out_ch, stride, padding)
        elif kind == "relu":
            layer = ReLU()
        elif kind == "maxpool":
            layer = MaxPool(spec[1], spec[2])
        elif kind == "dense":
            out_features = spec[1] if spec[1] is not None else num_classes
            layer = Dense(int(np.prod(shape)), out_features)
        else:
            raise ValueError(f"Unknown layer spec: {spec}")
        shape = layer.output_shape(shape)
        if isinstance(layer, (Conv2D, Dense)):
            fan_in, fan_out = layer.fans()
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layer.weight = rng.uniform(-limit, limit, size=layer.weight.shape)
        layers.append(layer)
    return Model(layers, tuple(input_shape), num_classes)


SMALL_VGG = (
    ("conv", 16, 3, 1, 1), ("relu",),
    ("conv", 16, 3, 1, 1), ("relu",),
    ("maxpool", 2, 2),
    ("conv", 32, 3, 1, 1), ("relu",),
    ("maxpool", 2, 2),
    ("dense", 64), ("relu",),
    ("dense", None),
)


def small_vgg(input_shape: Tuple[int, int, int], num_classes: int, seed: int = 0) -> Model:
    return init_model(SMALL_VGG, input_shape, num_classes, seed)


def save_model(model: Model, path: Union[str, Path]) -> None:
    """Write the MBNET1 checkpoint: magic, header lines, little-endian float32 parameters"""
    lines = [f"model {len(model.layers)} {model.num_classes} {' '.join(map(str, model.input_shape))}"]
    lines += [layer.header() for layer in model.layers]
    payload = b"".join(
        np.ascontiguousarray(p, dtype="<f4").tobytes()
        for layer in model.layers for p in layer.params().values()
    )
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        f.write(payload)


def load_model(path: Union[str, Path]) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not an MBNET1 checkpoint")
    offset = len(CHECKPOINT_MAGIC)

    def next_line() -> List[str]:
        nonlocal offset
        end = data.index(b"\n", offset)
        fields = data[offset:end].decode("utf-8").split()
        offset = end + 1
        return fields

    head = next_line()
    if len(head) < 4 or head[0] != "model":
        raise ValueError(f"{path}: malformed model header {head}")
    n_layers, num_classes = int(head[1]), int(head[2])
    input_shape = tuple(int(d) for d in head[3:])

    layers: List[Layer] = []
    for _ in range(n_layers):
        fields = next_line()
        kind, dims = fields[0], [int(v) for v in fields[1:]]
        if kind == Conv2D.kind:
            layers.append(Conv2D(*dims))
        elif kind == Dense.kind:
            layers.append(Dense(*dims))
        elif kind == MaxPool.kind:
            layers.append(MaxPool(*dims))
        elif kind == ReLU.kind:
            layers.append(ReLU())
        else:
            raise ValueError(f"{path}: unknown layer type '{kind}'")

    for layer in layers:
        for name, param in layer.params().items():
            nbytes = param.size * 4
            chunk = data[offset:offset + nbytes]
            if len(chunk) != nbytes:
                raise ValueError(f"{path}: truncated parameters for {layer.kind}.{name}")
            setattr(layer, name, np.frombuffer(chunk, dtype="<f4").astype(DTYPE).reshape(param.shape))
            offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes after parameters")
    return Model(layers, input_shape, num_classes)
