"""Small CNN classifiers: definition, initialization, training, checkpoints.

A :class:`ModelSpec` is an ordered list of layer specs whose shapes compose
statically. :class:`Model` binds a spec to trained parameters plus the
normalization statistics of its training data, and runs forward passes that
expose per-layer input features of every non-linear layer (the hook points
for backward-rule overrides).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"APCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# layer and model specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class AvgPool2d:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Nonlinear:
    kind: str = "relu"


LayerSpec = Union[Conv2d, MaxPool2d, AvgPool2d, Flatten, Linear, Nonlinear]


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int

    def nonlinear_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, Nonlinear)]


def layer_shapes(spec: ModelSpec) -> list[tuple]:
    """Output shape (without batch dim) after each layer; raises if the
    layers do not compose or the final width differs from num_classes."""
    shape = tuple(spec.input_shape)
    shapes = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2d):
            c, h, w = shape
            if c != layer.in_channels:
                raise ValueError(
                    f"layer {i}: conv expects {layer.in_channels} channels, got {c}")
            oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise ValueError(f"layer {i}: kernel does not fit {h}x{w} input")
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, (MaxPool2d, AvgPool2d)):
            c, h, w = shape
            shape = (c, (h - layer.kernel) // layer.stride + 1,
                     (w - layer.kernel) // layer.stride + 1)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Linear):
            if shape != (layer.in_features,):
                raise ValueError(
                    f"layer {i}: linear expects ({layer.in_features},), got {shape}")
            shape = (layer.out_features,)
        elif isinstance(layer, Nonlinear):
            if layer.kind not in ad.NONLINEAR_KINDS:
                raise ValueError(f"layer {i}: unknown non-linearity '{layer.kind}'")
        else:
            raise TypeError(f"layer {i}: unknown layer spec {layer!r}")
        shapes.append(shape)
    if shapes[-1] != (spec.num_classes,):
        raise ValueError(
            f"final layer produces {shapes[-1]}, expected ({spec.num_classes},) logits")
    return shapes


def mnist_cnn2(num_classes: int = 10, input_shape=(1, 28, 28)) -> ModelSpec:
    """Two-conv CNN for 28x28 grayscale inputs."""
    c, h, w = input_shape
    h2, w2 = (h - 4) // 2, (w - 4) // 2
    h3, w3 = (h2 - 4) // 2, (w2 - 4) // 2
    return ModelSpec(
        layers=(
            Conv2d(c, 16, 5),
            Nonlinear("relu"),
            MaxPool2d(2, 2),
            Conv2d(16, 32, 5),
            Nonlinear("relu"),
            MaxPool2d(2, 2),
            Flatten(),
            Linear(32 * h3 * w3, num_classes),
        ),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


def cifar_cnn4(num_classes: int = 10, input_shape=(3, 32, 32)) -> ModelSpec:
    """Four-conv CNN for 32x32 RGB inputs."""
    c, h, w = input_shape
    return ModelSpec(
        layers=(
            Conv2d(c, 32, 3, padding=1),
            Nonlinear("relu"),
            Conv2d(32, 32, 3, padding=1),
            Nonlinear("relu"),
            MaxPool2d(2, 2),
            Conv2d(32, 64, 3, padding=1),
            Nonlinear("relu"),
            Conv2d(64, 64, 3, padding=1),
            Nonlinear("relu"),
            MaxPool2d(2, 2),
            Flatten(),
            Linear(64 * (h // 4) * (w // 4), num_classes),
        ),
        input_shape=tuple(input_shape),
        num_classes=num_classes,
    )


MODEL_REGISTRY: dict[str, Callable[..., ModelSpec]] = {
    "mnist_cnn2": mnist_cnn2,
    "cifar_cnn4": cifar_cnn4,
}


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class Parameters:
    tensors: dict[str, ad.Tensor]
    init_seed: int

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "Parameters":
        return Parameters({k: ad.Tensor(v.data.copy()) for k, v in self.tensors.items()},
                          self.init_seed)


def build_model(spec: ModelSpec, seed: int) -> Parameters:
    """Kaiming-uniform conv/linear weights (bound sqrt(6/fan_in)), zero biases."""
    layer_shapes(spec)  # validate composition before drawing anything
    rng = np.random.default_rng(seed)
    tensors: dict[str, ad.Tensor] = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound,
                            size=(layer.out_channels, layer.in_channels,
                                  layer.kernel, layer.kernel))
            tensors[f"layer{i}.weight"] = ad.Tensor(w)
            tensors[f"layer{i}.bias"] = ad.Tensor(np.zeros(layer.out_channels))
        elif isinstance(layer, Linear):
            bound = np.sqrt(6.0 / layer.in_features)
            w = rng.uniform(-bound, bound,
                            size=(layer.out_features, layer.in_features))
            tensors[f"layer{i}.weight"] = ad.Tensor(w)
            tensors[f"layer{i}.bias"] = ad.Tensor(np.zeros(layer.out_features))
    return Parameters(tensors, init_seed=seed)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@dataclass
class ForwardRecord:
    activation: ad.Tensor                 # pre-softmax logits, (K,) or (N, K)
    feature_maps: list                    # input features of non-linear layers
    reference_features: Optional[list]    # same, from the all-zero input
    centered_features: Optional[list]     # feature - reference, detached
    input_tensor: ad.Tensor               # the graph leaf the image became


def _run_layers(spec: ModelSpec, params: Parameters, x: ad.Tensor,
                refs: Optional[list] = None,
                overrides: Optional[dict] = None) -> tuple[ad.Tensor, list]:
    features = []
    k = 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2d):
            x = ad.conv2d(x, params.tensors[f"layer{i}.weight"],
                          params.tensors[f"layer{i}.bias"],
                          stride=layer.stride, padding=layer.padding)
        elif isinstance(layer, MaxPool2d):
            x = ad.maxpool2d(x, layer.kernel, layer.stride)
        elif isinstance(layer, AvgPool2d):
            x = ad.avgpool2d(x, layer.kernel, layer.stride)
        elif isinstance(layer, Flatten):
            x = ad.reshape(x, (x.shape[0], -1))
        elif isinstance(layer, Linear):
            x = ad.add(ad.matmul(x, ad.transpose(params.tensors[f"layer{i}.weight"])),
                       params.tensors[f"layer{i}.bias"])
        elif isinstance(layer, Nonlinear):
            features.append(x)
            out = ad.nonlinear(x, layer.kind)
            if out.node is not None:
                if refs is not None:
                    out.node.ref = refs[k]
                if overrides is not None and i in overrides:
                    out.node.graph.register_override(out.node, overrides[i])
            x = out
            k += 1
    return x, features


class Model:
    """A spec bound to parameters plus input-normalization statistics.

    ``overrides`` maps a non-linear layer index to a backward rule; forward
    passes made with ``apply_overrides=True`` register the rule on that
    pass's activation node, so the rule governs subsequent backprop.
    """

    def __init__(self, spec: ModelSpec, params: Parameters,
                 mean: Optional[np.ndarray] = None,
                 std: Optional[np.ndarray] = None):
        self.spec = spec
        self.params = params
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)
        self.overrides: dict[int, Callable] = {}
        self._ref_cache: Optional[list] = None

    # -- input handling -----------------------------------------------------
    def normalize(self, raw: np.ndarray) -> np.ndarray:
        """Raw [0,1] pixels to model space; mask-to-zero then equals
        masking to the dataset mean in raw space."""
        if self.mean is None or self.std is None:
            raise ValueError("model has no normalization statistics")
        c = raw.shape[-3]
        return (raw - self.mean.reshape(c, 1, 1)) / self.std.reshape(c, 1, 1)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        c = x.shape[-3]
        return x * self.std.reshape(c, 1, 1) + self.mean.reshape(c, 1, 1)

    def _batched(self, image) -> tuple[np.ndarray, bool]:
        arr = image.data if isinstance(image, ad.Tensor) else np.asarray(image, dtype=np.float64)
        if arr.ndim == 3:
            return arr[None], True
        if arr.ndim == 4:
            return arr, False
        raise ValueError(f"expected CHW or NCHW input, got shape {arr.shape}")

    # -- reference features ---------------------------------------------------
    def reference_features(self) -> list:
        """Per-non-linear-layer input features of the all-zero input.

        Depends only on the parameters, so it is computed once and cached.
        """
        if self._ref_cache is None:
            zero = ad.Tensor(np.zeros((1,) + tuple(self.spec.input_shape)))
            with ad.no_grad():
                _, feats = _run_layers(self.spec, self.params, zero)
            self._ref_cache = [ad.Tensor(f.data) for f in feats]
        return self._ref_cache

    # -- forward --------------------------------------------------------------
    def forward(self, image, with_reference: bool = False,
                input_grad: bool = False,
                apply_overrides: bool = False) -> ForwardRecord:
        """Run the network on a CHW image or NCHW batch.

        The returned activation is the pre-softmax logits. When
        ``with_reference`` is set, reference features from the all-zero input
        are attached to each non-linear node and reported alongside
        ``feature - reference``.
        """
        arr, single = self._batched(image)
        if arr.shape[1:] != tuple(self.spec.input_shape):
            raise ValueError(
                f"input shape {arr.shape[1:]} does not match model "
                f"input {tuple(self.spec.input_shape)}")
        x = ad.Tensor(arr, requires_grad=input_grad)
        refs = self.reference_features() if with_reference else None
        overrides = self.overrides if (apply_overrides and self.overrides) else None
        act, feats = _run_layers(self.spec, self.params, x, refs=refs,
                                 overrides=overrides)
        centered = None
        if with_reference:
            centered = [ad.Tensor(f.data - r.data) for f, r in zip(feats, refs)]
        if single:
            act = ad.reshape(act, (self.spec.num_classes,))
        return ForwardRecord(activation=act, feature_maps=feats,
                             reference_features=refs,
                             centered_features=centered, input_tensor=x)

    def logits(self, images: np.ndarray) -> np.ndarray:
        """Pure inference on an NCHW batch (no graph)."""
        with ad.no_grad():
            act, _ = _run_layers(self.spec, self.params,
                                 ad.Tensor(np.asarray(images, dtype=np.float64)))
        return act.data

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.logits(images).argmax(axis=-1)


def forward(spec: ModelSpec, params: Parameters, image,
            with_reference: bool = False, **kw) -> ForwardRecord:
    """Functional forward over a throwaway Model (no normalization stats)."""
    return Model(spec, params).forward(image, with_reference=with_reference, **kw)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> dict[str, ad.Tensor]:
    """One bias-corrected Adam update; returns fresh parameter tensors."""
    state.t += 1
    t = state.t
    out: dict[str, ad.Tensor] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}"
                             f" for '{name}'")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        out[name] = ad.Tensor(new, requires_grad=True)
    return out


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray],
             state: SgdState, lr: float, momentum: float = 0.0) -> dict[str, ad.Tensor]:
    out: dict[str, ad.Tensor] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if momentum:
            v = state.velocity.get(name)
            v = g if v is None else momentum * v + g
            state.velocity[name] = v
            g = v
        out[name] = ad.Tensor(p.data - lr * g, requires_grad=True)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "adam"       # "adam" or "sgd"
    lr: float = 1e-3
    momentum: float = 0.0         # sgd only
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 3
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


def nll_loss(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Mean negative log-likelihood of softmax(logits) at the given labels."""
    n, k = logits.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), np.asarray(labels, dtype=np.int64)] = 1.0
    ls = ad.log_softmax_lastdim(logits)
    return ad.neg(ad.mean(ad.reduce_sum(ad.mul(ls, ad.Tensor(onehot)), axis=-1)))


def train(spec: ModelSpec, images: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig) -> Parameters:
    """Train from a fresh seeded initialization on normalized NCHW images.

    Deterministic under (cfg.seed, data): batch order comes from a dedicated
    generator and the optimizer update is pure float64 arithmetic.
    """
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValueError("labels out of range for num_classes")
    init = build_model(spec, cfg.seed)
    params = {k: ad.Tensor(v.data, requires_grad=True) for k, v in init.tensors.items()}
    opt_state = AdamState() if cfg.optimizer == "adam" else SgdState()
    order_rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = ad.Tensor(images[idx])
            holder = Parameters(params, cfg.seed)
            logits, _ = _run_layers(spec, holder, x)
            loss = nll_loss(logits, labels[idx])
            names = list(params)
            gs = ad.backward(loss, [params[k] for k in names])
            grads = {k: g.data for k, g in zip(names, gs)}
            if cfg.optimizer == "adam":
                params = adam_step(params, grads, opt_state, cfg.lr,
                                   cfg.beta1, cfg.beta2, cfg.eps)
            elif cfg.optimizer == "sgd":
                params = sgd_step(params, grads, opt_state, cfg.lr, cfg.momentum)
            else:
                raise ValueError(f"unknown optimizer '{cfg.optimizer}'")
    final = {k: ad.Tensor(v.data) for k, v in params.items()}
    return Parameters(final, init_seed=cfg.seed)


def accuracy(spec: ModelSpec, params: Parameters, images: np.ndarray,
             labels: np.ndarray, batch_size: int = 512) -> float:
    model = Model(spec, params)
    hits = 0
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size]
        pred = model.predict(chunk)
        hits += int((pred == labels[start:start + chunk.shape[0]]).sum())
    return hits / images.shape[0]


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------

def _spec_to_text(spec: ModelSpec, init_seed: int,
                  mean: Optional[np.ndarray], std: Optional[np.ndarray]) -> str:
    lines = [
        "input_shape = " + "x".join(str(s) for s in spec.input_shape),
        f"num_classes = {spec.num_classes}",
        f"init_seed = {init_seed}",
    ]
    if mean is not None:
        lines.append("mean = " + " ".join(f"{v:.17g}" for v in np.atleast_1d(mean)))
        lines.append("std = " + " ".join(f"{v:.17g}" for v in np.atleast_1d(std)))
    for layer in spec.layers:
        if isinstance(layer, Conv2d):
            lines.append(f"layer = conv2d in={layer.in_channels} out={layer.out_channels} "
                         f"kernel={layer.kernel} stride={layer.stride} padding={layer.padding}")
        elif isinstance(layer, MaxPool2d):
            lines.append(f"layer = maxpool2d kernel={layer.kernel} stride={layer.stride}")
        elif isinstance(layer, AvgPool2d):
            lines.append(f"layer = avgpool2d kernel={layer.kernel} stride={layer.stride}")
        elif isinstance(layer, Flatten):
            lines.append("layer = flatten")
        elif isinstance(layer, Linear):
            lines.append(f"layer = linear in={layer.in_features} out={layer.out_features}")
        elif isinstance(layer, Nonlinear):
            lines.append(f"layer = nonlinear kind={layer.kind}")
    return "\n".join(lines) + "\n"


def _text_to_spec(text: str):
    layers = []
    input_shape = None
    num_classes = None
    init_seed = 0
    mean = std = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "input_shape":
            input_shape = tuple(int(v) for v in value.split("x"))
        elif key == "num_classes":
            num_classes = int(value)
        elif key == "init_seed":
            init_seed = int(value)
        elif key == "mean":
            mean = np.array([float(v) for v in value.split()])
        elif key == "std":
            std = np.array([float(v) for v in value.split()])
        elif key == "layer":
            parts = value.split()
            kind, kw = parts[0], dict(p.split("=") for p in parts[1:])
            if kind == "conv2d":
                layers.append(Conv2d(int(kw["in"]), int(kw["out"]), int(kw["kernel"]),
                                     int(kw["stride"]), int(kw["padding"])))
            elif kind == "maxpool2d":
                layers.append(MaxPool2d(int(kw["kernel"]), int(kw["stride"])))
            elif kind == "avgpool2d":
                layers.append(AvgPool2d(int(kw["kernel"]), int(kw["stride"])))
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "linear":
                layers.append(Linear(int(kw["in"]), int(kw["out"])))
            elif kind == "nonlinear":
                layers.append(Nonlinear(kw["kind"]))
            else:
                raise ValueError(f"unknown layer kind '{kind}' in checkpoint")
        else:
            raise ValueError(f"unknown checkpoint key '{key}'")
    if input_shape is None or num_classes is None:
        raise ValueError("checkpoint description lacks input_shape/num_classes")
    spec = ModelSpec(tuple(layers), input_shape, num_classes)
    return spec, init_seed, mean, std


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: Parameters
    mean: Optional[np.ndarray]
    std: Optional[np.ndarray]

    def model(self) -> Model:
        return Model(self.spec, self.params, self.mean, self.std)


def save_checkpoint(spec: ModelSpec, params: Parameters, path,
                    mean: Optional[np.ndarray] = None,
                    std: Optional[np.ndarray] = None) -> None:
    """Binary container: magic "APCK", u16 version, length-prefixed UTF-8
    spec text, then per tensor: u16 name length, name, u8 rank, u32 dims,
    little-endian f64 payload."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    text = _spec_to_text(spec, params.init_seed, mean, std).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name, tensor in params.tensors.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        arr = tensor.data
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exactly(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError(f"truncated checkpoint while reading {what}")
    return b


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = _read_exactly(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exactly(f, 2, "version"))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (tlen,) = struct.unpack("<I", _read_exactly(f, 4, "description length"))
        text = _read_exactly(f, tlen, "description").decode("utf-8")
        spec, init_seed, mean, std = _text_to_spec(text)
        tensors: dict[str, ad.Tensor] = {}
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise ValueError("truncated checkpoint while reading tensor header")
            (nlen,) = struct.unpack("<H", head)
            name = _read_exactly(f, nlen, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exactly(f, 1, "tensor rank"))
            dims = tuple(struct.unpack("<I", _read_exactly(f, 4, "dim"))[0]
                         for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            payload = _read_exactly(f, 8 * count, f"tensor '{name}' payload")
            tensors[name] = ad.Tensor(np.frombuffer(payload, dtype="<f8").reshape(dims))
    params = Parameters(tensors, init_seed=init_seed)
    _validate_params(spec, params)
    return Checkpoint(spec, params, mean, std)


def _validate_params(spec: ModelSpec, params: Parameters) -> None:
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2d):
            expect = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        elif isinstance(layer, Linear):
            expect = (layer.out_features, layer.in_features)
        else:
            continue
        w = params.tensors.get(f"layer{i}.weight")
        if w is None or w.shape != expect:
            raise ValueError(f"checkpoint shape table inconsistent at layer {i}")
