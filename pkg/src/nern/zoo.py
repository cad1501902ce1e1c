"""Original networks: the trainable desk-scale CNN and shape-only ResNet catalogs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .smoothness import smoothness_loss_tensor, smoothness_loss

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 4
MB = 2**20


class CatalogError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    filters: int
    channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    predictable: bool = True
    name: str = ""

    def __post_init__(self):
        if min(self.filters, self.channels, self.kernel) < 1:
            raise CatalogError(f"bad layer extents {self}")

    @property
    def num_kernels(self) -> int:
        return self.filters * self.channels

    @property
    def num_params(self) -> int:
        return self.filters * self.channels * self.kernel**2

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.filters, self.channels, self.kernel, self.kernel)


@dataclass(frozen=True)
class ArchCatalog:
    name: str
    layers: tuple[LayerSpec, ...]
    non_conv_param_count: int
    input_shape: tuple[int, int, int] | None = None
    num_classes: int | None = None

    @property
    def k_max(self) -> int:
        return max(l.kernel for l in self.layers)

    @property
    def conv_param_count(self) -> int:
        return sum(l.num_params for l in self.layers)

    @property
    def total_param_count(self) -> int:
        return self.conv_param_count + self.non_conv_param_count

    @property
    def predictable(self) -> list[int]:
        """Indices of layers the predictor reconstructs."""
        return [i for i, l in enumerate(self.layers) if l.predictable]

    @property
    def predictable_param_count(self) -> int:
        return sum(self.layers[i].num_params for i in self.predictable)

    @property
    def num_predictable_kernels(self) -> int:
        return sum(self.layers[i].num_kernels for i in self.predictable)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchCatalog":
        return cls(
            name=d["name"],
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
            non_conv_param_count=d["non_conv_param_count"],
            input_shape=tuple(d["input_shape"]) if d.get("input_shape") else None,
            num_classes=d.get("num_classes"),
        )


# -- ResNet shape catalogs --------------------------------------------------
def _bn_fc(channels: int, features: int, classes: int) -> int:
    # BN counts weight+bias per channel; running statistics are buffers
    return 2 * channels + features * classes + classes


def _cifar_resnet(name: str, blocks: int, classes: int = 10) -> ArchCatalog:
    layers = [LayerSpec(16, 3, 3, 1, 1, True, "conv1")]
    downsample = []
    cin = 16
    for stage, width in enumerate((16, 32, 64), start=1):
        for b in range(blocks):
            stride = 2 if (b == 0 and stage > 1) else 1
            layers.append(LayerSpec(width, cin, 3, stride, 1, True, f"layer{stage}.{b}.conv1"))
            layers.append(LayerSpec(width, width, 3, 1, 1, True, f"layer{stage}.{b}.conv2"))
            if cin != width:
                downsample.append(LayerSpec(width, cin, 1, 2, 0, False, f"layer{stage}.{b}.downsample"))
            cin = width
    layers += downsample
    bn_channels = sum(l.filters for l in layers)
    return ArchCatalog(name, tuple(layers), _bn_fc(bn_channels, 64, classes), (3, 32, 32), classes)


def _resnet18_imagenet() -> ArchCatalog:
    layers = [LayerSpec(64, 3, 7, 2, 3, False, "conv1")]
    cin = 64
    for stage, width in enumerate((64, 128, 256, 512), start=1):
        for b in range(2):
            stride = 2 if (b == 0 and stage > 1) else 1
            layers.append(LayerSpec(width, cin, 3, stride, 1, True, f"layer{stage}.{b}.conv1"))
            layers.append(LayerSpec(width, width, 3, 1, 1, True, f"layer{stage}.{b}.conv2"))
            if cin != width:
                layers.append(LayerSpec(width, cin, 1, 2, 0, False, f"layer{stage}.{b}.downsample.0"))
            cin = width
    bn_channels = sum(l.filters for l in layers)
    return ArchCatalog("resnet18_imagenet", tuple(layers), _bn_fc(bn_channels, 512, 1000), (3, 224, 224), 1000)


RESNET_NAMES = ("resnet20_cifar", "resnet56_cifar", "resnet18_imagenet")


def resnet_catalog(name: str) -> ArchCatalog:
    if name == "resnet20_cifar":
        return _cifar_resnet(name, 3)
    if name == "resnet56_cifar":
        return _cifar_resnet(name, 9)
    if name == "resnet18_imagenet":
        return _resnet18_imagenet()
    raise CatalogError(f"unknown architecture {name!r}; expected one of {RESNET_NAMES}")


def desk3_catalog() -> ArchCatalog:
    layers = (
        LayerSpec(8, 1, 3, 1, 1, True, "conv1"),
        LayerSpec(16, 8, 3, 2, 1, True, "conv2"),
        LayerSpec(16, 16, 3, 1, 1, True, "conv3"),
    )
    return ArchCatalog("desk3", layers, non_conv_param_count=8 + 16 + 16 + 16 * 2 + 2, input_shape=(1, 8, 8), num_classes=2)


def get_catalog(name: str) -> ArchCatalog:
    if name == "desk3":
        return desk3_catalog()
    return resnet_catalog(name)


@dataclass(frozen=True)
class SizeReport:
    total_mb: float
    conv_mb: float
    conv_percent: float
    total_mb_exact: float
    conv_mb_exact: float
    conv_percent_exact: float

    def line(self) -> str:
        return f"{self.total_mb:.2f} {self.conv_mb:.2f} {self.conv_percent:.2f}"


def params_to_mb(n: float) -> float:
    return n * BYTES_PER_PARAM / MB


def size_report(catalog: ArchCatalog) -> SizeReport:
    """Sizes in MB (2^20 bytes, f32).  The share is taken from the 2-decimal MB figures."""
    total = params_to_mb(catalog.total_param_count)
    conv = params_to_mb(catalog.conv_param_count)
    total_r, conv_r = round(total, 2), round(conv, 2)
    return SizeReport(
        total_mb=total_r,
        conv_mb=conv_r,
        conv_percent=round(conv_r / total_r * 100, 2),
        total_mb_exact=total,
        conv_mb_exact=conv,
        conv_percent_exact=conv / total * 100,
    )


# -- synthetic task -----------------------------------------------------------
@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.x_train.shape[1:]


def _bars(rng: np.random.Generator, n: int, size: int, noise: float) -> tuple[np.ndarray, np.ndarray]:
    y = rng.integers(0, 2, size=n)
    pos = rng.integers(0, size, size=n)
    x = rng.normal(0.0, noise, size=(n, 1, size, size))
    idx = np.arange(n)
    horiz = y == 0
    x[idx[horiz], 0, pos[horiz], :] += 1.0
    x[idx[~horiz], 0, :, pos[~horiz]] += 1.0
    return x.astype(np.float32), y.astype(np.int64)


def make_bars_dataset(seed: int = 0, n_train: int = 2048, n_test: int = 512, size: int = 8, noise: float = 0.3) -> Dataset:
    """Class 0 = horizontal bar, class 1 = vertical bar, plus Gaussian pixel noise."""
    rng = np.random.default_rng(seed)
    xtr, ytr = _bars(rng, n_train, size, noise)
    xte, yte = _bars(rng, n_test, size, noise)
    return Dataset(xtr, ytr, xte, yte)


# -- trainable original network -------------------------------------------------
@dataclass
class OriginalNetwork:
    catalog: ArchCatalog
    conv_weights: list[np.ndarray]
    conv_biases: list[np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    seed: int = 0
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        for spec, w in zip(self.catalog.layers, self.conv_weights, strict=True):
            if w.shape != spec.shape:
                raise CatalogError(f"layer {spec.name}: weight {w.shape} != catalog {spec.shape}")

    def forward(self, x, conv_weights=None, taps: bool = False):
        """Run conv -> relu per layer, global average pool, dense head.

        ``conv_weights`` (arrays or Tensors) substitute the stored kernels; the
        biases and head always come from this network.  With ``taps`` the
        post-activation feature maps of predictable layers are returned too.
        """
        ws = self.conv_weights if conv_weights is None else conv_weights
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        acts = []
        for spec, w, b in zip(self.catalog.layers, ws, self.conv_biases):
            w = w if isinstance(w, ad.Tensor) else ad.Tensor(w)
            h = ad.relu(ad.conv2d(h, w, ad.Tensor(b), spec.stride, spec.padding))
            if spec.predictable:
                acts.append(h)
        pooled = ad.mean(h, axis=(2, 3))
        logits = ad.dense(pooled, ad.Tensor(self.head_weight), ad.Tensor(self.head_bias))
        return (logits, acts) if taps else logits

    def predict(self, x: np.ndarray, conv_weights=None, batch: int = 512) -> np.ndarray:
        out = [self.forward(x[i : i + batch], conv_weights).data.argmax(axis=1) for i in range(0, len(x), batch)]
        return np.concatenate(out)

    def accuracy(self, x: np.ndarray, y: np.ndarray, conv_weights=None) -> float:
        return float((self.predict(x, conv_weights) == y).mean())

    def kernel_magnitudes(self) -> list[np.ndarray]:
        """Per-kernel mean |w| for predictable layers, each shaped [F, C]."""
        return [np.abs(self.conv_weights[i]).mean(axis=(2, 3)) for i in self.catalog.predictable]

    def weight_stats(self) -> tuple[float, float]:
        flat = np.concatenate([self.conv_weights[i].ravel() for i in self.catalog.predictable])
        return float(flat.mean()), float(flat.std())

    def copy(self) -> "OriginalNetwork":
        return OriginalNetwork(
            self.catalog,
            [w.copy() for w in self.conv_weights],
            [b.copy() for b in self.conv_biases],
            self.head_weight.copy(),
            self.head_bias.copy(),
            self.seed,
            dict(self.metrics),
        )


def build_network(catalog: ArchCatalog, seed: int) -> OriginalNetwork:
    if catalog.input_shape is None or catalog.num_classes is None:
        raise CatalogError(f"{catalog.name} is shape-only")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for spec in catalog.layers:
        fan_in = spec.channels * spec.kernel**2
        ws.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=spec.shape).astype(np.float32))
        bs.append(np.zeros(spec.filters, dtype=np.float32))
    feat = catalog.layers[-1].filters
    bound = 1.0 / math.sqrt(feat)
    hw = rng.uniform(-bound, bound, size=(catalog.num_classes, feat)).astype(np.float32)
    hb = np.zeros(catalog.num_classes, dtype=np.float32)
    return OriginalNetwork(catalog, ws, bs, hw, hb, seed=seed)


def build_desk_cnn(seed: int = 0) -> OriginalNetwork:
    return build_network(desk3_catalog(), seed)


def _adam_update(params, grads, state, lr, t, b1=0.9, b2=0.999, eps=1e-8):
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.setdefault(i, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state[i] = (m, v)
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


def train_original(
    net: OriginalNetwork,
    data: Dataset,
    smoothness_factor: float = 0.0,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 5e-3,
    seed: int | None = None,
) -> OriginalNetwork:
    """Task cross-entropy plus ``smoothness_factor`` times the adjacent-kernel penalty.

    Trains ``net`` in place and returns it with ``metrics`` filled in.
    """
    if len(data.x_train) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(net.seed if seed is None else seed)
    state: dict = {}
    t = 0
    pred_idx = net.catalog.predictable
    for epoch in range(epochs):
        order = rng.permutation(len(data.x_train))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            ws = [ad.Tensor(w, requires_grad=True) for w in net.conv_weights]
            bs = [ad.Tensor(b, requires_grad=True) for b in net.conv_biases]
            hw = ad.Tensor(net.head_weight, requires_grad=True)
            hb = ad.Tensor(net.head_bias, requires_grad=True)
            h = ad.Tensor(data.x_train[idx])
            for spec, w, b in zip(net.catalog.layers, ws, bs):
                h = ad.relu(ad.conv2d(h, w, b, spec.stride, spec.padding))
            logits = ad.dense(ad.mean(h, axis=(2, 3)), hw, hb)
            loss = ad.cross_entropy(logits, data.y_train[idx])
            if smoothness_factor > 0:
                loss = loss + smoothness_loss_tensor([ws[i] for i in pred_idx]) * smoothness_factor
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}")
            params = ws + bs + [hw, hb]
            grads = ad.backward(loss, params)
            t += 1
            _adam_update(net.conv_weights + net.conv_biases + [net.head_weight, net.head_bias], grads, state, lr, t)
        log.debug("epoch %d loss %.4f", epoch, loss.item())
    net.metrics = {
        "accuracy": net.accuracy(data.x_test, data.y_test),
        "smoothness": smoothness_loss([net.conv_weights[i] for i in pred_idx]),
        "smoothness_factor": smoothness_factor,
        "epochs": epochs,
    }
    return net
