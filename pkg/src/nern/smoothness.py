"""Kernel smoothness: the adjacent-kernel penalty, greedy kernel reordering,
and the on-disk permutation codec.

A permutation never moves weights inside the original network.  It only
changes the order in which the predictor emits kernels: prediction slot ``p``
of a layer is filled by the original kernel at flat index ``order[p]``
(flat index = ``f * C + c``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

VARIANTS = ("none", "in_filter", "cross_filter")
_VARIANT_CODES = {v: i for i, v in enumerate(VARIANTS)}
PERM_MAGIC = b"NRP1"
_TINY = 1e-12


class PermutationError(ValueError):
    pass


# -- distances ------------------------------------------------------------------
def _flat_kernels(w: np.ndarray) -> np.ndarray:
    """[F, C, k, k] -> [F*C, k*k] in (f, c) row-major order."""
    F, C = w.shape[:2]
    return np.asarray(w, dtype=np.float64).reshape(F * C, -1)


def pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise distance between two stacks of flattened kernels.

    Squared difference for scalar (1x1) kernels, cosine distance otherwise.
    A zero kernel is at distance 1 from any non-zero kernel and 0 from another zero kernel.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] == 1:
        return ((a - b) ** 2)[..., 0]
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = (a * b).sum(axis=-1)
    both = (na == 0) & (nb == 0)
    one = (na == 0) ^ (nb == 0)
    cos = dot / np.where(na * nb > 0, na * nb, 1.0)
    return np.where(both, 0.0, np.where(one, 1.0, 1.0 - cos))


def _layer_smoothness(w: np.ndarray) -> float:
    F, C = w.shape[:2]
    flat = np.asarray(w, dtype=np.float64).reshape(F, C, -1)
    total = 0.0
    if F > 1:
        total += pairwise_distance(flat[:-1], flat[1:]).sum()
    if C > 1:
        total += pairwise_distance(flat[:, :-1], flat[:, 1:]).sum()
    return float(total)


def smoothness_loss(weights: Sequence[np.ndarray]) -> float:
    """Sum of distances between filter-adjacent and channel-adjacent kernels over all layers."""
    return float(sum(_layer_smoothness(np.asarray(w)) for w in weights))


def _tensor_pair_distance(a: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    if a.shape[-1] == 1:
        d = a - b
        return ad.tsum(ad.square(d))
    na = ad.l2_norm(a, axis=-1)
    nb = ad.l2_norm(b, axis=-1)
    dot = ad.tsum(a * b, axis=-1)
    cos = dot / ad.clamp_min(na * nb, _TINY)
    n_both_zero = int(((na.data == 0) & (nb.data == 0)).sum())
    # both-zero pairs would score 1 here but are defined as 0
    return ad.tsum(1.0 - cos) - float(n_both_zero)


def smoothness_loss_tensor(weights: Sequence[ad.Tensor]) -> ad.Tensor:
    """Differentiable twin of :func:`smoothness_loss`."""
    total = None
    for w in weights:
        F, C = w.shape[:2]
        flat = ad.reshape(w, (F, C, -1))
        terms = []
        if F > 1:
            terms.append(_tensor_pair_distance(flat[:-1], flat[1:]))
        if C > 1:
            terms.append(_tensor_pair_distance(flat[:, :-1], flat[:, 1:]))
        for t in terms:
            total = t if total is None else total + t
    if total is None:
        return ad.Tensor(np.zeros((), dtype=np.float32))
    return total


# -- graph + greedy path ----------------------------------------------------------
@dataclass
class KernelDistanceGraph:
    dist: np.ndarray

    def __post_init__(self):
        d = self.dist
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise PermutationError("distance matrix must be square")

    @property
    def n(self) -> int:
        return self.dist.shape[0]

    def path_weight(self, path: Sequence[int]) -> float:
        p = np.asarray(path)
        return float(self.dist[p[:-1], p[1:]].sum()) if len(p) > 1 else 0.0


def distance_matrix(kernels: np.ndarray) -> np.ndarray:
    """All-pairs distance between rows of an [n, k*k] kernel stack."""
    x = np.asarray(kernels, dtype=np.float64)
    if x.shape[1] == 1:
        d = (x - x.T) ** 2
    else:
        norms = np.linalg.norm(x, axis=1)
        zero = norms == 0
        safe = np.where(zero, 1.0, norms)
        unit = x / safe[:, None]
        d = 1.0 - unit @ unit.T
        d[zero, :] = 1.0
        d[:, zero] = 1.0
        d[np.ix_(zero, zero)] = 0.0
        d = np.maximum(d, 0.0)
        d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def kernel_graph(weights: np.ndarray) -> KernelDistanceGraph:
    """Complete graph over the kernels of one layer, vertices in (f, c) order."""
    return KernelDistanceGraph(distance_matrix(_flat_kernels(weights)))


def greedy_hamiltonian(graph: KernelDistanceGraph | np.ndarray, start: int = 0) -> list[int]:
    """Nearest-unvisited-neighbour path from ``start``; ties go to the lowest index."""
    d = graph.dist if isinstance(graph, KernelDistanceGraph) else np.asarray(graph)
    n = d.shape[0]
    if n < 1:
        raise PermutationError("graph has no vertices")
    visited = np.zeros(n, dtype=bool)
    path = [start]
    visited[start] = True
    cur = start
    for _ in range(n - 1):
        row = np.where(visited, np.inf, d[cur])
        cur = int(np.argmin(row))
        visited[cur] = True
        path.append(cur)
    return path


# -- permutation maps --------------------------------------------------------------
@dataclass
class LayerPermutation:
    filters: int
    channels: int
    order: np.ndarray | None = None  # cross_filter: length F*C
    channel_orders: np.ndarray | None = None  # in_filter: [F, C], row f is a perm of original filter f
    filter_order: np.ndarray | None = None  # in_filter: length F

    def flat_order(self) -> np.ndarray:
        """Original flat kernel index for each prediction slot."""
        F, C = self.filters, self.channels
        if self.order is not None:
            return np.asarray(self.order, dtype=np.int64)
        if self.channel_orders is not None:
            fo = np.asarray(self.filter_order, dtype=np.int64)
            co = np.asarray(self.channel_orders, dtype=np.int64)
            return (fo[:, None] * C + co[fo]).reshape(-1)
        return np.arange(F * C, dtype=np.int64)


@dataclass
class PermutationMap:
    variant: str = "none"
    layers: list[LayerPermutation] = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PermutationError(f"unknown variant {self.variant!r}")

    def flat_order(self, i: int, filters: int, channels: int) -> np.ndarray:
        """Order for the i-th predictable layer; the empty map is the identity."""
        if self.variant == "none" or not self.layers:
            return np.arange(filters * channels, dtype=np.int64)
        lp = self.layers[i]
        if (lp.filters, lp.channels) != (filters, channels):
            raise PermutationError(f"layer {i}: map is {lp.filters}x{lp.channels}, weights are {filters}x{channels}")
        return lp.flat_order()

    def validate(self) -> None:
        for i, lp in enumerate(self.layers):
            F, C = lp.filters, lp.channels
            if lp.order is not None and not _is_perm(lp.order, F * C):
                raise PermutationError(f"layer {i}: order is not a bijection")
            if lp.channel_orders is not None:
                if lp.filter_order is None or not _is_perm(lp.filter_order, F):
                    raise PermutationError(f"layer {i}: filter order is not a bijection")
                if any(not _is_perm(row, C) for row in np.asarray(lp.channel_orders)):
                    raise PermutationError(f"layer {i}: channel order is not a bijection")


def _is_perm(a, n: int) -> bool:
    a = np.asarray(a)
    return a.shape == (n,) and np.array_equal(np.sort(a), np.arange(n))


def _predictable_weights(source) -> list[np.ndarray]:
    if hasattr(source, "conv_weights"):
        return [source.conv_weights[i] for i in source.catalog.predictable]
    return [np.asarray(w) for w in source]


def compute_permutations(source, variant: str) -> PermutationMap:
    """Greedy smoothing order for every predictable layer.

    ``source`` is an OriginalNetwork or a list of per-layer [F, C, k, k] weights.
    """
    if variant not in ("in_filter", "cross_filter"):
        raise PermutationError(f"variant must be in_filter or cross_filter, got {variant!r}")
    layers = []
    for w in _predictable_weights(source):
        F, C = w.shape[:2]
        flat = _flat_kernels(w)
        if variant == "cross_filter":
            order = np.asarray(greedy_hamiltonian(distance_matrix(flat)), dtype=np.int64)
            layers.append(LayerPermutation(F, C, order=order))
            continue
        per_filter = flat.reshape(F, C, -1)
        chan = np.empty((F, C), dtype=np.int64)
        for f in range(F):
            chan[f] = greedy_hamiltonian(distance_matrix(per_filter[f]))
        aligned = np.stack([per_filter[f, chan[f]] for f in range(F)])  # [F, C, kk]
        fd = np.zeros((F, F))
        for j in range(C):
            fd += distance_matrix(aligned[:, j])
        forder = np.asarray(greedy_hamiltonian(fd), dtype=np.int64)
        layers.append(LayerPermutation(F, C, channel_orders=chan, filter_order=forder))
    return PermutationMap(variant, layers)


def permute(weights: Sequence[np.ndarray], pmap: PermutationMap) -> list[np.ndarray]:
    """Rearrange per-layer weights into prediction order."""
    out = []
    for i, w in enumerate(weights):
        w = np.asarray(w)
        F, C = w.shape[:2]
        order = pmap.flat_order(i, F, C)
        flat = w.reshape(F * C, *w.shape[2:])
        out.append(flat[order].reshape(w.shape))
    return out


def invert(weights: Sequence[np.ndarray], pmap: PermutationMap) -> list[np.ndarray]:
    """Undo :func:`permute`: put prediction-order kernels back in their original slots."""
    out = []
    for i, w in enumerate(weights):
        w = np.asarray(w)
        F, C = w.shape[:2]
        order = pmap.flat_order(i, F, C)
        flat = w.reshape(F * C, *w.shape[2:])
        res = np.empty_like(flat)
        res[order] = flat
        out.append(res.reshape(w.shape))
    return out


def inverse_order(order: np.ndarray) -> np.ndarray:
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order), dtype=order.dtype)
    return inv


# -- overhead accounting ---------------------------------------------------------------
def layer_bits(filters: int, channels: int, variant: str) -> float:
    """Storage cost of one layer's ordering, using real-valued log2."""
    F, C = filters, channels
    if variant == "cross_filter":
        return F * C * (math.log2(F) + math.log2(C))
    if variant == "in_filter":
        return F * C * math.log2(C) + F * math.log2(F)
    if variant == "none":
        return 0.0
    raise PermutationError(f"unknown variant {variant!r}")


def _field_bits(n: int) -> int:
    return max(0, math.ceil(math.log2(n))) if n > 1 else 0


def layer_codec_bits(filters: int, channels: int, variant: str) -> int:
    F, C = filters, channels
    if variant == "cross_filter":
        return F * C * _field_bits(F * C)
    if variant == "in_filter":
        return F * C * _field_bits(C) + F * _field_bits(F)
    return 0


@dataclass(frozen=True)
class BitCostReport:
    variant: str
    bits_per_layer: list[float]
    total_mb: float
    overhead_percent: float
    codec_bytes: int
    codec_mb: float

    def line(self) -> str:
        return f"{self.total_mb:.3f} MB {self.overhead_percent:.2f}%"


def permutation_bit_cost(catalog, variant: str) -> BitCostReport:
    """Overhead of storing orderings for the predictable layers of ``catalog``."""
    from .zoo import MB, size_report

    specs = [catalog.layers[i] for i in catalog.predictable]
    bits = [layer_bits(s.filters, s.channels, variant) for s in specs]
    total_mb = sum(bits) / 8 / MB
    codec = sum(math.ceil(layer_codec_bits(s.filters, s.channels, variant) / 8) for s in specs)
    percent = total_mb / size_report(catalog).total_mb * 100
    return BitCostReport(variant, bits, total_mb, percent, codec, codec / MB)


# -- codec -------------------------------------------------------------------------
def _check_range(values, n: int) -> None:
    values = np.asarray(values)
    if values.size and (values.min() < 0 or values.max() >= n):
        raise PermutationError(f"index out of range [0, {n})")


def serialize(pmap: PermutationMap) -> bytes:
    """``NRP1 | variant u8 | u32 layers | per layer: u32 F, u32 C, packed indices``."""
    layers = [] if pmap.variant == "none" else pmap.layers
    out = bytearray(PERM_MAGIC)
    out += struct.pack("<BI", _VARIANT_CODES[pmap.variant], len(layers))
    for lp in layers:
        F, C = lp.filters, lp.channels
        out += struct.pack("<II", F, C)
        if pmap.variant == "cross_filter":
            _check_range(lp.order, F * C)
            payload = np.packbits(_bits(np.asarray(lp.order), _field_bits(F * C)), bitorder="little").tobytes()
        else:
            _check_range(lp.channel_orders, C)
            _check_range(lp.filter_order, F)
            # one contiguous bit stream: channel indices then filter indices
            wc, wf = _field_bits(C), _field_bits(F)
            chan_bits = _bits(np.asarray(lp.channel_orders).reshape(-1), wc)
            filt_bits = _bits(np.asarray(lp.filter_order), wf)
            payload = np.packbits(np.concatenate([chan_bits, filt_bits]), bitorder="little").tobytes()
        expected = math.ceil(layer_codec_bits(F, C, pmap.variant) / 8)
        assert len(payload) == expected
        out += payload
    return bytes(out)


def _bits(values: np.ndarray, width: int) -> np.ndarray:
    if width == 0 or len(values) == 0:
        return np.zeros(0, dtype=np.uint8)
    v = np.asarray(values, dtype=np.uint64)
    return ((v[:, None] >> np.arange(width, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8).reshape(-1)


def deserialize(buf: bytes) -> PermutationMap:
    if len(buf) < 9 or buf[:4] != PERM_MAGIC:
        raise PermutationError("not a permutation file (bad magic or truncated header)")
    code, count = struct.unpack_from("<BI", buf, 4)
    if code >= len(VARIANTS):
        raise PermutationError(f"unknown variant code {code}")
    variant = VARIANTS[code]
    pos = 9
    layers = []
    for i in range(count):
        if len(buf) < pos + 8:
            raise PermutationError(f"truncated stream in layer {i} header")
        F, C = struct.unpack_from("<II", buf, pos)
        pos += 8
        nbytes = math.ceil(layer_codec_bits(F, C, variant) / 8)
        if len(buf) < pos + nbytes:
            raise PermutationError(f"truncated stream in layer {i} payload")
        payload = buf[pos : pos + nbytes]
        pos += nbytes
        if variant == "cross_filter":
            bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
            order = _from_bits(bits[: F * C * _field_bits(F * C)], F * C, _field_bits(F * C))
            _check_range(order, F * C)
            layers.append(LayerPermutation(F, C, order=order))
        else:
            wc, wf = _field_bits(C), _field_bits(F)
            bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
            cb, fb = bits[: F * C * wc], bits[F * C * wc : F * C * wc + F * wf]
            chan = _from_bits(cb, F * C, wc).reshape(F, C)
            forder = _from_bits(fb, F, wf)
            _check_range(chan, C)
            _check_range(forder, F)
            layers.append(LayerPermutation(F, C, channel_orders=chan, filter_order=forder))
    if pos != len(buf):
        raise PermutationError(f"{len(buf) - pos} trailing bytes after last layer")
    pmap = PermutationMap(variant, layers)
    pmap.validate()
    return pmap


def _from_bits(bits: np.ndarray, count: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(count, dtype=np.int64)
    weights = np.uint64(1) << np.arange(width, dtype=np.uint64)
    return (bits.reshape(count, width).astype(np.uint64) * weights).sum(axis=1).astype(np.int64)


def save_permutations(path, pmap: PermutationMap) -> bytes:
    data = serialize(pmap)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_permutations(path) -> PermutationMap:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
