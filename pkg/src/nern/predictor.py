"""The weight predictor: an MLP from kernel-coordinate embeddings to kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .embedding import EmbeddingConfig, embed_many
from .smoothness import PermutationMap, inverse_order
from .zoo import ArchCatalog, OriginalNetwork, params_to_mb

NUM_LAYERS = 5
INIT_TOLERANCE = 0.2


class InitError(RuntimeError):
    pass


def prediction_coords(catalog: ArchCatalog) -> np.ndarray:
    """[K, 3] rows (l, f, c) over predictable layers, l counted among predictable layers."""
    rows = []
    for l, i in enumerate(catalog.predictable):
        spec = catalog.layers[i]
        f, c = np.meshgrid(np.arange(spec.filters), np.arange(spec.channels), indexing="ij")
        rows.append(np.stack([np.full(f.size, l), f.ravel(), c.ravel()], axis=1))
    return np.concatenate(rows).astype(np.int64)


def layer_offsets(catalog: ArchCatalog) -> np.ndarray:
    sizes = [catalog.layers[i].num_kernels for i in catalog.predictable]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def crop_columns(k_max: int, k: int) -> np.ndarray:
    """Flat indices of the centred k x k window inside a k_max x k_max output."""
    off = (k_max - k) // 2
    r = np.arange(off, off + k)
    return (r[:, None] * k_max + r[None, :]).ravel()


class NernPredictor:
    """Five dense layers: four ReLU hidden layers of width ``hidden`` and a linear output."""

    def __init__(self, embedding: EmbeddingConfig, hidden: int, k_max: int, seed: int = 0, dtype=np.float32):
        self.embedding = embedding
        self.hidden = hidden
        self.k_max = k_max
        self.seed = seed
        rng = np.random.default_rng(seed)
        dims = [embedding.dim] + [hidden] * (NUM_LAYERS - 1) + [k_max * k_max]
        self.weights: list[ad.Tensor] = []
        self.biases: list[ad.Tensor] = []
        for din, dout in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, math.sqrt(2.0 / din), size=(dout, din))
            self.weights.append(ad.Tensor(w.astype(dtype), requires_grad=True))
            self.biases.append(ad.Tensor(np.zeros(dout, dtype=dtype), requires_grad=True))
        self._embed_cache: dict[tuple, np.ndarray] = {}

    @property
    def params(self) -> list[ad.Tensor]:
        return self.weights + self.biases

    def embeddings(self, coords: np.ndarray) -> np.ndarray:
        key = (coords.shape, coords.tobytes())
        hit = self._embed_cache.get(key)
        if hit is None:
            hit = embed_many(coords, self.embedding).astype(self.weights[0].dtype)
            self._embed_cache = {key: hit}
        return hit

    def forward(self, coords: np.ndarray) -> ad.Tensor:
        """Predicted kernels for an [n, 3] coordinate array, shaped [n, k_max^2]."""
        h = ad.Tensor(self.embeddings(np.asarray(coords)))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.dense(h, w, b)
            if i < NUM_LAYERS - 1:
                h = ad.relu(h)
        return h

    def predict_kernel(self, coord) -> ad.Tensor:
        out = self.forward(np.asarray([coord]))
        return ad.reshape(out, (self.k_max, self.k_max))

    # -- bookkeeping ----------------------------------------------------------
    def num_params(self, include_output: bool = True) -> int:
        ws = self.weights if include_output else self.weights[:-1]
        bs = self.biases if include_output else self.biases[:-1]
        return sum(t.size for t in ws + bs)

    def size_mb(self, include_output: bool = True) -> float:
        return params_to_mb(self.num_params(include_output))

    def state_dict(self) -> dict[str, np.ndarray]:
        d = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            d[f"fc{i}.weight"] = w.data
            d[f"fc{i}.bias"] = b.data
        return d

    def load_state_dict(self, d: dict[str, np.ndarray]) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w.data = np.array(d[f"fc{i}.weight"], dtype=w.dtype)
            b.data = np.array(d[f"fc{i}.bias"], dtype=b.dtype)

    def copy(self) -> "NernPredictor":
        other = NernPredictor.__new__(NernPredictor)
        other.embedding, other.hidden, other.k_max, other.seed = self.embedding, self.hidden, self.k_max, self.seed
        other.weights = [ad.Tensor(w.data.copy(), requires_grad=True) for w in self.weights]
        other.biases = [ad.Tensor(b.data.copy(), requires_grad=True) for b in self.biases]
        other._embed_cache = dict(self._embed_cache)
        return other

    def config(self) -> dict:
        return {
            "hidden": self.hidden,
            "k_max": self.k_max,
            "seed": self.seed,
            "embedding": {
                "base": self.embedding.base,
                "num_frequencies": self.embedding.num_frequencies,
                "regime": self.embedding.regime,
            },
        }


def _predicted_scalars(predictor: NernPredictor, catalog: ArchCatalog) -> np.ndarray:
    out = predictor.forward(prediction_coords(catalog)).data
    offs = layer_offsets(catalog)
    parts = []
    for l, i in enumerate(catalog.predictable):
        cols = crop_columns(predictor.k_max, catalog.layers[i].kernel)
        parts.append(out[offs[l] : offs[l + 1]][:, cols].ravel())
    return np.concatenate(parts).astype(np.float64)


def init_nern(
    catalog: ArchCatalog,
    weight_stats: tuple[float, float],
    hidden: int,
    embedding: EmbeddingConfig | None = None,
    seed: int = 0,
    dtype=np.float32,
) -> NernPredictor:
    """Build a predictor whose initial outputs share the original weights' mean and std.

    Hidden layers keep their fan-in scaling; the output layer is rescaled and
    its bias shifted after measuring the outputs over every catalog coordinate.
    """
    mean, std = weight_stats
    if not std > 0:
        raise InitError(f"target weight std must be positive, got {std}")
    pred = NernPredictor(embedding or EmbeddingConfig(), hidden, catalog.k_max, seed, dtype)
    pred.biases[-1].data[:] = 0
    raw = _predicted_scalars(pred, catalog)
    raw_std = raw.std()
    if raw_std == 0:
        raise InitError("predictor outputs are constant at init")
    pred.weights[-1].data *= dtype(std / raw_std)
    scaled = _predicted_scalars(pred, catalog)
    pred.biases[-1].data[:] = dtype(mean - scaled.mean())
    got = _predicted_scalars(pred, catalog)
    scale = max(abs(mean), std)
    if abs(got.std() - std) > INIT_TOLERANCE * std or abs(got.mean() - mean) > INIT_TOLERANCE * scale:
        raise InitError(f"init calibration failed: got mean {got.mean():.4g} std {got.std():.4g}")
    return pred


class OraclePredictor:
    """Stands in for a predictor and emits the original kernels in prediction order.

    Kernels smaller than ``k_max`` are written into the centre of a zero block.
    """

    def __init__(self, net: OriginalNetwork, pmap: PermutationMap | None = None):
        cat = net.catalog
        self.k_max = cat.k_max
        rows = []
        pmap = pmap or PermutationMap()
        for l, i in enumerate(cat.predictable):
            spec = cat.layers[i]
            order = pmap.flat_order(l, spec.filters, spec.channels)
            flat = net.conv_weights[i].reshape(spec.num_kernels, -1)[order]
            block = np.zeros((spec.num_kernels, self.k_max**2), dtype=flat.dtype)
            block[:, crop_columns(self.k_max, spec.kernel)] = flat
            rows.append(block)
        self.table = np.concatenate(rows)
        self._coords = prediction_coords(cat)
        self._offsets = layer_offsets(cat)
        self._filters_channels = [(cat.layers[i].filters, cat.layers[i].channels) for i in cat.predictable]

    def forward(self, coords: np.ndarray) -> ad.Tensor:
        coords = np.asarray(coords)
        idx = [self._offsets[l] + f * self._filters_channels[l][1] + c for l, f, c in coords]
        return ad.Tensor(self.table[np.asarray(idx)], requires_grad=True)


def reconstruct_network(predictor, catalog: ArchCatalog, pmap: PermutationMap | None = None, original: OriginalNetwork | None = None):
    """Reconstructed conv weights for every catalog layer (Tensors).

    Prediction slot p of a layer lands in original kernel slot ``order[p]``;
    kernels smaller than ``k_max`` take the centred crop.  Non-predictable
    layers are copied from ``original``.
    """
    pmap = pmap or PermutationMap()
    table = predictor.forward(prediction_coords(catalog))
    offs = layer_offsets(catalog)
    out: list = [None] * len(catalog.layers)
    for l, i in enumerate(catalog.predictable):
        spec = catalog.layers[i]
        inv = inverse_order(pmap.flat_order(l, spec.filters, spec.channels))
        rows = offs[l] + inv
        cols = crop_columns(predictor.k_max, spec.kernel)
        w = ad.getitem(table, (rows[:, None], cols[None, :]))
        out[i] = ad.reshape(w, spec.shape)
    for i, spec in enumerate(catalog.layers):
        if out[i] is None:
            if original is None:
                raise ValueError(f"layer {spec.name} is not predictable and no original network was given")
            out[i] = ad.Tensor(original.conv_weights[i])
    return out


def reconstructed_arrays(predictor, catalog: ArchCatalog, pmap=None, original=None) -> list[np.ndarray]:
    return [w.data for w in reconstruct_network(predictor, catalog, pmap, original)]
