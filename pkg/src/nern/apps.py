"""Applications of a trained predictor: weight importance, predictor pruning,
and image exports of activations and kernels."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .predictor import reconstructed_arrays
from .zoo import Dataset, OriginalNetwork

PROBE_SIZE = 64


class GridError(ValueError):
    pass


# -- weight importance ---------------------------------------------------------
@dataclass(frozen=True)
class FilterRecord:
    layer: int
    filter: int
    error: float
    rank: int


@dataclass
class ImportanceReport:
    records: list[FilterRecord]

    def top(self, n: int = 10) -> list[FilterRecord]:
        """Best reconstructed (lowest relative error) filters."""
        return self.records[:n]

    def bottom(self, n: int = 10) -> list[FilterRecord]:
        return self.records[-n:] if n else []

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "filter", "relative_error", "rank"])
            for r in self.records:
                w.writerow([r.layer, r.filter, repr(r.error), r.rank])


def filter_relative_errors(W: np.ndarray, W_hat: np.ndarray) -> np.ndarray:
    """||W_f - W_hat_f|| / ||W_f|| per filter; inf where the original filter is all zero."""
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if W.shape != W_hat.shape:
        raise ValueError(f"shape mismatch {W.shape} vs {W_hat.shape}")
    F = W.shape[0]
    num = np.linalg.norm((W - W_hat).reshape(F, -1), axis=1)
    den = np.linalg.norm(W.reshape(F, -1), axis=1)
    out = np.full(F, np.inf)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def weight_importance(W: np.ndarray, W_hat: np.ndarray, layer: int = 0) -> ImportanceReport:
    """Rank filters by relative reconstruction error, ascending; zero-norm filters go last."""
    err = filter_relative_errors(W, W_hat)
    order = np.argsort(err, kind="stable")
    recs = [FilterRecord(layer, int(f), float(err[f]), rank) for rank, f in enumerate(order, start=1)]
    return ImportanceReport(recs)


def network_importance(predictor, net: OriginalNetwork, layer: int, pmap=None) -> ImportanceReport:
    """Importance for catalog layer ``layer`` of ``net`` under ``predictor``."""
    recon = reconstructed_arrays(predictor, net.catalog, pmap, net)
    return weight_importance(net.conv_weights[layer], recon[layer], layer)


# -- images --------------------------------------------------------------------
def normalize_u8(a: np.ndarray) -> np.ndarray:
    """Min-max to 0..255; a constant array maps to uniform mid-gray."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if not hi > lo:
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def write_pgm(path, img: np.ndarray) -> Path:
    p = Path(path)
    p.write_bytes(pgm_bytes(img))
    return p


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    # exactly one whitespace byte separates the header from the raster
    return np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def probe_batch(data: Dataset, size: int = PROBE_SIZE) -> np.ndarray:
    """Fixed probe inputs: the first ``size`` test samples."""
    return data.x_test[:size]


def average_activations(net: OriginalNetwork, layer: int, filters, probe: np.ndarray, conv_weights=None) -> dict[int, np.ndarray]:
    """Mean post-ReLU feature map over the probe batch for each requested filter."""
    if not net.catalog.layers[layer].predictable:
        raise ValueError(f"layer {layer} has no activation tap")
    tap = net.catalog.predictable.index(layer)
    _, acts = net.forward(probe, conv_weights=conv_weights, taps=True)
    a = acts[tap].data
    out = {}
    for f in filters:
        if not 0 <= f < a.shape[1]:
            raise ValueError(f"filter {f} out of range for layer {layer} with {a.shape[1]} filters")
        out[int(f)] = a[:, f].mean(axis=0)
    return out


def avg_activation_export(net: OriginalNetwork, layer: int, filters, probe: np.ndarray, out_dir=None, prefix: str = "act", conv_weights=None) -> dict[int, np.ndarray]:
    """Per-filter mean activation maps as 8-bit grayscale; written as PGM when ``out_dir`` is set."""
    maps = average_activations(net, layer, filters, probe, conv_weights)
    imgs = {f: normalize_u8(m) for f, m in maps.items()}
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for f, img in imgs.items():
            write_pgm(d / f"{prefix}_l{layer}_f{f}.pgm", img)
    return imgs


def kernel_grid(weights: np.ndarray, channel: int | None = 0, rows: int = 8, cols: int = 8, gap_value: int = 255) -> np.ndarray:
    """Tile kernels into a rows x cols image with 1-px separators.

    With ``channel`` set, the kernels are ``weights[f, channel]`` for successive
    filters; with ``channel=None`` all kernels are taken in (filter, channel) order.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 4:
        raise GridError(f"expected [F, C, k, k] weights, got shape {w.shape}")
    if channel is None:
        ks = w.reshape(-1, w.shape[2], w.shape[3])
    else:
        if not 0 <= channel < w.shape[1]:
            raise GridError(f"channel {channel} out of range ({w.shape[1]} channels)")
        ks = w[:, channel]
    need = rows * cols
    if len(ks) < need:
        raise GridError(f"grid {rows}x{cols} needs {need} kernels, only {len(ks)} available")
    ks = ks[:need]
    kh, kw = ks.shape[1:]
    tiles = normalize_u8(ks)
    img = np.full((rows * kh + rows - 1, cols * kw + cols - 1), gap_value, dtype=np.uint8)
    for i in range(need):
        r, c = divmod(i, cols)
        img[r * (kh + 1) : r * (kh + 1) + kh, c * (kw + 1) : c * (kw + 1) + kw] = tiles[i]
    return img


def export_kernel_grid(weights: np.ndarray, path, channel: int | None = 0, rows: int = 8, cols: int = 8) -> np.ndarray:
    img = kernel_grid(weights, channel, rows, cols)
    write_pgm(path, img)
    return img


# -- predictor pruning ---------------------------------------------------------
def _prune_mask(values: np.ndarray, factor: float) -> np.ndarray:
    k = math.floor(factor * values.size)
    mask = np.zeros(values.size, dtype=bool)
    if k:
        mask[np.argsort(np.abs(values), kind="stable")[:k]] = True
    return mask


def prune_predictor(predictor, factor: float, per_layer: bool = False):
    """Zero the floor(factor * n) smallest-magnitude weight scalars (biases untouched).

    Global by default; ties resolve toward the earlier parameter in
    (layer, row-major) order.  Returns a pruned copy.
    """
    if not 0.0 <= factor <= 1.0:
        raise ValueError(f"pruning factor must be in [0, 1], got {factor}")
    out = predictor.copy()
    if per_layer:
        for w in out.weights:
            flat = w.data.reshape(-1)
            flat[_prune_mask(flat, factor)] = 0
        return out
    flat = np.concatenate([w.data.reshape(-1) for w in out.weights])
    mask = _prune_mask(flat, factor)
    start = 0
    for w in out.weights:
        n = w.data.size
        w.data.reshape(-1)[mask[start : start + n]] = 0
        start += n
    return out


def pruning_sweep(predictor, net: OriginalNetwork, data: Dataset, factors, pmap=None, per_layer: bool = False, path=None) -> list[tuple[float, float]]:
    """(factor, reconstructed test accuracy) for each pruning factor."""
    rows = []
    for p in factors:
        pruned = prune_predictor(predictor, float(p), per_layer)
        weights = reconstructed_arrays(pruned, net.catalog, pmap, net)
        rows.append((float(p), net.accuracy(data.x_test, data.y_test, conv_weights=weights)))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["factor", "accuracy"])
            w.writerows(rows)
    return rows
