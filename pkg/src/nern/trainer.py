"""Predictor training: reconstruction + distillation objective, weight sampling,
optimizer and schedule."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .predictor import NernPredictor, layer_offsets, reconstruct_network
from .smoothness import PermutationMap
from .store import config_hash, save_checkpoint
from .zoo import ArchCatalog, Dataset, OriginalNetwork

log = logging.getLogger(__name__)

SAMPLING_KINDS = ("all", "random_layer", "uniform_batch", "magnitude_mixed")
METRIC_FIELDS = ("iter", "recon_loss", "kd_loss", "fmd_loss", "lr", "eval_acc")
_TINY = 1e-12


class TrainingError(RuntimeError):
    def __init__(self, msg: str, last_good: dict | None = None):
        super().__init__(msg)
        self.last_good = last_good


class SamplingError(ValueError):
    pass


OPTIMIZERS = ("adam", "lookahead", "radam", "ranger")


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str = "magnitude_mixed"
    batch_size: int = 256
    p_uni: float = 0.8

    def __post_init__(self):
        if self.kind not in SAMPLING_KINDS:
            raise SamplingError(f"unknown sampling kind {self.kind!r}")
        if not 0.0 <= self.p_uni <= 1.0:
            raise SamplingError(f"p_uni must be in [0, 1], got {self.p_uni}")


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    use_recon: bool = True
    lr: float = 5e-3
    iterations: int = 5000
    cosine: bool = True
    task_batch: int = 64
    sampling: SamplingStrategy = field(default_factory=SamplingStrategy)
    noise_inputs: bool = False
    seed: int = 0
    distill_grad: str = "full"  # or "sampled_only"
    recon_mode: str = "l2"  # or "mse"
    optimizer: str = "adam"  # adam | lookahead | radam | ranger
    grad_clip: float = 1.0  # global gradient-norm cap, 0 disables
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.distill_grad not in ("full", "sampled_only"):
            raise ValueError(f"distill_grad must be full or sampled_only, got {self.distill_grad!r}")
        if self.recon_mode not in ("l2", "mse"):
            raise ValueError(f"recon_mode must be l2 or mse, got {self.recon_mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("sampling"), dict):
            d["sampling"] = SamplingStrategy(**d["sampling"])
        return cls(**d)


# -- losses -----------------------------------------------------------------------
def recon_loss(W, W_hat, coords, mode: str = "l2") -> ad.Tensor:
    """``||W_S - W_hat_S||_2 / |W_S|`` over the kernels at ``coords``.

    ``W`` and ``W_hat`` are per-predictable-layer lists ([F, C, k, k] arrays or
    Tensors); ``coords`` is an [n, 3] array of (l, f, c).
    """
    coords = np.asarray(coords)
    if coords.size == 0:
        raise SamplingError("empty sample set")
    diffs = []
    count = 0
    for l in np.unique(coords[:, 0]):
        sel = coords[coords[:, 0] == l]
        target = np.asarray(W[l].data if isinstance(W[l], ad.Tensor) else W[l])[sel[:, 1], sel[:, 2]]
        wh = W_hat[l] if isinstance(W_hat[l], ad.Tensor) else ad.Tensor(W_hat[l])
        pred = ad.getitem(wh, (sel[:, 1], sel[:, 2]))
        d = ad.reshape(pred - ad.Tensor(target.astype(wh.dtype)), (-1,))
        diffs.append(d)
        count += d.size
    diff = diffs[0] if len(diffs) == 1 else ad.concat(diffs)
    if mode == "mse":
        return ad.tsum(ad.square(diff)) * (1.0 / count)
    return ad.l2_norm(diff) * (1.0 / count)


def _unit_rows(a: ad.Tensor) -> ad.Tensor:
    return a / ad.clamp_min(ad.l2_norm(a, axis=1, keepdims=True), _TINY)


def fmd_loss(original_acts, reconstructed_acts) -> ad.Tensor:
    """Batch mean over samples of the summed per-layer distance between unit-normalized feature maps."""
    if len(original_acts) != len(reconstructed_acts):
        raise ValueError("feature map layer sets differ")
    total = None
    B = None
    for a, ah in zip(original_acts, reconstructed_acts):
        a = a.data if isinstance(a, ad.Tensor) else np.asarray(a)
        ah = ah if isinstance(ah, ad.Tensor) else ad.Tensor(ah)
        if a.shape != ah.shape:
            raise ValueError(f"feature map shapes differ: {a.shape} vs {ah.shape}")
        B = a.shape[0]
        an = a.reshape(B, -1)
        norms = np.linalg.norm(an, axis=1, keepdims=True)
        an = np.where(norms > 0, an / np.where(norms > 0, norms, 1.0), 0.0).astype(ah.dtype)
        ahn = _unit_rows(ad.reshape(ah, (B, -1)))
        term = ad.tsum(ad.l2_norm(ahn - ad.Tensor(an), axis=1))
        total = term if total is None else total + term
    return total * (1.0 / B)


def kd_loss(original_logits, reconstructed_logits) -> ad.Tensor:
    """Batch mean KL(softmax(original) || softmax(reconstructed)), temperature 1."""
    t = original_logits if isinstance(original_logits, ad.Tensor) else ad.Tensor(original_logits)
    s = reconstructed_logits if isinstance(reconstructed_logits, ad.Tensor) else ad.Tensor(reconstructed_logits)
    return ad.kl_div_logits(t.detach(), s)


# -- sampling -----------------------------------------------------------------------
def kernel_table(catalog: ArchCatalog) -> np.ndarray:
    """[K, 3] (l, f, c) rows for all predictable kernels, original order."""
    from .predictor import prediction_coords

    return prediction_coords(catalog)


def _draw_without_replacement(rng, n: int, k: int, p_uni: float, probs: np.ndarray | None) -> np.ndarray:
    """Sequential draws from the mixture, each conditioned on not being taken yet.

    Candidates are generated in vectorized chunks and the first occurrence of
    each index is kept, which is rejection sampling against the taken set.
    Once half the population is taken the rest is drawn by explicit
    renormalization so rejection never stalls.
    """
    mix = np.full(n, 1.0 / n) if probs is None else p_uni / n + (1.0 - p_uni) * probs
    cdf = np.cumsum(mix)
    taken = np.zeros(n, dtype=bool)
    out: list[int] = []
    while len(out) < k and 2 * len(out) < n:
        cand = np.minimum(np.searchsorted(cdf, rng.random(2 * k) * cdf[-1], side="right"), n - 1)
        for j in cand.tolist():
            if not taken[j]:
                taken[j] = True
                out.append(j)
                if len(out) == k or 2 * len(out) >= n:
                    break
    while len(out) < k:
        free = np.flatnonzero(~taken)
        w = mix[free]
        j = int(free[rng.choice(len(free), p=w / w.sum())]) if w.sum() > 0 else int(free[rng.integers(len(free))])
        taken[j] = True
        out.append(j)
    return np.asarray(out, dtype=np.int64)


def sample_coordinates(strategy: SamplingStrategy, rng: np.random.Generator, catalog: ArchCatalog, magnitudes=None) -> np.ndarray:
    """Pick the kernels whose reconstruction error enters this step's loss.

    Returns an [n, 3] array of (l, f, c) rows without duplicates.
    """
    table = kernel_table(catalog)
    K = len(table)
    kind = strategy.kind
    if kind == "all":
        return table
    if kind == "random_layer":
        offs = layer_offsets(catalog)
        l = int(rng.integers(len(offs) - 1))
        return table[offs[l] : offs[l + 1]]
    if strategy.batch_size > K:
        raise SamplingError(f"batch of {strategy.batch_size} exceeds population of {K} kernels")
    if kind == "uniform_batch":
        return table[_draw_without_replacement(rng, K, strategy.batch_size, 1.0, None)]
    if magnitudes is None:
        raise SamplingError("magnitude_mixed sampling needs per-kernel magnitudes")
    mags = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in magnitudes])
    if mags.shape != (K,):
        raise SamplingError(f"expected {K} magnitudes, got {mags.shape}")
    probs = mags / mags.sum() if mags.sum() > 0 else None
    return table[_draw_without_replacement(rng, K, strategy.batch_size, strategy.p_uni, probs)]


def make_inputs(cfg: TrainConfig, rng: np.random.Generator, data: Dataset, batch: int | None = None) -> np.ndarray:
    """A task minibatch: training images without labels, or standard-normal noise."""
    batch = batch or cfg.task_batch
    if cfg.noise_inputs:
        return rng.standard_normal((batch,) + tuple(data.input_shape)).astype(np.float32)
    idx = rng.choice(len(data.x_train), size=batch, replace=False)
    return data.x_train[idx]


# -- optimizer ---------------------------------------------------------------------
class Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.params = list(params)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads, lr: float) -> None:
        self.t += 1
        if lr == 0:
            return
        b1, b2 = self.b1, self.b2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class RAdam(Adam):
    """Adam with variance rectification: momentum-only steps until the
    second-moment estimate is trustworthy, then a rectified adaptive step."""

    def step(self, grads, lr: float) -> None:
        self.t += 1
        if lr == 0:
            return
        b1, b2, t = self.b1, self.b2, self.t
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        rho_t = rho_inf - 2.0 * t * b2**t / (1.0 - b2**t)
        c1, c2 = 1 - b1**t, 1 - b2**t
        rect = None
        if rho_t > 5.0:
            rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if rect is None:
                p.data -= (lr * m / c1).astype(p.dtype)
            else:
                p.data -= (lr * rect * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def make_optimizer(kind: str, params):
    inner = RAdam(params) if kind in ("radam", "ranger") else Adam(params)
    return Lookahead(inner) if kind in ("lookahead", "ranger") else inner


class Lookahead:
    """Slow weights pulled toward the inner optimizer's fast weights every k steps."""

    def __init__(self, inner, k: int = 6, alpha: float = 0.5):
        self.inner, self.k, self.alpha = inner, k, alpha
        self.slow = [p.data.copy() for p in inner.params]
        self.count = 0

    @property
    def params(self):
        return self.inner.params

    def step(self, grads, lr: float) -> None:
        self.inner.step(grads, lr)
        if lr == 0:
            return
        self.count += 1
        if self.count % self.k == 0:
            for p, s in zip(self.inner.params, self.slow):
                s += self.alpha * (p.data - s)
                p.data[...] = s


def cosine_lr(step: int, total: int, lr_max: float, enabled: bool = True) -> float:
    """Cosine decay from lr_max at step 0 to 0 at step ``total``."""
    if not enabled or total <= 0:
        return lr_max
    t = min(max(step, 0), total)
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * t / total))


# -- training loop -------------------------------------------------------------------
@dataclass
class TrainState:
    predictor: NernPredictor
    net: OriginalNetwork
    data: Dataset
    cfg: TrainConfig
    pmap: PermutationMap = field(default_factory=PermutationMap)
    optimizer: object = None
    rng: np.random.Generator | None = None
    iteration: int = 0
    metrics: list = field(default_factory=list)
    magnitudes: list | None = None

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = make_optimizer(self.cfg.optimizer, self.predictor.params)
        if self.rng is None:
            self.rng = np.random.default_rng(self.cfg.seed)
        if self.magnitudes is None:
            self.magnitudes = self.net.kernel_magnitudes()


def _sample_mask(catalog: ArchCatalog, coords: np.ndarray) -> list[np.ndarray]:
    masks = [np.zeros((catalog.layers[i].filters, catalog.layers[i].channels, 1, 1), dtype=np.float32) for i in catalog.predictable]
    for l, f, c in coords:
        masks[l][f, c] = 1.0
    return masks


def compute_losses(state: TrainState, coords: np.ndarray, inputs: np.ndarray | None, predictor=None):
    """Forward pass for one step; returns (objective, recon, kd, fmd) with the last three as floats."""
    cfg, net = state.cfg, state.net
    cat = net.catalog
    predictor = predictor or state.predictor
    recon_w = reconstruct_network(predictor, cat, state.pmap, net)
    pred_idx = cat.predictable
    W = [net.conv_weights[i] for i in pred_idx]
    W_hat = [recon_w[i] for i in pred_idx]
    objective = None
    recon = recon_loss(W, W_hat, coords, cfg.recon_mode)
    if cfg.use_recon:
        objective = recon
    kd = fmd = None
    if inputs is not None and (cfg.alpha > 0 or cfg.beta > 0 or not cfg.use_recon):
        distill_w = recon_w
        if cfg.distill_grad == "sampled_only":
            masks = _sample_mask(cat, coords)
            distill_w = list(recon_w)
            for l, i in enumerate(pred_idx):
                m = masks[l]
                distill_w[i] = recon_w[i] * m + ad.Tensor(recon_w[i].data * (1.0 - m))
        t_logits, t_acts = net.forward(inputs, taps=True)
        s_logits, s_acts = net.forward(inputs, conv_weights=distill_w, taps=True)
        kd = kd_loss(t_logits, s_logits)
        fmd = fmd_loss(t_acts, s_acts)
        for coef, term in ((cfg.alpha, kd), (cfg.beta, fmd)):
            if coef > 0:
                objective = term * coef if objective is None else objective + term * coef
    return (
        objective,
        recon.item(),
        float("nan") if kd is None else kd.item(),
        float("nan") if fmd is None else fmd.item(),
    )


def train_step(state: TrainState) -> dict:
    cfg = state.cfg
    lr = cosine_lr(state.iteration, cfg.iterations, cfg.lr, cfg.cosine)
    coords = sample_coordinates(cfg.sampling, state.rng, state.net.catalog, state.magnitudes)
    need_inputs = cfg.alpha > 0 or cfg.beta > 0 or not cfg.use_recon
    inputs = make_inputs(cfg, state.rng, state.data) if need_inputs else None
    objective, recon, kd, fmd = compute_losses(state, coords, inputs)
    if objective is None:
        raise TrainingError("objective is empty: enable the reconstruction loss or a distillation term")
    if not np.isfinite(objective.item()):
        raise TrainingError(f"non-finite loss at iteration {state.iteration}")
    for p in state.predictor.params:
        p.zero_grad()
    grads = ad.backward(objective, state.predictor.params)
    if cfg.grad_clip > 0:
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
        if norm > cfg.grad_clip:
            grads = [g * (cfg.grad_clip / norm) for g in grads]
    state.optimizer.step(grads, lr)
    row = {"iter": state.iteration, "recon_loss": recon, "kd_loss": kd, "fmd_loss": fmd, "lr": lr, "eval_acc": ""}
    state.iteration += 1
    state.metrics.append(row)
    return row


def reconstructed_accuracy(predictor, net: OriginalNetwork, data: Dataset, pmap: PermutationMap | None = None) -> float:
    ws = [w.data for w in reconstruct_network(predictor, net.catalog, pmap, net)]
    return net.accuracy(data.x_test, data.y_test, ws)


def train_nern(state: TrainState, checkpoint_dir=None, progress=None) -> TrainState:
    """Run ``cfg.iterations`` steps; on a non-finite loss, re-raise with the last good parameters."""
    cfg = state.cfg
    last_good = state.predictor.state_dict()
    last_good = {k: v.copy() for k, v in last_good.items()}
    while state.iteration < cfg.iterations:
        try:
            row = train_step(state)
        except TrainingError as exc:
            if checkpoint_dir is not None:
                save_predictor(Path(checkpoint_dir) / "last_good", state, arrays=last_good)
            raise TrainingError(str(exc), last_good) from exc
        it = state.iteration
        if cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.iterations):
            row["eval_acc"] = reconstructed_accuracy(state.predictor, state.net, state.data, state.pmap)
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            last_good = {k: v.copy() for k, v in state.predictor.state_dict().items()}
            if checkpoint_dir is not None:
                save_predictor(checkpoint_dir, state)
        if progress is not None:
            progress(row)
    return state


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


def save_predictor(directory, state: TrainState, arrays=None, extra: dict | None = None):
    from .smoothness import serialize
    from .store import bytes_hash

    manifest = {
        "kind": "nern_predictor",
        "predictor": state.predictor.config(),
        "train": state.cfg.to_dict(),
        "catalog": state.net.catalog.name,
        "iteration": state.iteration,
        "permutation_variant": state.pmap.variant,
        "permutation_hash": bytes_hash(serialize(state.pmap)),
    }
    manifest["config_hash"] = config_hash({k: manifest[k] for k in ("predictor", "train", "catalog", "permutation_hash")})
    if extra:
        manifest.update(extra)
    return save_checkpoint(directory, manifest, arrays or state.predictor.state_dict())
