"""Experiment configs, end-to-end pipelines and the seed-matrix runner."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingConfig
from .predictor import NernPredictor, init_nern
from .smoothness import PermutationMap, compute_permutations
from .store import ArtifactError, config_hash, load_checkpoint, save_checkpoint
from .trainer import SamplingStrategy, TrainConfig, TrainState, reconstructed_accuracy, train_nern
from .zoo import Dataset, OriginalNetwork, build_network, get_catalog, make_bars_dataset, train_original

CONFIG_VERSION = 1
SMOOTHNESS_MODES = ("none", "regularized", "permuted")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str = "default"
    catalog: str = "desk3"
    hidden: int = 64
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    smoothness: str = "none"
    smoothness_lambda: float = 0.0
    perm_variant: str = "in_filter"
    train: TrainConfig = field(default_factory=TrainConfig)
    data_seed: int = 0
    data_noise: float = 0.3
    original_seed: int = 0
    original_epochs: int = 30
    prune_factors: tuple = ()

    def __post_init__(self):
        if self.smoothness not in SMOOTHNESS_MODES:
            raise ConfigError(f"smoothness must be one of {SMOOTHNESS_MODES}, got {self.smoothness!r}")
        if self.smoothness == "regularized" and not self.smoothness_lambda > 0:
            raise ConfigError("regularized mode needs smoothness_lambda > 0")
        if self.smoothness == "permuted" and self.perm_variant not in ("cross_filter", "in_filter"):
            raise ConfigError(f"permuted mode needs variant cross_filter or in_filter, got {self.perm_variant!r}")
        if self.hidden < 1:
            raise ConfigError("hidden must be positive")

    @property
    def reg_lambda(self) -> float:
        return self.smoothness_lambda if self.smoothness == "regularized" else 0.0

    @property
    def variant(self) -> str:
        return self.perm_variant if self.smoothness == "permuted" else "none"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prune_factors"] = list(self.prune_factors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if isinstance(d.get("embedding"), dict):
            d["embedding"] = EmbeddingConfig(**d["embedding"])
        if isinstance(d.get("train"), dict):
            d["train"] = TrainConfig.from_dict(d["train"])
        d["prune_factors"] = tuple(d.get("prune_factors", ()))
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


# -- config files ---------------------------------------------------------------
def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _apply(obj, items: dict, section: str):
    known = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    upd = {}
    for k, v in items.items():
        if k not in known or dataclasses.is_dataclass(known[k]):
            raise ConfigError(f"unknown key [{section}] {k}")
        upd[k] = _coerce(v, known[k], f"[{section}] {k}")
    try:
        return dataclasses.replace(obj, **upd)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse the sectioned key = value format (see README)."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    allowed = {"experiment", "embedding", "train", "sampling"}
    extra = set(cp.sections()) - allowed
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    version = int(exp.pop("version", CONFIG_VERSION))
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    try:
        sampling = _apply(SamplingStrategy(), dict(cp["sampling"]) if cp.has_section("sampling") else {}, "sampling")
        train = _apply(TrainConfig(sampling=sampling), dict(cp["train"]) if cp.has_section("train") else {}, "train")
        emb = _apply(EmbeddingConfig(), dict(cp["embedding"]) if cp.has_section("embedding") else {}, "embedding")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return _apply(ExperimentConfig(embedding=emb, train=train), exp, "experiment")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def format_config(cfg: ExperimentConfig) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return " ".join(repr(x) for x in v)
        return str(v)

    lines = ["[experiment]", f"version = {CONFIG_VERSION}"]
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if not dataclasses.is_dataclass(v):
            lines.append(f"{f.name} = {fmt(v)}")
    for section, obj in (("embedding", cfg.embedding), ("train", cfg.train), ("sampling", cfg.train.sampling)):
        lines.append(f"\n[{section}]")
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if not dataclasses.is_dataclass(v):
                lines.append(f"{f.name} = {fmt(v)}")
    return "\n".join(lines) + "\n"


# -- originals -----------------------------------------------------------------------
def original_key(cfg: ExperimentConfig) -> dict:
    return {
        "catalog": cfg.catalog,
        "seed": cfg.original_seed,
        "lambda": cfg.reg_lambda,
        "epochs": cfg.original_epochs,
        "data_seed": cfg.data_seed,
        "data_noise": cfg.data_noise,
    }


def dataset_for(cfg: ExperimentConfig) -> Dataset:
    return make_bars_dataset(cfg.data_seed, noise=cfg.data_noise)


_ORIGINALS: dict[str, OriginalNetwork] = {}


def get_original(cfg: ExperimentConfig, data: Dataset | None = None, cache_dir=None) -> OriginalNetwork:
    """Train (or fetch from memory / ``cache_dir``) the original network a config points at."""
    key = original_key(cfg)
    h = config_hash(key)
    if h in _ORIGINALS:
        return _ORIGINALS[h]
    if cache_dir is not None and (Path(cache_dir) / h).exists():
        net = load_original(Path(cache_dir) / h)
    else:
        data = data or dataset_for(cfg)
        net = build_network(get_catalog(cfg.catalog), cfg.original_seed)
        net = train_original(net, data, cfg.reg_lambda, epochs=cfg.original_epochs)
        if cache_dir is not None:
            save_original(Path(cache_dir) / h, net, key)
    _ORIGINALS[h] = net
    return net


def save_original(directory, net: OriginalNetwork, key: dict | None = None) -> Path:
    arrays = {}
    for i, (w, b) in enumerate(zip(net.conv_weights, net.conv_biases)):
        arrays[f"conv{i}.weight"] = w
        arrays[f"conv{i}.bias"] = b
    arrays["head.weight"] = net.head_weight
    arrays["head.bias"] = net.head_bias
    manifest = {
        "kind": "original_network",
        "catalog": net.catalog.to_dict(),
        "seed": net.seed,
        "metrics": net.metrics,
        "key": key or {},
    }
    manifest["config_hash"] = config_hash({"catalog": manifest["catalog"], "key": manifest["key"]})
    return save_checkpoint(directory, manifest, arrays)


def load_original(directory) -> OriginalNetwork:
    from .zoo import ArchCatalog

    manifest, arrays = load_checkpoint(directory)
    if manifest.get("kind") != "original_network":
        raise ArtifactError(f"{directory} is not an original-network checkpoint")
    cat = ArchCatalog.from_dict(manifest["catalog"])
    n = len(cat.layers)
    try:
        return OriginalNetwork(
            cat,
            [arrays[f"conv{i}.weight"] for i in range(n)],
            [arrays[f"conv{i}.bias"] for i in range(n)],
            arrays["head.weight"],
            arrays["head.bias"],
            manifest.get("seed", 0),
            manifest.get("metrics", {}),
        )
    except KeyError as exc:
        raise ArtifactError(f"checkpoint {directory} lacks tensor {exc}") from exc


# -- predictor persistence ---------------------------------------------------------
def load_predictor(directory) -> tuple[NernPredictor, dict]:
    manifest, arrays = load_checkpoint(directory)
    if manifest.get("kind") != "nern_predictor":
        raise ArtifactError(f"{directory} is not a predictor checkpoint")
    pc = manifest["predictor"]
    emb = EmbeddingConfig(**pc["embedding"])
    dtype = next(iter(arrays.values())).dtype
    pred = NernPredictor(emb, pc["hidden"], pc["k_max"], pc["seed"], dtype)
    try:
        pred.load_state_dict(arrays)
    except KeyError as exc:
        raise ArtifactError(f"checkpoint {directory} lacks tensor {exc}") from exc
    return pred, manifest


# -- single run ------------------------------------------------------------------------
@dataclass
class RunResult:
    state: TrainState
    pmap: PermutationMap
    metrics: dict


def run_single(cfg: ExperimentConfig, seed: int | None = None, cache_dir=None) -> RunResult:
    """Original (cached) -> permutations -> init -> train; returns the final metrics."""
    if seed is not None:
        cfg = cfg.with_seed(seed)
    data = dataset_for(cfg)
    net = get_original(cfg, data, cache_dir)
    pmap = compute_permutations(net, cfg.variant) if cfg.variant != "none" else PermutationMap()
    pred = init_nern(net.catalog, net.weight_stats(), cfg.hidden, cfg.embedding, seed=cfg.train.seed)
    state = TrainState(pred, net, data, cfg.train, pmap=pmap)
    train_nern(state)
    last = state.metrics[-1] if state.metrics else {}
    metrics = {
        "original_acc": net.accuracy(data.x_test, data.y_test),
        "recon_acc": reconstructed_accuracy(pred, net, data, pmap),
        "recon_loss": last.get("recon_loss", float("nan")),
        "kd_loss": last.get("kd_loss", float("nan")),
        "fmd_loss": last.get("fmd_loss", float("nan")),
    }
    return RunResult(state, pmap, metrics)


# -- matrix ----------------------------------------------------------------------------
def mean_ci(values) -> tuple[float, float]:
    """Mean and 1.96 * sample std / sqrt(n); the CI is nan for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), float("nan")
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


def run_experiment_matrix(configs, seeds=(0, 1, 2, 3), runner=None, path=None) -> list[dict]:
    """Run every config at every seed and aggregate each metric as mean (and CI).

    ``runner(cfg, seed) -> dict`` defaults to the full training pipeline.  A
    failing sub-run is counted in ``failures`` and the matrix continues.  With a
    single seed no CI columns are produced.
    """
    configs = list(configs)
    if not configs:
        raise ConfigError("experiment matrix needs at least one config")
    seeds = list(seeds)
    runner = runner or (lambda c, s: run_single(c, s).metrics)
    with_ci = len(seeds) > 1
    table = []
    for cfg in configs:
        per_metric: dict[str, list[float]] = {}
        errors = []
        for s in seeds:
            try:
                res = runner(cfg, s)
            except Exception as exc:  # recorded, matrix continues
                errors.append(f"seed {s}: {type(exc).__name__}: {exc}")
                continue
            for k, v in res.items():
                per_metric.setdefault(k, []).append(float(v))
        row = {"config": cfg.name, "n": len(seeds) - len(errors), "failures": len(errors)}
        for k, vals in per_metric.items():
            m, ci = mean_ci(vals)
            row[f"{k}_mean"] = m
            if with_ci:
                row[f"{k}_ci"] = ci
        row["errors"] = "; ".join(errors)
        table.append(row)
    if path is not None:
        write_matrix_csv(path, table)
    return table


def write_matrix_csv(path, table: list[dict]) -> None:
    fields: list[str] = []
    for row in table:
        for k in row:
            if k not in fields:
                fields.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in table:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
