"""Command-line entry point: ``nern <subcommand> ...``.

Failures print one JSON line ``{"error": <code>, "message": <text>}`` on stderr
and exit with status 1 (2 for argument errors).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import apps
from .embedding import EmbeddingConfig, EmbeddingError, similarity_profile, write_profile_csv
from .experiments import (
    ConfigError,
    ExperimentConfig,
    dataset_for,
    load_config,
    load_original,
    load_predictor,
    original_key,
    save_original,
)
from .predictor import init_nern, reconstructed_arrays
from .smoothness import (
    PermutationError,
    PermutationMap,
    compute_permutations,
    load_permutations,
    permutation_bit_cost,
    save_permutations,
)
from .store import ArtifactError, bytes_hash, config_hash
from .trainer import TrainingError, TrainState, reconstructed_accuracy, save_predictor, train_nern, write_metrics_csv
from .zoo import CatalogError, build_network, get_catalog, size_report, train_original

log = logging.getLogger("nern")


class CliError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("NERN_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise CliError("bad_seed", f"NERN_SEED must be an integer, got {env!r}") from exc


# -- artifact helpers --------------------------------------------------------------------
def _original_bundle(path):
    net = load_original(path)
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    key = manifest.get("key") or {}
    cfg = ExperimentConfig(
        catalog=net.catalog.name,
        data_seed=key.get("data_seed", 0),
        data_noise=key.get("data_noise", 0.3),
    )
    return net, manifest, dataset_for(cfg)


def _perm_sidecar(path) -> Path:
    return Path(str(path) + ".json")


def _load_perm(path, original_manifest=None) -> tuple[PermutationMap, str]:
    if path is None:
        pmap = PermutationMap()
        from .smoothness import serialize

        return pmap, bytes_hash(serialize(pmap))
    p = Path(path)
    if not p.exists():
        raise CliError("missing_artifact", f"permutation file not found: {p}")
    pmap = load_permutations(p)
    side = _perm_sidecar(p)
    if original_manifest is not None and side.exists():
        meta = json.loads(side.read_text())
        if meta.get("original_hash") != original_manifest.get("config_hash"):
            raise CliError("hash_mismatch", f"permutation {p} was computed for a different original network")
    return pmap, bytes_hash(p.read_bytes())


def _predictor_bundle(path, perm_hash: str, original_manifest):
    pred, manifest = load_predictor(path)
    if manifest.get("permutation_hash") != perm_hash:
        raise CliError(
            "hash_mismatch",
            f"predictor {path} was trained with permutation {manifest.get('permutation_hash')}, got {perm_hash}",
        )
    want = manifest.get("original_hash")
    if want is not None and want != original_manifest.get("config_hash"):
        raise CliError("hash_mismatch", f"predictor {path} was trained on a different original network")
    return pred, manifest


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    train = cfg.train
    tr_upd = {}
    for flag, key in (
        ("iterations", "iterations"),
        ("alpha", "alpha"),
        ("beta", "beta"),
        ("lr", "lr"),
        ("recon_mode", "recon_mode"),
        ("optimizer", "optimizer"),
        ("distill_grad", "distill_grad"),
        ("task_batch", "task_batch"),
        ("grad_clip", "grad_clip"),
        ("eval_every", "eval_every"),
        ("checkpoint_every", "checkpoint_every"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            tr_upd[key] = v
    if getattr(args, "no_recon", False):
        tr_upd["use_recon"] = False
    if getattr(args, "noise_inputs", False):
        tr_upd["noise_inputs"] = True
    samp_upd = {}
    for flag, key in (("sampling", "kind"), ("weight_batch", "batch_size"), ("p_uni", "p_uni")):
        v = getattr(args, flag, None)
        if v is not None:
            samp_upd[key] = v
    try:
        if samp_upd:
            tr_upd["sampling"] = dataclasses.replace(train.sampling, **samp_upd)
        train = dataclasses.replace(train, **tr_upd)
        upd = {"train": train}
        if getattr(args, "hidden", None) is not None:
            upd["hidden"] = args.hidden
        if getattr(args, "regime", None) is not None:
            upd["embedding"] = EmbeddingConfig.for_regime(args.regime, cfg.embedding.num_frequencies)
        for flag in ("smoothness_lambda", "data_noise", "original_epochs"):
            v = getattr(args, flag, None)
            if v is not None:
                upd[flag] = v
        if getattr(args, "smoothness_lambda", None):
            upd["smoothness"] = "regularized"
        return dataclasses.replace(cfg, **upd)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# -- subcommands --------------------------------------------------------------------------
def cmd_size_report(args) -> int:
    print(size_report(get_catalog(args.arch)).line())
    return 0


def cmd_perm_cost(args) -> int:
    print(permutation_bit_cost(get_catalog(args.arch), args.variant).line())
    return 0


def cmd_embed_profile(args) -> int:
    cfg = EmbeddingConfig(base=args.base, num_frequencies=args.num_frequencies)
    prof = similarity_profile(args.anchor, args.size, cfg)
    if args.out:
        write_profile_csv(args.out, prof)
    else:
        for i, v in enumerate(prof):
            print(f"{i},{v:.9f}")
    return 0


def cmd_train_original(args) -> int:
    cfg = _config_from_args(args)
    cfg = dataclasses.replace(cfg, original_seed=resolve_seed(args.seed))
    data = dataset_for(cfg)
    net = train_original(build_network(get_catalog(cfg.catalog), cfg.original_seed), data, cfg.reg_lambda, epochs=cfg.original_epochs)
    save_original(args.out, net, original_key(cfg))
    print(f"accuracy {net.accuracy(data.x_test, data.y_test):.6f} smoothness {net.metrics.get('smoothness', float('nan')):.6g}")
    return 0


def cmd_permute(args) -> int:
    net, manifest, _ = _original_bundle(args.original)
    pmap = compute_permutations(net, args.variant)
    blob = save_permutations(args.out, pmap)
    meta = {
        "kind": "permutation",
        "variant": args.variant,
        "original_hash": manifest.get("config_hash"),
        "permutation_hash": bytes_hash(blob),
    }
    meta["config_hash"] = config_hash(meta)
    _perm_sidecar(args.out).write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"{args.variant} {len(blob)} bytes")
    return 0


def cmd_train_nern(args) -> int:
    net, manifest, data = _original_bundle(args.original)
    pmap, perm_hash = _load_perm(args.perm, manifest)
    cfg = _config_from_args(args)
    seed = resolve_seed(args.seed)
    cfg = cfg.with_seed(seed)
    pred = init_nern(net.catalog, net.weight_stats(), cfg.hidden, cfg.embedding, seed=seed)
    state = TrainState(pred, net, data, cfg.train, pmap=pmap)
    out = Path(args.out)
    try:
        train_nern(state, checkpoint_dir=out if cfg.train.checkpoint_every else None)
    finally:
        if args.metrics:
            write_metrics_csv(args.metrics, state.metrics)
    extra = {"original_hash": manifest.get("config_hash"), "experiment": cfg.to_dict()}
    save_predictor(out, state, extra=extra)
    acc = reconstructed_accuracy(pred, net, data, pmap)
    print(f"reconstructed_accuracy {acc:.6f}")
    return 0


def cmd_reconstruct(args) -> int:
    net, manifest, _ = _original_bundle(args.original)
    pmap, perm_hash = _load_perm(args.perm, manifest)
    pred, pman = _predictor_bundle(args.predictor, perm_hash, manifest)
    rec = net.copy()
    rec.conv_weights = [w.astype(net.conv_weights[i].dtype) for i, w in enumerate(reconstructed_arrays(pred, net.catalog, pmap, net))]
    key = dict(manifest.get("key") or {})
    key["reconstructed_from"] = pman.get("config_hash")
    save_original(args.out, rec, key)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    net, manifest, data = _original_bundle(args.original)
    pmap, perm_hash = _load_perm(args.perm, manifest)
    orig = net.accuracy(data.x_test, data.y_test)
    if args.predictor is None:
        print(f"original_accuracy {orig:.6f}")
        return 0
    pred, _ = _predictor_bundle(args.predictor, perm_hash, manifest)
    rec = reconstructed_accuracy(pred, net, data, pmap)
    print(f"original_accuracy {orig:.6f} reconstructed_accuracy {rec:.6f}")
    return 0


def cmd_importance(args) -> int:
    net, manifest, data = _original_bundle(args.original)
    pmap, perm_hash = _load_perm(args.perm, manifest)
    pred, _ = _predictor_bundle(args.predictor, perm_hash, manifest)
    if not 0 <= args.layer < len(net.catalog.layers) or not net.catalog.layers[args.layer].predictable:
        raise CliError("bad_layer", f"layer {args.layer} is not a predictable layer")
    report = apps.network_importance(pred, net, args.layer, pmap)
    if args.out:
        report.to_csv(args.out)
    else:
        for r in report.records:
            print(f"{r.layer},{r.filter},{r.error:.9g},{r.rank}")
    if args.export_dir:
        probe = apps.probe_batch(data)
        top = [r.filter for r in report.top(args.top)]
        bottom = [r.filter for r in report.bottom(args.top)]
        apps.avg_activation_export(net, args.layer, top, probe, args.export_dir, prefix="top")
        apps.avg_activation_export(net, args.layer, bottom, probe, args.export_dir, prefix="bottom")
    return 0


def cmd_prune_sweep(args) -> int:
    net, manifest, data = _original_bundle(args.original)
    pmap, perm_hash = _load_perm(args.perm, manifest)
    pred, _ = _predictor_bundle(args.predictor, perm_hash, manifest)
    rows = apps.pruning_sweep(pred, net, data, args.factors, pmap, args.per_layer, args.out)
    if not args.out:
        print("factor,accuracy")
        for f, a in rows:
            print(f"{f:g},{a:.6f}")
    return 0


def cmd_export_kernels(args) -> int:
    net, manifest, _ = _original_bundle(args.original)
    weights = net.conv_weights
    if args.predictor:
        pmap, perm_hash = _load_perm(args.perm, manifest)
        pred, _ = _predictor_bundle(args.predictor, perm_hash, manifest)
        weights = reconstructed_arrays(pred, net.catalog, pmap, net)
    if not 0 <= args.layer < len(weights):
        raise CliError("bad_layer", f"layer {args.layer} out of range")
    channel = None if args.channel < 0 else args.channel
    apps.export_kernel_grid(weights[args.layer], args.out, channel, args.rows, args.cols)
    print(f"wrote {args.out}")
    return 0


# -- parser -------------------------------------------------------------------------------
def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="sectioned key = value config file")
    p.add_argument("--hidden", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-recon", action="store_true")
    p.add_argument("--noise-inputs", action="store_true")
    p.add_argument("--sampling", choices=["all", "random_layer", "uniform_batch", "magnitude_mixed"])
    p.add_argument("--weight-batch", type=int)
    p.add_argument("--p-uni", type=float)
    p.add_argument("--recon-mode", choices=["l2", "mse"])
    p.add_argument("--optimizer", choices=["adam", "lookahead", "radam", "ranger"])
    p.add_argument("--distill-grad", choices=["full", "sampled_only"])
    p.add_argument("--task-batch", type=int)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--regime", choices=["smooth", "non_smooth"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nern", description="Neural representations of CNN weights.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("size-report", help="parameter sizes of a catalog")
    p.add_argument("--arch", required=True)
    p.set_defaults(fn=cmd_size_report)

    p = sub.add_parser("perm-cost", help="storage cost of a permutation map")
    p.add_argument("--arch", required=True)
    p.add_argument("--variant", required=True, choices=["cross_filter", "in_filter"])
    p.set_defaults(fn=cmd_perm_cost)

    p = sub.add_parser("embed-profile", help="similarity of positional embeddings to an anchor")
    p.add_argument("--base", type=float, default=0.76)
    p.add_argument("--num-frequencies", type=int, default=40)
    p.add_argument("--anchor", type=int, default=31)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_embed_profile)

    p = sub.add_parser("train-original", help="train the desk-scale original network")
    p.add_argument("--config")
    p.add_argument("--smoothness-lambda", type=float)
    p.add_argument("--data-noise", type=float)
    p.add_argument("--original-epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_original)

    p = sub.add_parser("permute", help="compute a smoothness permutation map")
    p.add_argument("--original", required=True)
    p.add_argument("--variant", required=True, choices=["cross_filter", "in_filter"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_permute)

    p = sub.add_parser("train-nern", help="train a predictor for an original network")
    p.add_argument("--original", required=True)
    p.add_argument("--perm")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="metrics CSV path")
    _train_flags(p)
    p.set_defaults(fn=cmd_train_nern)

    for name, fn, helptext in (
        ("reconstruct", cmd_reconstruct, "write the reconstructed network"),
        ("eval", cmd_eval, "test accuracy of original and reconstruction"),
        ("importance", cmd_importance, "per-filter relative reconstruction error"),
        ("prune-sweep", cmd_prune_sweep, "accuracy under predictor magnitude pruning"),
        ("export-kernels", cmd_export_kernels, "kernel grid as a PGM image"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--original", required=True)
        p.add_argument("--predictor", required=name not in ("eval", "export-kernels"))
        p.add_argument("--perm")
        p.set_defaults(fn=fn)
        if name == "reconstruct":
            p.add_argument("--out", required=True)
        elif name == "importance":
            p.add_argument("--layer", type=int, default=0)
            p.add_argument("--out")
            p.add_argument("--export-dir")
            p.add_argument("--top", type=int, default=10)
        elif name == "prune-sweep":
            p.add_argument("--factors", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5])
            p.add_argument("--per-layer", action="store_true")
            p.add_argument("--out")
        elif name == "export-kernels":
            p.add_argument("--layer", type=int, default=0)
            p.add_argument("--channel", type=int, default=-1, help="-1 tiles kernels in (filter, channel) order")
            p.add_argument("--rows", type=int, default=8)
            p.add_argument("--cols", type=int, default=8)
            p.add_argument("--out", required=True)
    return ap


_ERROR_CODES = (
    (CliError, None),
    (ConfigError, "config"),
    (ArtifactError, "artifact"),
    (CatalogError, "catalog"),
    (PermutationError, "permutation"),
    (EmbeddingError, "embedding"),
    (TrainingError, "training"),
    (FileNotFoundError, "missing_artifact"),
    (ValueError, "invalid"),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:
        for cls, code in _ERROR_CODES:
            if isinstance(exc, cls):
                code = code or exc.code
                break
        else:
            raise
        print(json.dumps({"error": code, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
