"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line; conftest prints them all in the
terminal summary.  Thresholds are the stated ones.  The training criteria
(4 to 7) take roughly 20 minutes together on one CPU core.

Run alone with ``python3 -m pytest -v tests/test_acceptance.py``.
"""

import functools
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from nern.apps import filter_relative_errors, network_importance, pruning_sweep
from nern.cli import main
from nern.embedding import EmbeddingConfig, raw_similarity, similarity_profile
from nern.experiments import mean_ci
from nern.predictor import OraclePredictor, init_nern, prediction_coords, reconstructed_arrays
from nern.smoothness import PermutationMap, compute_permutations
from nern.trainer import SamplingStrategy, TrainConfig, TrainState, compute_losses, reconstructed_accuracy, train_nern
from nern.zoo import build_desk_cnn, make_bars_dataset, train_original

SEEDS = (0, 1, 2, 3)
RESULTS: list[str] = []
HERE = Path(__file__).parent


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- shared fixtures (computed once, reused across criteria) ----------------------------
@functools.lru_cache(maxsize=None)
def data():
    return make_bars_dataset(0)


@functools.lru_cache(maxsize=None)
def original(lam: float = 0.0):
    return train_original(build_desk_cnn(0), data(), lam, epochs=30)


@functools.lru_cache(maxsize=None)
def perm(variant: str):
    return compute_permutations(original(0.0), variant) if variant != "none" else PermutationMap()


@functools.lru_cache(maxsize=None)
def nern_run(seed: int, hidden: int = 64, lam: float = 0.0, variant: str = "none", **kw):
    """Train one predictor; returns (reconstructed accuracy, final recon loss, predictor, seconds)."""
    net = original(lam)
    pmap = perm(variant) if lam == 0.0 else PermutationMap()
    cfg = TrainConfig(seed=seed, **kw)
    pred = init_nern(net.catalog, net.weight_stats(), hidden, EmbeddingConfig(), seed=seed)
    t0 = time.perf_counter()
    state = train_nern(TrainState(pred, net, data(), cfg, pmap=pmap))
    secs = time.perf_counter() - t0
    return reconstructed_accuracy(pred, net, data(), pmap), state.metrics[-1]["recon_loss"], pred, secs


FULL = dict(alpha=1.0, beta=1.0, iterations=5000, sampling=SamplingStrategy("magnitude_mixed", 256, 0.8))


def accs(**kw):
    return [nern_run(s, **kw)[0] for s in SEEDS]


def fmt(vals):
    m, ci = mean_ci(vals)
    return f"{m:.4f}+-{ci:.4f}"


# -- 1..3: accounting and embeddings ------------------------------------------------------
def _timed_cli(argv, capsys):
    t0 = time.perf_counter()
    code = main(argv)
    return code, capsys.readouterr().out.strip(), time.perf_counter() - t0


def test_criterion_1_size_report(capsys):
    want = {
        "resnet20_cifar": (1.04, 1.03, 99.04),
        "resnet56_cifar": (3.26, 3.25, 99.69),
        "resnet18_imagenet": (44.59, 42.60, 95.54),
    }
    ok, parts, worst = True, [], 0.0
    for arch, (tot, conv, pct) in want.items():
        code, out, secs = _timed_cli(["size-report", "--arch", arch], capsys)
        t, c, p = map(float, out.split())
        ok &= code == 0 and abs(t - tot) <= 0.01 and abs(c - conv) <= 0.01 and abs(p - pct) <= 0.05 and secs < 1.0
        worst = max(worst, secs)
        parts.append(f"{arch} {out}")
    record(1, ok, "; ".join(parts) + f" (max {worst * 1000:.0f} ms)")


def test_criterion_2_perm_cost(capsys):
    want = {
        ("resnet20_cifar", "in_filter"): (0.02, 1.92),
        ("resnet20_cifar", "cross_filter"): (0.04, 3.85),
        ("resnet56_cifar", "in_filter"): (0.065, 1.99),
        ("resnet56_cifar", "cross_filter"): (0.128, 3.93),
        ("resnet18_imagenet", "in_filter"): (1.246, 2.79),
        ("resnet18_imagenet", "cross_filter"): (2.505, 5.62),
    }
    ok, parts, worst = True, [], 0.0
    for (arch, variant), (mb, pct) in want.items():
        code, out, secs = _timed_cli(["perm-cost", "--arch", arch, "--variant", variant], capsys)
        got_mb, _, got_pct = out.split()
        ok &= code == 0 and abs(float(got_mb) - mb) <= 0.005 and abs(float(got_pct.rstrip("%")) - pct) <= 0.05 and secs < 1.0
        worst = max(worst, secs)
        parts.append(f"{arch}/{variant} {out}")
    record(2, ok, "; ".join(parts) + f" (max {worst * 1000:.0f} ms)")


def test_criterion_3_embedding_regimes():
    t0 = time.perf_counter()
    smooth = EmbeddingConfig(base=0.76, num_frequencies=40)
    prof = similarity_profile(31, 64, smooth)
    sym = max(abs(prof[31 - d] - prof[31 + d]) for d in range(1, 32))
    anchors = {24: 0.2885, 30: 0.6655, 32: 0.6655, 39: 0.3906}
    dev = max(abs(prof[i] - v) for i, v in anchors.items())

    def monotone(base, window=5):
        cfg = EmbeddingConfig(base=base, num_frequencies=40)
        s = [raw_similarity(31, 31 + d, cfg) for d in range(window + 1)]
        return all(b <= a for a, b in zip(s, s[1:]))

    secs = time.perf_counter() - t0
    ok = sym <= 1e-9 and dev <= 0.02 and monotone(0.76) and not monotone(1.25) and secs < 1.0
    record(3, ok, f"asymmetry {sym:.1e}, max plotted-value deviation {dev:.4f}, "
                  f"monotone b=0.76 {monotone(0.76)}, b=1.25 {monotone(1.25)}, {secs * 1000:.0f} ms")


# -- 4..7: training -----------------------------------------------------------------------
def test_criterion_4_reconstruction():
    t0 = time.perf_counter()
    base = original(0.0).accuracy(data().x_test, data().y_test)
    rec = accs(**FULL)
    secs = time.perf_counter() - t0
    gap = base - float(np.mean(rec))
    ok = base >= 0.95 and gap <= 0.03 and secs < 600
    record(4, ok, f"original {base:.4f}, reconstructed {fmt(rec)} over {len(SEEDS)} seeds, gap {gap * 100:.2f} pts, {secs:.0f} s")


def test_criterion_5_smoothness_helps():
    # hidden 32, reconstruction loss only, 300 iterations: the predictor is still
    # budget-limited here, while longer or distilled runs saturate the desk task
    proto = dict(alpha=0.0, beta=0.0, iterations=300)
    none = accs(hidden=32, **proto)
    by_variant = {v: accs(hidden=32, variant=v, **proto) for v in ("in_filter", "cross_filter")}
    by_lam = {lam: accs(hidden=32, lam=lam, **proto) for lam in (1e-3, 1e-2)}
    m0, ci0 = mean_ci(none)

    def beats(vals):
        m, ci = mean_ci(vals)
        return m - m0 > max(ci0, ci)

    best_v = max(by_variant, key=lambda v: np.mean(by_variant[v]))
    best_l = max(by_lam, key=lambda l: np.mean(by_lam[l]))
    ok = beats(by_variant[best_v]) and beats(by_lam[best_l])
    detail = (
        f"none {fmt(none)}; "
        + ", ".join(f"{v} {fmt(a)}" for v, a in by_variant.items())
        + "; " + ", ".join(f"lambda={l:g} {fmt(a)}" for l, a in by_lam.items())
        + f"; permuted({best_v}) beats none: {beats(by_variant[best_v])}, regularized(lambda={best_l:g}) beats none: {beats(by_lam[best_l])}"
        + f"; in_filter alone beats none: {beats(by_variant['in_filter'])}"
    )
    record(5, ok, detail)


def test_criterion_6_loss_ablation():
    full = accs(**FULL)
    recon = accs(**{**FULL, "alpha": 0.0, "beta": 0.0})
    distill = accs(**{**FULL, "use_recon": False})
    mf, mr, md = (float(np.mean(a)) for a in (full, recon, distill))
    ok = mf >= mr >= md and abs(md - 0.5) <= 0.10
    record(6, ok, f"full {fmt(full)}, recon-only {fmt(recon)}, distill-only {fmt(distill)} (chance 0.5)")


def test_criterion_7_data_free():
    real = accs(**FULL)
    noise = accs(**{**FULL, "noise_inputs": True})
    gap = abs(float(np.mean(real)) - float(np.mean(noise)))
    record(7, gap <= 0.05, f"data inputs {fmt(real)}, noise inputs {fmt(noise)}, gap {gap * 100:.2f} pts")


# -- 8..10: identities, numerical core, applications ------------------------------------------
def test_criterion_8_oracle_identities():
    net, x = original(0.0), data().x_test
    base = net.forward(x).data
    coords = prediction_coords(net.catalog)
    ok, notes = True, []
    for variant in ("none", "cross_filter", "in_filter"):
        pmap = perm(variant)
        oracle = OraclePredictor(net, pmap)
        state = TrainState(init_nern(net.catalog, net.weight_stats(), 16, seed=0), net, data(), TrainConfig(), pmap=pmap)
        _, recon, kd, fmd = compute_losses(state, coords, x[:64], predictor=oracle)
        logits = net.forward(x, reconstructed_arrays(oracle, net.catalog, pmap, net)).data
        same = logits.tobytes() == base.tobytes()
        ok &= recon == 0.0 and kd == 0.0 and fmd == 0.0 and same
        notes.append(f"{variant}: losses ({recon}, {kd}, {fmd}) logits identical {same}")
    # a frozen predictor gives the same function whichever map the bookkeeping uses,
    # once its outputs are routed back to their original slots by hand
    frozen = init_nern(net.catalog, net.weight_stats(), 16, seed=7)
    table = frozen.forward(coords).data
    for variant in ("cross_filter", "in_filter"):
        pmap = perm(variant)
        manual, start = [], 0
        for l, i in enumerate(net.catalog.predictable):
            spec = net.catalog.layers[i]
            block = table[start : start + spec.num_kernels]
            w = np.empty_like(block)
            w[pmap.flat_order(l, spec.filters, spec.channels)] = block
            manual.append(w.reshape(spec.shape))
            start += spec.num_kernels
        via = reconstructed_arrays(frozen, net.catalog, pmap, net)
        same = net.forward(x, via).data.tobytes() == net.forward(x, manual).data.tobytes()
        ok &= same
        notes.append(f"frozen {variant} bookkeeping invariant {same}")
    record(8, ok, "; ".join(notes))


def test_criterion_9_numerical_core():
    selection = [
        str(HERE / "test_autodiff.py"),
        str(HERE / "test_predictor.py") + "::test_predictor_gradient_finite_differences",
        str(HERE / "test_smoothness.py") + "::test_tensor_loss_matches_numpy_and_gradient",
        str(HERE / "test_smoothness.py") + "::test_greedy_vs_brute_force",
        str(HERE / "test_smoothness.py") + "::test_permute_invert_roundtrip",
        str(HERE / "test_smoothness.py") + "::test_codec_roundtrip",
        str(HERE / "test_experiments_cli.py") + "::test_original_checkpoint_roundtrip",
        str(HERE / "test_experiments_cli.py") + "::test_predictor_checkpoint_roundtrip",
    ]
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *selection],
        capture_output=True, text=True, cwd=HERE.parent,
    )
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    record(9, proc.returncode == 0, f"finite-difference, brute-force and round-trip suites: {summary}")


def test_criterion_10_applications():
    net, d = original(0.0), data()
    acc, _, pred, _ = nern_run(0, **FULL)
    rows = pruning_sweep(pred, net, d, [0.0, 0.1])
    exact0 = rows[0][1] == acc
    drop = acc - rows[1][1]
    rec = reconstructed_arrays(pred, net.catalog, None, net)
    match = True
    for layer in range(len(net.catalog.layers)):
        rep = network_importance(pred, net, layer)
        W, Wh = net.conv_weights[layer].astype(np.float64), rec[layer].astype(np.float64)
        oracle = []
        for f in range(W.shape[0]):
            num = math.sqrt(sum(float(v) ** 2 for v in (W[f] - Wh[f]).ravel()))
            den = math.sqrt(sum(float(v) ** 2 for v in W[f].ravel()))
            oracle.append(num / den)
        order = sorted(range(len(oracle)), key=lambda f: (oracle[f], f))
        match &= [r.filter for r in rep.records] == order
        match &= all(abs(r.error - oracle[r.filter]) <= 1e-12 * oracle[r.filter] for r in rep.records)
        match &= np.array_equal(filter_relative_errors(W, Wh)[order], [r.error for r in rep.records])
    ok = exact0 and drop <= 0.01 and match
    record(10, ok, f"factor 0 row {rows[0][1]:.4f} == unpruned {acc:.4f}: {exact0}; 10% pruning {rows[1][1]:.4f} "
                   f"(drop {drop * 100:.2f} pts); importance matches per-filter norm oracle: {match}")


if __name__ == "__main__":
    import pytest

    sys.exit(pytest.main(["-v", __file__]))
