"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line to the
terminal (shown even without ``-s``) and then asserts.
"""

import math
import time

import numpy as np
import pytest
from probes import BENCHMARK, SEPARABILITY_RUNS, descend_negative, hard_negative_triplet, separability_config
from reference import brute_force_mine, proxy_anchor_hardness_grad

from metric_forge import gradcheck as gc
from metric_forge.cli import main
from metric_forge.core import EmbeddingBatch, l2_normalize_rows, softmax_rows
from metric_forge.pair_losses import batch_triplet_loss, ms_loss, ms_mine, npair_loss, triplet_loss_euclidean
from metric_forge.proxy_losses import ProxyGmlConfig, init_proxies, proxy_anchor_loss, proxygml_loss, proxynca_loss
from metric_forge.regularizers import (
    batch_directed_triplet_loss,
    directed_ms_loss,
    directed_proxynca_loss,
    directed_triplet_loss,
    language_distill_loss,
)
from metric_forge.trainer import generate_synthetic, train

# the twelve variants the criterion names; the registry also holds extras
CRITERION_LOSSES = (
    "contrastive", "triplet_euclidean", "triplet_cosine", "npair", "ms", "proxynca",
    "proxynca_pp", "proxy_anchor", "proxygml", "directed_triplet", "directed_ms", "directed_proxynca",
    "ms+language",
)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return emit


def test_criterion_1_gradient_oracle(verdict):
    registry = gc.default_registry()
    assert set(CRITERION_LOSSES) <= set(registry)
    t0 = time.perf_counter()
    reports = gc.check_all(registry, range(10), tolerance=1e-4, h=1e-6)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in reports)
    failed = [f"{r.name}/{r.seed}" for r in reports if not r.passed]
    ok = not failed and worst <= 1e-4 and elapsed < 60 and len(reports) == 10 * len(registry)
    verdict(1, ok, f"{len(registry)} losses x 10 seeds, worst rel err {worst:.2e}, {elapsed:.1f}s, failed={failed}")


def test_criterion_2_closed_forms(verdict):
    rng = np.random.default_rng(2)
    trip_err, active = 0.0, 0
    while active < 100:
        a, p, n = rng.standard_normal((3, 6))
        out = triplet_loss_euclidean(a, p, n, 0.5)
        if out.value <= 0:
            continue
        active += 1
        expected = np.stack([2 * (n - p), 2 * (p - a), 2 * (a - n)])
        trip_err = max(trip_err, float(np.max(np.abs(out.grad_embeddings - expected))))
    pa_err = 0.0
    for _ in range(100):
        b, c = int(rng.integers(4, 12)), int(rng.integers(2, 6))
        batch = EmbeddingBatch(l2_normalize_rows(rng.standard_normal((b, 5))), rng.integers(0, c, b))
        ps = init_proxies(c, 5, 1, rng)
        out = proxy_anchor_loss(batch, ps, 32.0, 0.1)
        ref = proxy_anchor_hardness_grad(batch.data @ ps.vectors.T, batch.labels, 32.0, 0.1)
        pa_err = max(pa_err, float(np.max(np.abs(out.aux["grad_similarity"] - ref)) / max(1.0, np.abs(ref).max())))
    ok = trip_err <= 1e-12 and pa_err <= 1e-9
    verdict(2, ok, f"triplet max err {trip_err:.1e} over {active} active triplets; proxy anchor dL/dS max err {pa_err:.1e}")


def test_criterion_3_reductions(verdict):
    rng = np.random.default_rng(3)
    errs = {"directed_triplet": 0.0, "directed_ms": 0.0, "directed_proxynca": 0.0, "proxygml_ce": 0.0, "npair_pair": 0.0}
    for _ in range(20):
        batch = EmbeddingBatch(l2_normalize_rows(rng.standard_normal((8, 4))), rng.permutation(np.arange(8) % 4))
        base = batch_triplet_loss(batch, 0.5, "euclidean")
        out = batch_directed_triplet_loss(batch, 0.5, 0.0)
        errs["directed_triplet"] = max(errs["directed_triplet"], abs(out.value - base.value))
        a, p, n = rng.standard_normal((3, 4))
        errs["directed_triplet"] = max(
            errs["directed_triplet"],
            abs(directed_triplet_loss(a, p, n, 0.5, 0.0).value - triplet_loss_euclidean(a, p, n, 0.5).value),
        )
        masks = ms_mine(batch.data @ batch.data.T, batch.labels, 0.3)
        errs["directed_ms"] = max(errs["directed_ms"], abs(directed_ms_loss(batch, masks, gamma=0.0).value - ms_loss(batch, masks).value))
        ps = init_proxies(4, 4, 1, rng)
        errs["directed_proxynca"] = max(
            errs["directed_proxynca"], abs(directed_proxynca_loss(batch, ps, 0.0).value - proxynca_loss(batch, ps).value)
        )
        s = batch.data @ ps.vectors.T
        ce = np.mean([-s[i, y] + math.log(sum(math.exp(v) for v in s[i])) for i, y in enumerate(batch.labels)])
        errs["proxygml_ce"] = max(errs["proxygml_ce"], abs(proxygml_loss(batch, ps, ProxyGmlConfig(4, 0.0, 1)).value - ce))
        fa = l2_normalize_rows(rng.standard_normal((2, 4)))
        fp = l2_normalize_rows(rng.standard_normal((2, 4)))
        per_anchor = npair_loss(EmbeddingBatch(np.stack([fa[0], fp[0], fa[1], fp[1]]), [0, 0, 1, 1])).aux["per_anchor"]
        for i, j in ((0, 1), (1, 0)):
            ref = math.log1p(math.exp(fa[i] @ fp[j] - fa[i] @ fp[i]))
            errs["npair_pair"] = max(errs["npair_pair"], abs(per_anchor[i] - ref))
    tol = {"directed_triplet": 1e-12, "directed_ms": 1e-12, "directed_proxynca": 1e-12, "proxygml_ce": 1e-9, "npair_pair": 1e-9}
    ok = all(errs[k] <= tol[k] for k in errs)
    verdict(3, ok, " ".join(f"{k}={v:.1e}" for k, v in errs.items()))


def test_criterion_4_ms_mining(verdict):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(200):
        b = int(rng.integers(2, 24))
        labels = rng.integers(0, int(rng.integers(1, 6)), b)
        f = l2_normalize_rows(rng.standard_normal((b, 5)))
        s = f @ f.T
        eps = float(rng.choice([0.0, 0.05, 0.1, 0.5]))
        masks = ms_mine(s, labels, eps)
        pos, neg = brute_force_mine(s, labels, eps)
        mismatches += not (np.array_equal(masks.positive_mask, pos) and np.array_equal(masks.negative_mask, neg))
    verdict(4, mismatches == 0, f"200 random batches, {mismatches} mask mismatches")


def test_criterion_5_separability(verdict):
    ds = generate_synthetic(BENCHMARK)
    rows, ok = [], True
    for name in SEPARABILITY_RUNS:
        t0 = time.perf_counter()
        res = train(ds, separability_config(name))
        elapsed = time.perf_counter() - t0
        r1 = res.final_report.recall_at_k[1]
        gain = res.final_report.separation_gap - res.initial_report.separation_gap
        ok &= r1 >= 0.95 and gain >= 0.3 and elapsed < 120
        rows.append(f"{name} R@1={r1:.3f} gap+={gain:.3f} {elapsed:.1f}s")
    verdict(5, ok, "; ".join(rows))


def test_criterion_6_direction_descent(verdict):
    starts, ends = [], []
    for seed in range(20):
        trace = descend_negative(*hard_negative_triplet(seed), steps=200, lr=0.05, gamma=1.0)
        starts.append(trace[0])
        ends.append(trace[-1])
    ok = min(starts) >= 0.5 and max(ends) < 0.1
    verdict(6, ok, f"20 seeds, start cos >= {min(starts):.3f}, end cos <= {max(ends):.3f}")


def test_criterion_7_language(verdict):
    rng = np.random.default_rng(7)
    s = rng.uniform(-1, 1, (6, 6))
    zero = max(abs(language_distill_loss(s, s).value), abs(language_distill_loss(s, s + 2.5).value))
    positives = 0
    for _ in range(100):
        s_i, s_l = rng.uniform(-1, 1, (6, 6)), rng.uniform(-1, 1, (6, 6))
        assert not np.allclose(softmax_rows(s_i), softmax_rows(s_l))
        positives += language_distill_loss(s_i, s_l).value > 0
    ds = generate_synthetic(BENCHMARK)
    recalls = {name: train(ds, separability_config(name, omega=1.0)).final_report.recall_at_k[1] for name in SEPARABILITY_RUNS}
    ok = zero <= 1e-9 and positives == 100 and min(recalls.values()) >= 0.95
    detail = ", ".join(f"{k}={v:.3f}" for k, v in recalls.items())
    verdict(7, ok, f"matched KL {zero:.1e}, {positives}/100 positive, omega=1 R@1: {detail}")


def test_criterion_8_determinism(verdict, tmp_path):
    results = {}
    for loss in ("triplet", "ms", "proxynca_pp", "proxygml"):
        args = ["train", "--loss", loss, "--epochs", "5", "--set", "data.synthetic.samples_per_class=20"]
        assert main(args + ["--out-dir", str(tmp_path / loss / "a")]) == 0
        assert main(args + ["--out-dir", str(tmp_path / loss / "b")]) == 0
        a, b = ((tmp_path / loss / run / "history.csv").read_bytes() for run in "ab")
        results[loss] = a == b
    verdict(8, all(results.values()), f"repeated train runs, history.csv byte-identical: {results}")
