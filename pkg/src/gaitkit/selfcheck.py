"""Fast built-in self tests: gradient checks and oracle comparisons.

Backs the `gaitkit check` command.  Each check prints one pass/fail line;
the suite returns True only if everything passed.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gda import AdjustmentSet, GdaConfig, compute_benchmark, refine_distances, select_similar
from .gradcheck import finite_diff_check
from .training import TripletLossConfig, hard_triplet_loss


def _rand(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _grad_checks(rng, trials, tol):
    checks = []
    for i in range(trials):
        x = _rand(rng, (1, 6, 6))
        w = _rand(rng, (2, 1, 3, 3))
        b = _rand(rng, (2,))
        checks.append(("conv2d", finite_diff_check(
            lambda x, w, b: ad.conv2d(x, w, b, pad=1), [x, w, b], tol, seed=i)))

        x = _rand(rng, (2, 4, 4))
        checks.append(("maxpool2d", finite_diff_check(
            lambda x: ad.maxpool2d(x), [x], tol, seed=i)))

        x = _rand(rng, (3, 5))
        checks.append(("leaky_rectify", finite_diff_check(
            lambda x: ad.leaky_rectify(x, 0.01), [x], tol, seed=i)))

        x = _rand(rng, (2, 3, 4))
        w = _rand(rng, (4, 3, 5))
        b = _rand(rng, (4, 5))
        checks.append(("strip_affine", finite_diff_check(
            ad.strip_affine, [x, w, b], tol, seed=i)))

        x = _rand(rng, (2, 3, 5))
        checks.append(("global_pool", finite_diff_check(
            lambda x: ad.tmean(x, axis=-1) + ad.amax(x, axis=-1), [x], tol, seed=i)))

        emb = _rand(rng, (6, 2, 4))
        labels = rng.integers(0, 3, size=6)
        if len(np.unique(labels)) < 2:
            labels[0] = (labels[1] + 1) % 3
        checks.append(("hard_triplet_loss", finite_diff_check(
            lambda e: hard_triplet_loss(e, labels), [emb], tol, seed=i)))
    return checks


def _loss_oracle(embeddings, labels, margin):
    # exhaustive-triple reference: hardest positive/negative per anchor/strip
    bsz, strips, _ = embeddings.shape
    per_anchor = np.zeros(bsz)
    valid = np.zeros(bsz, dtype=bool)
    for i in range(bsz):
        hinges = []
        for s in range(strips):
            best_pos = None
            best_neg = None
            for j in range(bsz):
                if j == i:
                    continue
                d = float(np.sum((embeddings[i, s] - embeddings[j, s]) ** 2))
                if labels[j] == labels[i]:
                    best_pos = d if best_pos is None else max(best_pos, d)
                else:
                    best_neg = d if best_neg is None else min(best_neg, d)
            if best_pos is None or best_neg is None:
                hinges = None
                break
            hinges.append(max(margin + best_pos - best_neg, 0.0))
        if hinges is not None:
            valid[i] = True
            per_anchor[i] = np.mean(hinges)
    active = valid & (per_anchor > 0)
    return float(per_anchor[active].mean()) if active.any() else 0.0


def run_selfcheck(trials=5, verbose=True):
    rng = np.random.default_rng(2024)
    results = []

    def record(name, ok, detail=""):
        results.append(ok)
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""))

    for name, rep in _grad_checks(rng, trials, tol=1e-6):
        record(f"gradient {name}", rep.passed, f"max_rel_err={rep.max_rel_err:.2e}")

    ok = True
    for i in range(20):
        labels = rng.integers(0, 3, size=8)
        if len(np.unique(labels)) < 2:
            labels[0] = (labels[1] + 1) % 3
        emb = rng.standard_normal((8, 4, 6))
        ours = float(hard_triplet_loss(Tensor(emb, dtype=np.float64), labels,
                                       TripletLossConfig(0.2)).data)
        ref = _loss_oracle(emb, labels, 0.2)
        ok &= abs(ours - ref) <= 1e-6
    record("triplet loss vs exhaustive-triple oracle", ok)

    rs = AdjustmentSet(rng.standard_normal((50, 8)).astype(np.float32))
    probes = rng.standard_normal((4, 8)).astype(np.float32)
    gallery = rng.standard_normal((5, 8)).astype(np.float32)
    raw = rng.random((4, 5))
    same = refine_distances(raw, probes, gallery, rs,
                            GdaConfig(t=3, lambda_g=0.0, lambda_q=0.0))
    record("GDA identity at lambda=0", np.array_equal(same, raw))

    sm = select_similar(probes[0], rs, GdaConfig(t=3, k_min=1))
    fb = compute_benchmark(sm)
    record("benchmark within similar-set bounds",
           bool(np.all(fb >= sm.min(axis=0) - 1e-6) and np.all(fb <= sm.max(axis=0) + 1e-6)))

    refined = refine_distances(raw, probes, gallery, rs, GdaConfig(probe_only=True))
    record("probe-only refinement keeps per-row argmin",
           bool(np.all(np.argmin(refined, axis=1) == np.argmin(raw, axis=1))))

    return all(results)
