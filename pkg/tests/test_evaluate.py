"""Unit tests for distance matrices and the cross-view rank-1 protocol,
including an independent nested-loop oracle."""

import numpy as np
import pytest

from gaitkit.evaluate import (DistanceMatrix, distance_matrix, emit_report,
                              rank1_evaluate)


def meta(subject, condition, view):
    return {"subject": subject, "condition": condition, "view": view}


# -- independent brute-force oracle -------------------------------------------

def rank1_brute_force(values, probe_meta, gallery_meta, gallery_all_views):
    """Nested-loop reference: per condition and (probe view, gallery view)
    cell, count probes whose nearest allowed gallery item shares the subject.
    Returns {cond: {pv: {gv: accuracy or None}}} plus the grand mean over
    per-(cond, pv) means of non-identical-view cells."""
    conds = sorted({m["condition"] for m in probe_meta})
    pviews = sorted({m["view"] for m in probe_meta}, key=lambda v: (len(v), v))
    gviews = ["all"] if gallery_all_views else sorted(
        {m["view"] for m in gallery_meta}, key=lambda v: (len(v), v))
    rank1 = {}
    view_means = []
    for cond in conds:
        rank1[cond] = {}
        for pv in pviews:
            rank1[cond][pv] = {}
            cell_vals = []
            for gv in gviews:
                hits = total = 0
                for i, pm in enumerate(probe_meta):
                    if pm["condition"] != cond or pm["view"] != pv:
                        continue
                    best = None
                    best_j = None
                    for j, gm in enumerate(gallery_meta):
                        if gallery_all_views:
                            if gm["view"] == pv:
                                continue
                        elif gm["view"] != gv:
                            continue
                        if best is None or values[i, j] < best:
                            best = values[i, j]
                            best_j = j
                    if best_j is None:
                        continue
                    total += 1
                    hits += gallery_meta[best_j]["subject"] == pm["subject"]
                acc = hits / total if total else None
                rank1[cond][pv][gv] = acc
                if acc is not None and (gallery_all_views or gv != pv):
                    cell_vals.append(acc)
            if cell_vals:
                view_means.append(float(np.mean(cell_vals)))
    grand = float(np.mean(view_means)) if view_means else None
    return rank1, grand


@pytest.mark.parametrize("seed", range(30))
@pytest.mark.parametrize("all_views", [False, True])
def test_rank1_matches_brute_force(seed, all_views):
    rng = np.random.default_rng(seed)
    n_subj = int(rng.integers(2, 6))
    views = [f"{v:03d}" for v in (0, 45, 90, 135)][: int(rng.integers(2, 5))]
    conds = ["NM", "BG"][: int(rng.integers(1, 3))]
    gallery_meta = [meta(f"{s:03d}", "NM", v)
                    for s in range(n_subj) for v in views]
    probe_meta = [meta(f"{s:03d}", c, v)
                  for s in range(n_subj) for c in conds for v in views]
    values = rng.random((len(probe_meta), len(gallery_meta)))
    dm = DistanceMatrix(values, probe_meta, gallery_meta)
    report = rank1_evaluate(dm, gallery_all_views=all_views)
    ref_rank1, ref_grand = rank1_brute_force(values, probe_meta, gallery_meta,
                                             all_views)
    for cond in ref_rank1:
        for pv in ref_rank1[cond]:
            for gv in ref_rank1[cond][pv]:
                assert report.rank1[cond][pv][gv] == ref_rank1[cond][pv][gv]
    assert report.grand_mean == pytest.approx(ref_grand)


def test_identical_view_cells_excluded_from_means():
    # same-view matching is perfect, cross-view always wrong: means must be 0
    gallery_meta = [meta("A", "NM", "000"), meta("A", "NM", "090"),
                    meta("B", "NM", "000"), meta("B", "NM", "090")]
    probe_meta = [meta("A", "NM", "000"), meta("B", "NM", "000")]
    values = np.array([
        # A-000   A-090   B-000   B-090
        [0.1,     0.9,    0.5,    0.2],   # probe A-000
        [0.5,     0.2,    0.1,    0.9],   # probe B-000
    ])
    report = rank1_evaluate(DistanceMatrix(values, probe_meta, gallery_meta))
    assert report.rank1["NM"]["000"]["000"] == 1.0     # identical view, perfect
    assert report.rank1["NM"]["000"]["090"] == 0.0     # cross view, wrong
    assert report.view_means["NM"]["000"] == 0.0       # identical view excluded
    assert report.grand_mean == 0.0


def test_nearest_tie_breaks_to_lower_column():
    gallery_meta = [meta("A", "NM", "000"), meta("B", "NM", "000")]
    probe_meta = [meta("B", "NM", "090")]
    values = np.array([[0.5, 0.5]])
    report = rank1_evaluate(DistanceMatrix(values, probe_meta, gallery_meta))
    assert report.rank1["NM"]["090"]["000"] == 0.0     # ties pick column 0 (A)


def test_absent_cells_reported_not_averaged():
    gallery_meta = [meta("A", "NM", "000")]
    probe_meta = [meta("A", "NM", "000")]     # only the identical view exists
    report = rank1_evaluate(DistanceMatrix(np.array([[0.1]]),
                                           probe_meta, gallery_meta))
    assert report.view_means["NM"]["000"] is None
    assert report.grand_mean is None


def test_all_views_mode_excludes_identical_view_columns():
    gallery_meta = [meta("A", "NM", "000"), meta("B", "NM", "090")]
    probe_meta = [meta("A", "NM", "000")]
    # nearest overall is the identical-view A item, but it must be excluded,
    # leaving the wrong-subject B item
    values = np.array([[0.1, 0.9]])
    report = rank1_evaluate(DistanceMatrix(values, probe_meta, gallery_meta),
                            gallery_all_views=True)
    assert report.rank1["NM"]["000"]["all"] == 0.0


def test_distance_matrix_is_euclidean():
    p = np.array([[0.0, 0.0], [3.0, 4.0]])
    g = np.array([[0.0, 0.0]])
    dm = distance_matrix(p, g)
    np.testing.assert_allclose(dm.values, [[0.0], [5.0]])
    with pytest.raises(ValueError):
        distance_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


def test_distance_matrix_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    probe_meta = [meta("001", "NM", "000"), meta("002", "BG", "090")]
    gallery_meta = [meta("001", "NM", "045"), meta("002", "NM", "090"),
                    meta("003", "NM", "135")]
    dm = DistanceMatrix(rng.random((2, 3)), probe_meta, gallery_meta)
    path = tmp_path / "d.csv"
    dm.save_csv(path)
    loaded = DistanceMatrix.load_csv(path)
    np.testing.assert_array_equal(loaded.values, dm.values)   # repr() roundtrip
    assert loaded.probe_meta == probe_meta
    assert loaded.gallery_meta == gallery_meta


def test_distance_matrix_shape_validation():
    with pytest.raises(ValueError):
        DistanceMatrix(np.zeros((2, 2)), [meta("A", "NM", "000")],
                       [meta("A", "NM", "000")] * 2)


def test_emit_report_files(tmp_path):
    gallery_meta = [meta("A", "NM", "000"), meta("A", "NM", "090"),
                    meta("B", "NM", "000"), meta("B", "NM", "090")]
    probe_meta = [meta("A", "NM", "000"), meta("A", "NM", "090"),
                  meta("B", "NM", "000"), meta("B", "NM", "090")]
    rng = np.random.default_rng(1)
    report = rank1_evaluate(DistanceMatrix(rng.random((4, 4)),
                                           probe_meta, gallery_meta))
    emit_report(report, tmp_path)
    csv_text = (tmp_path / "rank1_NM.csv").read_text()
    assert csv_text.startswith("probe_view,000,090,mean")
    txt = (tmp_path / "report.txt").read_text()
    assert "grand mean:" in txt
    assert "identical-view cells excluded" in txt
