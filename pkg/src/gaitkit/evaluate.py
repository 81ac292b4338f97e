"""Distance matrices and the cross-view rank-1 evaluation protocol."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np


def _meta_get(m, key):
    return (m or {}).get(key)


@dataclass
class DistanceMatrix:
    """Probe-by-gallery distances with per-row/column identity metadata."""
    values: np.ndarray                # (n_probes, n_gallery)
    probe_meta: list                  # per row {subject, condition, view}
    gallery_meta: list                # per column {subject, condition, view}

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (len(self.probe_meta), len(self.gallery_meta)):
            raise ValueError(f"matrix {self.values.shape} inconsistent with "
                             f"{len(self.probe_meta)} probes x "
                             f"{len(self.gallery_meta)} gallery items")

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["probe_subject", "probe_condition", "probe_view"]
            header += ["|".join(str(_meta_get(m, k)) for k in
                                ("subject", "condition", "view"))
                       for m in self.gallery_meta]
            writer.writerow(header)
            for m, row in zip(self.probe_meta, self.values):
                writer.writerow([_meta_get(m, "subject"), _meta_get(m, "condition"),
                                 _meta_get(m, "view")]
                                + [repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        gallery_meta = []
        for col in rows[0][3:]:
            subject, condition, view = col.split("|")
            gallery_meta.append({"subject": subject, "condition": condition,
                                 "view": view})
        probe_meta = []
        values = []
        for row in rows[1:]:
            probe_meta.append({"subject": row[0], "condition": row[1],
                               "view": row[2]})
            values.append([float(v) for v in row[3:]])
        return cls(np.asarray(values, dtype=np.float64), probe_meta, gallery_meta)


def distance_matrix(probe_features, gallery_features,
                    probe_meta=None, gallery_meta=None) -> DistanceMatrix:
    """Pairwise Euclidean distances between flat embeddings."""
    p = np.asarray(probe_features, dtype=np.float64)
    g = np.asarray(gallery_features, dtype=np.float64)
    if p.ndim != 2 or g.ndim != 2 or p.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dims differ: {p.shape} vs {g.shape}")
    diffs = p[:, None, :] - g[None, :, :]
    values = np.sqrt(np.einsum("pgd,pgd->pg", diffs, diffs))
    probe_meta = probe_meta if probe_meta is not None else [None] * p.shape[0]
    gallery_meta = gallery_meta if gallery_meta is not None else [None] * g.shape[0]
    return DistanceMatrix(values, list(probe_meta), list(gallery_meta))


@dataclass
class EvaluationReport:
    """Rank-1 accuracies per condition; identical probe/gallery views are
    excluded from every mean.  Cells are None where the protocol produced
    no probes or no gallery items."""
    mode: str                                     # "per-view" | "all-views"
    probe_views: list
    gallery_views: list
    rank1: dict = field(default_factory=dict)     # cond -> {pv -> {gv -> float|None}}
    counts: dict = field(default_factory=dict)    # cond -> {pv -> {gv -> int}}
    view_means: dict = field(default_factory=dict)     # cond -> {pv -> float|None}
    condition_means: dict = field(default_factory=dict)
    grand_mean: float | None = None
    absent_cells: list = field(default_factory=list)


def _view_sort_key(v):
    try:
        return (0, int(v))
    except (TypeError, ValueError):
        return (1, str(v))


def rank1_evaluate(dm: DistanceMatrix, gallery_all_views=False) -> EvaluationReport:
    """Rank-1 identification per (probe view, gallery view) and condition.

    Per-view mode restricts the gallery to one view per cell.  All-views mode
    uses the whole gallery minus identical-view items, one cell per probe
    view.  Nearest-gallery ties break to the lower column index.
    """
    probe_subject = np.array([str(_meta_get(m, "subject")) for m in dm.probe_meta])
    probe_cond = np.array([str(_meta_get(m, "condition")) for m in dm.probe_meta])
    probe_view = np.array([str(_meta_get(m, "view")) for m in dm.probe_meta])
    gal_subject = np.array([str(_meta_get(m, "subject")) for m in dm.gallery_meta])
    gal_view = np.array([str(_meta_get(m, "view")) for m in dm.gallery_meta])

    conditions = sorted(set(probe_cond))
    pviews = sorted(set(probe_view), key=_view_sort_key)
    gviews = ["all"] if gallery_all_views else sorted(set(gal_view), key=_view_sort_key)

    report = EvaluationReport(mode="all-views" if gallery_all_views else "per-view",
                              probe_views=pviews, gallery_views=gviews)

    def cell_accuracy(rows, cols):
        if rows.size == 0 or cols.size == 0:
            return None, 0
        sub = dm.values[np.ix_(rows, cols)]
        nearest = cols[np.argmin(sub, axis=1)]
        correct = gal_subject[nearest] == probe_subject[rows]
        return float(correct.mean()), int(rows.size)

    all_view_means = []
    for cond in conditions:
        report.rank1[cond] = {}
        report.counts[cond] = {}
        report.view_means[cond] = {}
        for pv in pviews:
            rows = np.where((probe_cond == cond) & (probe_view == pv))[0]
            report.rank1[cond][pv] = {}
            report.counts[cond][pv] = {}
            cell_vals = []
            for gv in gviews:
                if gallery_all_views:
                    cols = np.where(gal_view != pv)[0]
                else:
                    cols = np.where(gal_view == gv)[0]
                acc, n = cell_accuracy(rows, cols)
                report.rank1[cond][pv][gv] = acc
                report.counts[cond][pv][gv] = n
                if acc is None:
                    report.absent_cells.append((cond, pv, gv))
                elif gallery_all_views or gv != pv:
                    cell_vals.append(acc)
            vm = float(np.mean(cell_vals)) if cell_vals else None
            report.view_means[cond][pv] = vm
            if vm is not None:
                all_view_means.append(vm)
        cond_vals = [v for v in report.view_means[cond].values() if v is not None]
        report.condition_means[cond] = float(np.mean(cond_vals)) if cond_vals else None

    report.grand_mean = float(np.mean(all_view_means)) if all_view_means else None
    return report


def emit_report(report: EvaluationReport, out_dir):
    """Write one CSV matrix per condition plus an aligned plain-text table."""
    os.makedirs(out_dir, exist_ok=True)

    def fmt(v):
        return "" if v is None else f"{100.0 * v:.1f}"

    for cond in report.rank1:
        path = os.path.join(out_dir, f"rank1_{cond}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["probe_view"] + list(report.gallery_views) + ["mean"])
            for pv in report.probe_views:
                row = [pv] + [fmt(report.rank1[cond][pv][gv])
                              for gv in report.gallery_views]
                row.append(fmt(report.view_means[cond][pv]))
                writer.writerow(row)
            writer.writerow(["mean"] + [""] * len(report.gallery_views)
                            + [fmt(report.condition_means[cond])])

    lines = [f"rank-1 accuracy (%), mode={report.mode}, "
             "identical-view cells excluded from means", ""]
    colw = max(6, max((len(str(g)) for g in report.gallery_views), default=6) + 1)
    for cond in report.rank1:
        lines.append(f"condition {cond}")
        header = "probe".ljust(8) + "".join(str(g).rjust(colw)
                                            for g in report.gallery_views) \
            + "mean".rjust(colw)
        lines.append(header)
        for pv in report.probe_views:
            row = str(pv).ljust(8)
            row += "".join(fmt(report.rank1[cond][pv][gv]).rjust(colw)
                           for gv in report.gallery_views)
            row += fmt(report.view_means[cond][pv]).rjust(colw)
            lines.append(row)
        lines.append(f"condition mean: {fmt(report.condition_means[cond])}")
        lines.append("")
    lines.append(f"grand mean: {fmt(report.grand_mean)}")
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return out_dir
