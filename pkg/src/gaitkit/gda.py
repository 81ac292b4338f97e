"""Global distance alignment: refine probe/gallery distances against
benchmarks synthesized from an unlabeled adjustment set."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

GEMB_MAGIC = b"GEMB"


@dataclass
class AdjustmentSet:
    """Flat embeddings of unlabeled sequences, order-stable."""
    features: np.ndarray                       # (n, dim) float32
    meta: list = field(default_factory=list)   # per-item {subject, condition, view} or None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ValueError("adjustment set must be a non-empty (n, dim) array")
        if not self.meta:
            self.meta = [None] * self.features.shape[0]

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class GdaConfig:
    t: int = 3                    # selection probability is 10**-t
    lambda_g: float = 0.5
    lambda_q: float = 0.5
    probe_only: bool = False      # True: refine probe side only
    k_min: int = 1                # similar-set size floor

    def validate(self):
        if self.t < 1:
            raise ValueError("t must be a positive integer (10**-t must be < 1)")
        for name, v in (("lambda_g", self.lambda_g), ("lambda_q", self.lambda_q)):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")


def build_adjustment_set(model, sequences) -> AdjustmentSet:
    """Embed unlabeled sequences with a trained model, one feature each."""
    sequences = list(sequences)
    if not sequences:
        raise ValueError("cannot build an adjustment set from zero sequences")
    feats = []
    meta = []
    for seq in sequences:
        emb = model.embed_sequence(seq.frames)
        feats.append(emb.flat)
        meta.append({"subject": getattr(seq, "subject_id", None),
                     "condition": getattr(seq, "condition", None),
                     "view": getattr(seq, "view", None)})
    return AdjustmentSet(np.stack(feats), meta)


def similar_set_size(n: int, cfg: GdaConfig) -> int:
    return max(cfg.k_min, math.ceil(10.0 ** (-cfg.t) * n))


def select_similar(feature: np.ndarray, rs: AdjustmentSet, cfg: GdaConfig) -> np.ndarray:
    """The kappa nearest adjustment features by Euclidean distance,
    kappa = max(k_min, ceil(10**-t * |rs|)); cutoff ties go to lower index."""
    cfg.validate()
    feature = np.asarray(feature, dtype=np.float32)
    if feature.shape != (rs.features.shape[1],):
        raise ValueError(f"feature dim {feature.shape} does not match "
                         f"adjustment set dim ({rs.features.shape[1]},)")
    dists = np.linalg.norm(rs.features - feature[None, :], axis=1)
    order = np.argsort(dists, kind="stable")
    kappa = similar_set_size(len(rs), cfg)
    return rs.features[order[:kappa]]


def compute_benchmark(similar: np.ndarray) -> np.ndarray:
    """Elementwise (max + mean + median) / 3 over the similar set."""
    # float64 so a singleton set reproduces its member exactly
    similar = np.asarray(similar, dtype=np.float64)
    if similar.ndim != 2 or similar.shape[0] == 0:
        raise ValueError("benchmark needs a non-empty (k, dim) similar set")
    return (similar.max(axis=0) + similar.mean(axis=0) + np.median(similar, axis=0)) / 3.0


def benchmark_distances(features: np.ndarray, rs: AdjustmentSet, cfg: GdaConfig) -> np.ndarray:
    """Per feature: Euclidean distance to its own benchmark."""
    out = np.empty(features.shape[0], dtype=np.float64)
    for i, f in enumerate(features):
        fb = compute_benchmark(select_similar(f, rs, cfg))
        out[i] = np.linalg.norm(f.astype(np.float64) - fb.astype(np.float64))
    return out


def refine_distances(dist, probe_features, gallery_features, rs: AdjustmentSet,
                     cfg: GdaConfig = GdaConfig()):
    """Subtract per-feature benchmark distances from the raw matrix.

    dist: (n_probes, n_galleries) raw distances.  Each probe (and, unless
    probe_only, each gallery item) gets its own benchmark from the adjustment
    set.  Refined values may be negative; only their ordering is meaningful.
    """
    cfg.validate()
    dist = np.asarray(dist)
    probe_features = np.asarray(probe_features, dtype=np.float32)
    gallery_features = np.asarray(gallery_features, dtype=np.float32)
    if dist.shape != (probe_features.shape[0], gallery_features.shape[0]):
        raise ValueError(f"distance matrix {dist.shape} inconsistent with "
                         f"{probe_features.shape[0]} probes x "
                         f"{gallery_features.shape[0]} gallery items")
    if probe_features.shape[1] != rs.features.shape[1]:
        raise ValueError(f"embedding dim {probe_features.shape[1]} does not match "
                         f"adjustment set dim {rs.features.shape[1]}")

    refined = dist.astype(np.float64).copy()
    if cfg.lambda_q != 0.0:
        refined -= cfg.lambda_q * benchmark_distances(probe_features, rs, cfg)[:, None]
    if not cfg.probe_only and cfg.lambda_g != 0.0:
        refined -= cfg.lambda_g * benchmark_distances(gallery_features, rs, cfg)[None, :]
    return refined.astype(dist.dtype)


# -- GEMB embedding files -------------------------------------------------

def save_gemb(path, features: np.ndarray, meta=None):
    """Write an embedding set: magic, u32 count, u32 dim, length-prefixed
    JSON metadata, then row-major little-endian float32 payload."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError("features must be a (n, dim) array")
    n, dim = features.shape
    meta = list(meta) if meta is not None else [None] * n
    if len(meta) != n:
        raise ValueError(f"{len(meta)} metadata entries for {n} features")
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GEMB_MAGIC)
        fh.write(struct.pack("<II", n, dim))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(features.astype("<f4").tobytes())


def load_gemb(path):
    """Read a GEMB file; returns (features (n, dim) float32, meta list)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GEMB_MAGIC:
            raise ValueError(f"{path}: not an embedding file (magic {magic!r})")
        n, dim = struct.unpack("<II", fh.read(8))
        (mlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(mlen).decode("utf-8"))
        data = np.frombuffer(fh.read(n * dim * 4), dtype="<f4").reshape(n, dim)
    return data.astype(np.float32).copy(), meta


def export_gemb_csv(path, features, meta=None):
    """Human-inspectable mirror of a GEMB file."""
    features = np.asarray(features)
    meta = list(meta) if meta is not None else [None] * features.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "condition", "view"]
                        + [f"e{i}" for i in range(features.shape[1])])
        for m, row in zip(meta, features):
            m = m or {}
            writer.writerow([m.get("subject", ""), m.get("condition", ""),
                             m.get("view", "")] + [repr(float(v)) for v in row])
