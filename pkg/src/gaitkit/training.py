"""P x K batch sampling, per-strip batch-hard triplet loss, training loop."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, _accumulate, _needs_grad
from .model import SfeConfig, SfeModel
from .optim import Adam


@dataclass(frozen=True)
class BatchSpec:
    p: int = 8                 # subjects per batch
    k: int = 16                # sequences per subject
    frames_per_seq: int = 50

    def validate(self):
        if self.p < 2 or self.k < 2:
            raise ValueError("triplet batches need p >= 2 and k >= 2")


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.2

    def validate(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")


def subsample_frames(frames: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Pick n frames from a sequence, wrapping around when it is shorter."""
    total = frames.shape[0]
    if total >= n:
        idx = np.sort(rng.choice(total, size=n, replace=False))
    else:
        start = int(rng.integers(total))
        idx = (start + np.arange(n)) % total
    return frames[idx]


def sample_batch(dataset, spec: BatchSpec, rng: np.random.Generator):
    """Draw p subjects, k sequences each, every sequence cut to
    frames_per_seq frames.

    `dataset` is a sequence of objects with `.subject_id` and `.frames`
    ((n_frames, h, w) arrays).  Subjects with fewer than k sequences are
    resampled with replacement.  Returns (frames, labels):
    frames (p*k, frames_per_seq, 1, h, w), labels (p*k,) of subject indices.
    """
    spec.validate()
    by_subject: dict[str, list] = {}
    for seq in dataset:
        by_subject.setdefault(seq.subject_id, []).append(seq)
    subjects = sorted(by_subject)
    if len(subjects) < spec.p:
        raise ValueError(f"dataset has {len(subjects)} subjects, batch needs {spec.p}")
    chosen = rng.choice(len(subjects), size=spec.p, replace=False)

    frames_out = []
    labels = []
    for label, si in enumerate(chosen):
        seqs = by_subject[subjects[si]]
        picks = rng.integers(len(seqs), size=spec.k) if len(seqs) < spec.k \
            else rng.choice(len(seqs), size=spec.k, replace=False)
        for j in picks:
            sub = subsample_frames(seqs[j].frames, spec.frames_per_seq, rng)
            frames_out.append(sub[:, None, :, :])
            labels.append(label)
    return np.stack(frames_out).astype(np.float32), np.asarray(labels)


def hard_triplet_loss(embeddings: Tensor, labels, cfg: TripletLossConfig = TripletLossConfig()):
    """Batch-hard triplet loss, computed independently per strip.

    embeddings: (batch, strips, dim) tensor; labels: (batch,) subject ids.
    Per anchor and strip the hardest positive (largest squared distance) and
    hardest negative (smallest squared distance) form a margin hinge; hinges
    are averaged over strips per anchor, then over the anchors whose averaged
    loss is nonzero (0 when none).  Ties pick the lowest index.
    """
    cfg.validate()
    labels = np.asarray(labels)
    bsz, n_strips, _dim = embeddings.shape
    if labels.shape != (bsz,):
        raise ValueError(f"labels shape {labels.shape} != ({bsz},)")
    if len(np.unique(labels)) < 2:
        raise ValueError("triplet loss needs at least 2 subjects in the batch")

    e = embeddings.data
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(bsz, dtype=bool)
    neg_mask = ~same

    hinge = np.zeros((bsz, n_strips), dtype=np.float64)
    pos_idx = np.full((bsz, n_strips), -1, dtype=np.int64)
    neg_idx = np.full((bsz, n_strips), -1, dtype=np.int64)
    has_triplet = np.zeros(bsz, dtype=bool)
    for s in range(n_strips):
        diff = e[:, None, s, :] - e[None, :, s, :]
        d2 = np.einsum("ijd,ijd->ij", diff, diff)
        for i in range(bsz):
            pos = np.where(pos_mask[i])[0]
            neg = np.where(neg_mask[i])[0]
            if pos.size == 0 or neg.size == 0:
                continue
            has_triplet[i] = True
            jp = pos[np.argmax(d2[i, pos])]
            jn = neg[np.argmin(d2[i, neg])]
            h = cfg.margin + d2[i, jp] - d2[i, jn]
            if h > 0:
                hinge[i, s] = h
                pos_idx[i, s] = jp
                neg_idx[i, s] = jn

    per_anchor = hinge.mean(axis=1)
    active = (per_anchor > 0) & has_triplet
    n_active = int(active.sum())
    loss_val = per_anchor[active].mean() if n_active else 0.0
    out_data = np.asarray(loss_val, dtype=e.dtype)

    def bw(g):
        de = np.zeros_like(e)
        if n_active:
            w = float(g) / (n_active * n_strips)
            for i in np.where(active)[0]:
                for s in range(n_strips):
                    jp = pos_idx[i, s]
                    if jp < 0:
                        continue
                    jn = neg_idx[i, s]
                    dp = e[i, s] - e[jp, s]
                    dn = e[i, s] - e[jn, s]
                    de[i, s] += w * 2.0 * (dp - dn)
                    de[jp, s] += -w * 2.0 * dp
                    de[jn, s] += w * 2.0 * dn
        _accumulate(embeddings, de)

    if not _needs_grad(embeddings):
        return Tensor(out_data)
    return Tensor(out_data, parents=(embeddings,), backward=bw)


@dataclass
class TrainConfig:
    iterations: int = 100
    batch: BatchSpec = field(default_factory=BatchSpec)
    loss: TripletLossConfig = field(default_factory=TripletLossConfig)
    model: SfeConfig = field(default_factory=SfeConfig)
    learning_rate: float = 1e-4
    seed: int = 0
    out_dir: str | None = None
    checkpoint_every: int = 0          # 0: checkpoint only at the end
    log_every: int = 10


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; a diagnostic checkpoint was written if possible."""


def train(dataset, config: TrainConfig, model: SfeModel | None = None,
          progress=None):
    """Run the optimization loop; returns (model, trace).

    trace is a list of (iteration, loss) pairs, one per iteration, also
    written as CSV to `<out_dir>/loss.csv` when out_dir is set.
    """
    config.batch.validate()
    config.loss.validate()
    if model is None:
        model = SfeModel(config.model, seed=config.seed)
    opt = Adam(model.params, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    trace = []

    out_dir = config.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def checkpoint(tag):
        if out_dir:
            model.save(os.path.join(out_dir, f"model_{tag}.sfe"))

    for it in range(config.iterations):
        frames, labels = sample_batch(dataset, config.batch, rng)
        emb = model.embed_frames_batch(frames)
        loss = hard_triplet_loss(emb, labels, config.loss)
        value = float(loss.data)
        if not np.isfinite(value):
            checkpoint("diverged")
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append((it, value))
        if progress and (it % config.log_every == 0 or it == config.iterations - 1):
            progress(it, value)
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            checkpoint(f"iter{it + 1:06d}")

    checkpoint("final")
    if out_dir:
        with open(os.path.join(out_dir, "loss.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss"])
            writer.writerows(trace)
    return model, trace
