"""Unit tests for batch sampling, the per-strip batch-hard triplet loss
(against an exhaustive brute force), Adam, and the training loop."""

import numpy as np
import pytest

from gaitkit.autodiff import Tensor
from gaitkit.gradcheck import finite_diff_check
from gaitkit.optim import Adam, NonFiniteGradientError
from gaitkit.training import (BatchSpec, TrainConfig, TripletLossConfig,
                              hard_triplet_loss, sample_batch,
                              subsample_frames, train)

from conftest import make_sequences
from gaitkit.model import SfeConfig


# -- independent brute-force reference ---------------------------------------

def loss_brute_force(emb, labels, margin):
    """Enumerate every (anchor, positive, negative) triple per strip and
    take the worst positive / best negative explicitly."""
    bsz, strips, _ = emb.shape
    per_anchor = []
    for i in range(bsz):
        strip_hinges = []
        for s in range(strips):
            pos_d = [np.sum((emb[i, s] - emb[j, s]) ** 2)
                     for j in range(bsz) if j != i and labels[j] == labels[i]]
            neg_d = [np.sum((emb[i, s] - emb[j, s]) ** 2)
                     for j in range(bsz) if labels[j] != labels[i]]
            if not pos_d or not neg_d:
                strip_hinges = None
                break
            strip_hinges.append(max(0.0, margin + max(pos_d) - min(neg_d)))
        if strip_hinges is not None:
            per_anchor.append(np.mean(strip_hinges))
    active = [v for v in per_anchor if v > 0]
    return float(np.mean(active)) if active else 0.0


@pytest.mark.parametrize("seed", range(20))
def test_loss_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    bsz = int(rng.integers(4, 10))
    labels = rng.integers(0, 3, size=bsz)
    if len(np.unique(labels)) < 2:
        labels[0] = (labels[1] + 1) % 3
    emb = rng.standard_normal((bsz, 3, 5))
    ours = float(hard_triplet_loss(Tensor(emb, dtype=np.float64), labels,
                                   TripletLossConfig(0.2)).data)
    assert ours == pytest.approx(loss_brute_force(emb, labels, 0.2), abs=1e-9)


def test_loss_hand_case():
    # two subjects, one strip, 1-d embeddings at 0, 1 (subject A), 10 (subject B)
    # anchor 0: pos d=1, neg d=100 -> hinge 0 (margin 0.2)
    # anchor 1: pos d=1, neg d=81 -> hinge 0; anchor 2: pos d=100... no positive pair for B alone
    emb = np.array([[[0.0]], [[1.0]], [[10.0]], [[10.5]]])
    labels = np.array([0, 0, 1, 1])
    # anchor 2: pos (10.5) d=0.25, neg min d=81 -> 0; all hinges zero
    loss = hard_triplet_loss(Tensor(emb, dtype=np.float64), labels)
    assert float(loss.data) == 0.0
    # shrink the gap so a hinge activates: subjects at 0,1 and 1.5,2.5
    emb = np.array([[[0.0]], [[1.0]], [[1.5]], [[2.5]]])
    labels = np.array([0, 0, 1, 1])
    # anchor 0: pos d=1, neg d=1.5^2=2.25 -> hinge 0.2+1-2.25 < 0 -> 0
    # anchor 1: pos d=1, neg d=0.25 -> 0.2+1-0.25 = 0.95
    # anchor 2: pos d=1, neg d=0.25 -> 0.95; anchor 3: pos d=1, neg 2.25 -> 0
    loss = float(hard_triplet_loss(Tensor(emb, dtype=np.float64), labels).data)
    assert loss == pytest.approx(0.95)


def test_loss_zero_when_all_margins_met():
    emb = np.array([[[0.0]], [[0.1]], [[100.0]], [[100.1]]])
    labels = np.array([0, 0, 1, 1])
    assert float(hard_triplet_loss(Tensor(emb), labels).data) == 0.0


def test_loss_requires_two_subjects():
    emb = Tensor(np.zeros((4, 2, 3)))
    with pytest.raises(ValueError, match="2 subjects"):
        hard_triplet_loss(emb, np.zeros(4, dtype=int))


def test_loss_label_shape_mismatch():
    with pytest.raises(ValueError):
        hard_triplet_loss(Tensor(np.zeros((4, 2, 3))), np.array([0, 1]))


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_check(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=6)
    if len(np.unique(labels)) < 2:
        labels[0] = (labels[1] + 1) % 3
    emb = Tensor(rng.standard_normal((6, 2, 4)), requires_grad=True,
                 dtype=np.float64)
    rep = finite_diff_check(lambda e: hard_triplet_loss(e, labels), [emb], seed=seed)
    assert rep.passed, rep.max_rel_err


# -- sampling -----------------------------------------------------------------

def test_batchspec_validation():
    with pytest.raises(ValueError):
        BatchSpec(p=1, k=4).validate()
    with pytest.raises(ValueError):
        BatchSpec(p=4, k=1).validate()


def test_subsample_exact_and_wraparound():
    rng = np.random.default_rng(0)
    frames = np.arange(5)[:, None, None] * np.ones((5, 2, 2))
    out = subsample_frames(frames, 3, rng)
    assert out.shape == (3, 2, 2)
    # sorted without replacement: strictly increasing frame ids
    ids = out[:, 0, 0]
    assert np.all(np.diff(ids) > 0)
    out = subsample_frames(frames, 8, rng)     # longer than the sequence
    assert out.shape == (8, 2, 2)
    ids = out[:, 0, 0].astype(int)
    assert np.array_equal(np.sort(np.unique(ids)), np.arange(5))


def test_sample_batch_shapes_and_labels():
    data = make_sequences(n_subjects=5, seqs_per_subject=3, n_frames=6)
    spec = BatchSpec(p=3, k=2, frames_per_seq=4)
    frames, labels = sample_batch(data, spec, np.random.default_rng(0))
    assert frames.shape == (6, 4, 1, 16, 12)
    assert frames.dtype == np.float32
    assert np.array_equal(labels, [0, 0, 1, 1, 2, 2])


def test_sample_batch_with_replacement_when_short():
    data = make_sequences(n_subjects=2, seqs_per_subject=1, n_frames=6)
    frames, labels = sample_batch(data, BatchSpec(p=2, k=3, frames_per_seq=4),
                                  np.random.default_rng(1))
    assert frames.shape == (6, 4, 1, 16, 12)


def test_sample_batch_too_few_subjects():
    data = make_sequences(n_subjects=2, seqs_per_subject=2, n_frames=6)
    with pytest.raises(ValueError, match="subjects"):
        sample_batch(data, BatchSpec(p=4, k=2, frames_per_seq=4),
                     np.random.default_rng(0))


# -- Adam ---------------------------------------------------------------------

def test_adam_first_step_matches_formula():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([0.5, -1.0])
    opt = Adam({"p": p}, learning_rate=0.1)
    opt.step()
    # after bias correction the first step is ~lr * sign(g)
    expected = np.array([1.0, 2.0]) - 0.1 * np.array([0.5, -1.0]) / (
        np.abs(np.array([0.5, -1.0])) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-6)
    assert opt.step_count == 1


def test_adam_missing_gradient_keeps_parameter():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam({"p": p})
    opt.step()
    np.testing.assert_array_equal(p.data, [3.0])


def test_adam_rejects_nonfinite_gradient_without_mutation():
    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam({"p": p, "q": q}, learning_rate=0.1)
    p.grad = np.array([1.0])
    q.grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradientError) as exc:
        opt.step()
    assert exc.value.param_name == "q"
    np.testing.assert_array_equal(p.data, [1.0])     # untouched
    assert opt.step_count == 0
    assert np.all(opt.first_moment["p"] == 0.0)


def test_adam_zero_grad():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    Adam({"p": p}).zero_grad()
    assert p.grad is None


# -- training loop ------------------------------------------------------------

def test_train_smoke_writes_artifacts(tmp_path, tiny_config):
    data = make_sequences(n_subjects=4, seqs_per_subject=2, n_frames=6, seed=3)
    config = TrainConfig(iterations=3,
                         batch=BatchSpec(p=2, k=2, frames_per_seq=4),
                         model=tiny_config, seed=0, out_dir=str(tmp_path),
                         checkpoint_every=2)
    model, trace = train(data, config)
    assert len(trace) == 3
    assert all(np.isfinite(v) for _, v in trace)
    assert (tmp_path / "model_final.sfe").exists()
    assert (tmp_path / "model_iter000002.sfe").exists()
    lines = (tmp_path / "loss.csv").read_text().strip().splitlines()
    assert lines[0] == "iteration,loss"
    assert len(lines) == 4


def test_train_is_seed_deterministic(tiny_config):
    data = make_sequences(n_subjects=4, seqs_per_subject=2, n_frames=6, seed=3)
    config = TrainConfig(iterations=2, batch=BatchSpec(p=2, k=2, frames_per_seq=4),
                         model=tiny_config, seed=9)
    m1, t1 = train(data, config)
    m2, t2 = train(data, config)
    assert t1 == t2
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data)
