"""Shared fixtures: a down-scaled model configuration and in-memory
sequence builders so unit tests stay fast."""

from dataclasses import dataclass

import numpy as np
import pytest

from gaitkit.model import SfeConfig


@dataclass
class FakeSequence:
    frames: np.ndarray
    subject_id: str
    condition: str = "NM"
    view: str = "000"


@pytest.fixture
def tiny_config():
    # 16x12 frames -> 4x3 feature maps, 4 strips; small channel counts
    return SfeConfig(frame_height=16, frame_width=12,
                     backbone=((4, 3, 1), (4, 3, 1), (8, 3, 1), (8, 3, 1)),
                     ffe_stages=(2,), strip_dim=8)


def make_sequences(n_subjects, seqs_per_subject, n_frames, h=16, w=12, seed=0):
    """Random in-memory dataset shaped like loaded silhouette sequences."""
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_subjects):
        for _ in range(seqs_per_subject):
            frames = rng.random((n_frames, h, w)).astype(np.float32)
            out.append(FakeSequence(frames=frames, subject_id=f"{s + 1:03d}"))
    return out
