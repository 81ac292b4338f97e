"""Dataset indexing (CASIA-B-style directory layout), silhouette
preprocessing, and split protocols."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

FRAME_EXTENSIONS = (".png", ".pgm")

TARGET_HEIGHT = 64
TARGET_WIDTH = 44


@dataclass
class SilhouetteSequence:
    """Ordered preprocessed frames of one subject/condition/view."""
    frames: np.ndarray               # (n_frames, 64, 44) float32 in [0, 1]
    subject_id: str | None = None
    condition: str | None = None
    view: str | None = None

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"sequence needs >= 1 frame, got shape {self.frames.shape}")
        if self.frames.shape[1:] != (TARGET_HEIGHT, TARGET_WIDTH):
            raise ValueError(f"frames must be {TARGET_HEIGHT}x{TARGET_WIDTH}, "
                             f"got {self.frames.shape[1:]}")

    @property
    def meta(self):
        return {"subject_id": self.subject_id, "condition": self.condition,
                "view": self.view}


@dataclass(frozen=True)
class IndexEntry:
    subject_id: str
    condition: str
    seq_no: int
    view: str
    path: str
    split: str | None = None          # "train" | "gallery" | "probe:<COND>" | None


@dataclass
class DatasetIndex:
    root: str
    entries: list = field(default_factory=list)
    problems: list = field(default_factory=list)   # unreadable/empty directories

    def train(self):
        return [e for e in self.entries if e.split == "train"]

    def gallery(self):
        return [e for e in self.entries if e.split == "gallery"]

    def probes(self, condition=None):
        out = [e for e in self.entries if e.split and e.split.startswith("probe:")]
        if condition is not None:
            out = [e for e in out if e.condition == condition]
        return out

    def probe_conditions(self):
        return sorted({e.condition for e in self.probes()})

    def subjects(self):
        return sorted({e.subject_id for e in self.entries})


@dataclass(frozen=True)
class SplitProtocol:
    """Data-driven split assignment over an indexed directory tree.

    train_subjects: the first N subjects (sorted ids) go to the training
    split.  gallery/probe selectors map condition -> sequence numbers within
    the test subjects.  gallery_all_views selects the evaluation mode.
    """
    train_subjects: int
    gallery: dict                     # condition -> list of seq numbers
    probes: dict                      # condition -> list of seq numbers
    gallery_all_views: bool = False
    name: str = "custom"

    @classmethod
    def casia_b(cls):
        # subjects 001-074 train; NM#1-4 gallery; NM#5-6, BG#1-2, CL#1-2 probes
        return cls(train_subjects=74,
                   gallery={"NM": [1, 2, 3, 4]},
                   probes={"NM": [5, 6], "BG": [1, 2], "CL": [1, 2]},
                   gallery_all_views=False, name="casia-b")

    @classmethod
    def mini_oumvlp(cls):
        # first 350 subjects train; seq #01 gallery, seq #00 probe, 14 views
        return cls(train_subjects=350,
                   gallery={"NM": [1]},
                   probes={"NM": [0]},
                   gallery_all_views=True, name="mini-oumvlp")

    @classmethod
    def synthetic(cls, train_subjects, gallery_seqs=(1,), probe_seqs=(2,)):
        return cls(train_subjects=train_subjects,
                   gallery={"NM": list(gallery_seqs)},
                   probes={"NM": list(probe_seqs)},
                   gallery_all_views=False, name="synthetic")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls(train_subjects=d["train_subjects"], gallery=d["gallery"],
                   probes=d["probes"],
                   gallery_all_views=d.get("gallery_all_views", False),
                   name=d.get("name", os.path.basename(path)))


def resolve_protocol(spec, train_subjects=None):
    """Protocol from a preset name, a JSON file path, or pass-through."""
    if isinstance(spec, SplitProtocol):
        return spec
    if spec == "casia-b":
        return SplitProtocol.casia_b()
    if spec == "mini-oumvlp":
        return SplitProtocol.mini_oumvlp()
    if spec == "synthetic":
        if train_subjects is None:
            raise ValueError("the synthetic protocol needs --train-subjects")
        return SplitProtocol.synthetic(train_subjects)
    if os.path.exists(spec):
        return SplitProtocol.from_json(spec)
    raise ValueError(f"unknown protocol '{spec}'")


_SEQ_DIR = re.compile(r"^(?P<cond>[A-Za-z]+)-(?P<seq>\d+)$")


def index_dataset(root, protocol: SplitProtocol | None = None) -> DatasetIndex:
    """Walk root/<subject>/<condition>-<seq>/<view>/<frames> and assign splits.

    Directories without readable frames are recorded in index.problems, not
    silently dropped.  With a protocol, an empty resulting split is an error.
    """
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    index = DatasetIndex(root=root)
    subjects = sorted(d for d in os.listdir(root)
                      if os.path.isdir(os.path.join(root, d)))
    if not subjects:
        raise ValueError(f"dataset root has no subject directories: {root}")

    train_set = set(subjects[:protocol.train_subjects]) if protocol else set()

    for subject in subjects:
        sdir = os.path.join(root, subject)
        for seq_dir in sorted(os.listdir(sdir)):
            m = _SEQ_DIR.match(seq_dir)
            if not m:
                continue
            cond, seq_no = m.group("cond"), int(m.group("seq"))
            cdir = os.path.join(sdir, seq_dir)
            for view in sorted(os.listdir(cdir)):
                vdir = os.path.join(cdir, view)
                if not os.path.isdir(vdir):
                    continue
                frames = [f for f in os.listdir(vdir)
                          if f.lower().endswith(FRAME_EXTENSIONS)]
                if not frames:
                    index.problems.append(f"{vdir}: no readable frames")
                    continue
                split = None
                if protocol:
                    if subject in train_set:
                        split = "train"
                    elif seq_no in protocol.gallery.get(cond, []):
                        split = "gallery"
                    elif seq_no in protocol.probes.get(cond, []):
                        split = f"probe:{cond}"
                index.entries.append(IndexEntry(
                    subject_id=subject, condition=cond, seq_no=seq_no,
                    view=view, path=vdir, split=split))

    if protocol:
        for split_name, items in (("train", index.train()),
                                  ("gallery", index.gallery()),
                                  ("probe", index.probes())):
            if not items:
                raise ValueError(f"protocol '{protocol.name}' produced an empty "
                                 f"{split_name} split under {root}")
    return index


def _preprocess_frame(raw: np.ndarray) -> np.ndarray | None:
    """Binarize, tight-crop, resize to height 64, center on the top-half
    centroid, fit width to 44.  Returns None for frames with no foreground."""
    mask = (raw >= 0.5).astype(np.float32)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    cropped = mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    h, w = cropped.shape
    new_w = max(1, round(w * TARGET_HEIGHT / h))
    img = Image.fromarray((cropped * 255).astype(np.uint8))
    resized = np.asarray(img.resize((new_w, TARGET_HEIGHT), Image.BILINEAR),
                         dtype=np.float32) / 255.0

    top = resized[:TARGET_HEIGHT // 2]
    weight = top.sum()
    xc = float((top.sum(axis=0) * np.arange(new_w)).sum() / weight) if weight > 0 \
        else (new_w - 1) / 2.0
    left = int(round(xc)) - TARGET_WIDTH // 2

    out = np.zeros((TARGET_HEIGHT, TARGET_WIDTH), dtype=np.float32)
    src0 = max(0, left)
    src1 = min(new_w, left + TARGET_WIDTH)
    if src1 > src0:
        out[:, src0 - left:src1 - left] = resized[:, src0:src1]
    return np.clip(out, 0.0, 1.0)


def load_sequence(entry: IndexEntry) -> SilhouetteSequence:
    """Read and preprocess every frame in an entry's directory, in
    zero-padded filename order."""
    names = sorted(f for f in os.listdir(entry.path)
                   if f.lower().endswith(FRAME_EXTENSIONS))
    frames = []
    for name in names:
        raw = np.asarray(Image.open(os.path.join(entry.path, name)).convert("L"),
                         dtype=np.float32) / 255.0
        frame = _preprocess_frame(raw)
        if frame is None:
            log.warning("skipping empty frame %s/%s", entry.path, name)
            continue
        frames.append(frame)
    if not frames:
        raise ValueError(f"{entry.path}: no frames with foreground pixels")
    return SilhouetteSequence(frames=np.stack(frames),
                              subject_id=entry.subject_id,
                              condition=entry.condition,
                              view=entry.view)
