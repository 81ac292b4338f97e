"""The spatio-temporal feature extraction network.

Per-frame convolutional backbone (four convolutions, two poolings), temporal
fusion by elementwise max over frames, fine-grained extraction by horizontal
blocking with per-block convolutions, width pooling (mean + max), and one
independent affine head per horizontal strip.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CHECKPOINT_MAGIC = b"SFE1"


@dataclass(frozen=True)
class SfeConfig:
    frame_height: int = 64
    frame_width: int = 44
    # backbone: (out_channels, kernel, pad) per convolution
    backbone: tuple = ((32, 5, 2), (32, 3, 1), (64, 3, 1), (128, 3, 1))
    ffe_stages: tuple = (4,)          # block count per stage; (4, 8) stacks two
    share_ffe_blocks: bool = False
    strip_dim: int = 256
    leaky_slope: float = 0.01

    @property
    def feature_channels(self):
        return self.backbone[-1][0]

    @property
    def feature_height(self):
        return self.frame_height // 4

    @property
    def feature_width(self):
        return self.frame_width // 4

    @property
    def n_strips(self):
        return self.feature_height

    @property
    def embedding_dim(self):
        return self.n_strips * self.strip_dim

    def validate(self):
        if self.frame_height % 4 or self.frame_width % 4:
            raise ValueError("frame dims must be divisible by 4 (two 2x2 poolings)")
        for n in self.ffe_stages:
            if n < 1 or self.feature_height % n:
                raise ValueError(f"feature height {self.feature_height} not divisible "
                                 f"by block count {n}")

    def to_dict(self):
        return {
            "frame_height": self.frame_height,
            "frame_width": self.frame_width,
            "backbone": [list(c) for c in self.backbone],
            "ffe_stages": list(self.ffe_stages),
            "share_ffe_blocks": self.share_ffe_blocks,
            "strip_dim": self.strip_dim,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            frame_height=d["frame_height"],
            frame_width=d["frame_width"],
            backbone=tuple(tuple(c) for c in d["backbone"]),
            ffe_stages=tuple(d["ffe_stages"]),
            share_ffe_blocks=d["share_ffe_blocks"],
            strip_dim=d["strip_dim"],
            leaky_slope=d["leaky_slope"],
        )


@dataclass
class StripEmbedding:
    """Ordered per-strip vectors plus their concatenation."""
    strips: np.ndarray                  # (n_strips, strip_dim)
    subject_id: str | None = None
    condition: str | None = None
    view: str | None = None

    @property
    def flat(self):
        return self.strips.reshape(-1)


class SfeModel:
    """Holds the named parameter tensors and runs the embedding pipeline."""

    def __init__(self, config: SfeConfig = SfeConfig(), seed: int = 0,
                 dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        in_c = 1
        for i, (out_c, k, _pad) in enumerate(config.backbone, start=1):
            self._add_conv(rng, f"fem.c{i}", in_c, out_c, k)
            in_c = out_c
        c = config.feature_channels
        for s, n_blocks in enumerate(config.ffe_stages):
            blocks = 1 if config.share_ffe_blocks else n_blocks
            for b in range(blocks):
                self._add_conv(rng, f"ffe.s{s}.b{b}", c, c, 3)
        for i in range(config.n_strips):
            fan_in = c
            bound = np.sqrt(1.0 / fan_in)
            self.params[f"head.{i}.w"] = Tensor(
                rng.uniform(-bound, bound, (c, config.strip_dim)).astype(dtype),
                requires_grad=True, name=f"head.{i}.w")
            self.params[f"head.{i}.b"] = Tensor(
                np.zeros(config.strip_dim, dtype=dtype),
                requires_grad=True, name=f"head.{i}.b")

    def _add_conv(self, rng, name, in_c, out_c, k):
        fan_in = in_c * k * k
        bound = np.sqrt(1.0 / fan_in)
        self.params[f"{name}.w"] = Tensor(
            rng.uniform(-bound, bound, (out_c, in_c, k, k)).astype(self.dtype),
            requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(
            np.zeros(out_c, dtype=self.dtype), requires_grad=True, name=f"{name}.b")

    # -- stages ------------------------------------------------------------

    def fem_forward(self, frames: Tensor) -> Tensor:
        """(n, 1, H, W) frames -> (n, C, H/4, W/4) feature maps."""
        cfg = self.config
        expect = (1, cfg.frame_height, cfg.frame_width)
        if frames.shape[-3:] != expect:
            raise ShapeError(f"frames must be (..., {expect[0]}, {expect[1]}, "
                             f"{expect[2]}), got {frames.shape}")
        x = frames
        n_convs = len(cfg.backbone)
        for i, (_out_c, _k, pad) in enumerate(cfg.backbone, start=1):
            x = ad.conv2d(x, self.params[f"fem.c{i}.w"], self.params[f"fem.c{i}.b"], pad)
            x = ad.leaky_rectify(x, cfg.leaky_slope)
            if i in (n_convs // 2, n_convs):
                x = ad.maxpool2d(x)
        return x

    def tff_fuse(self, frames: Tensor) -> Tensor:
        """(n_frames, 1, H, W) -> (C, H/4, W/4): elementwise max of per-frame
        backbone outputs.  Order-invariant and monotone in the frame set."""
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise ShapeError(f"expected a non-empty (frames, 1, h, w) stack, got {frames.shape}")
        per_frame = self.fem_forward(frames)
        return ad.amax(per_frame, axis=0)

    def ffe_forward(self, ft: Tensor) -> Tensor:
        """Split along height, convolve each block with its own weights,
        reassemble.  No activation: the output feeds mean/max pooling."""
        cfg = self.config
        squeeze = ft.ndim == 3
        if squeeze:
            ft = ad.reshape(ft, (1,) + ft.shape)
        x = ft
        for s, n_blocks in enumerate(cfg.ffe_stages):
            block_h = x.shape[2] // n_blocks
            outs = []
            for b in range(n_blocks):
                widx = 0 if cfg.share_ffe_blocks else b
                w = self.params[f"ffe.s{s}.b{widx}.w"]
                bias = self.params[f"ffe.s{s}.b{widx}.b"]
                part = ad.narrow(x, 2, b * block_h, block_h)
                outs.append(ad.conv2d(part, w, bias, pad=1))
            x = outs[0] if n_blocks == 1 else ad.concatenate(outs, axis=2)
        return ad.reshape(x, x.shape[1:]) if squeeze else x

    def global_pool(self, fs: Tensor) -> Tensor:
        """Mean over width plus max over width: (..., C, H, W) -> (..., C, H)."""
        return ad.tmean(fs, axis=-1) + ad.amax(fs, axis=-1)

    def separate_fc(self, f: Tensor) -> Tensor:
        """(batch, C, strips) -> (batch, strips, strip_dim) via per-strip heads."""
        cfg = self.config
        w = ad.stack([self.params[f"head.{i}.w"] for i in range(cfg.n_strips)], axis=0)
        b = ad.stack([self.params[f"head.{i}.b"] for i in range(cfg.n_strips)], axis=0)
        return ad.strip_affine(f, w, b)

    # -- embedding ---------------------------------------------------------

    def embed_frames_batch(self, frames: np.ndarray) -> Tensor:
        """Differentiable embedding of a training batch.

        frames: (batch, n_frames, 1, H, W) float array, equal-length sequences.
        Returns a (batch, n_strips, strip_dim) tensor on the autodiff graph.
        """
        bsz, n_frames = frames.shape[:2]
        flat = Tensor(np.ascontiguousarray(frames.reshape((bsz * n_frames,) + frames.shape[2:])),
                      dtype=self.dtype)
        fg = self.fem_forward(flat)
        fg = ad.reshape(fg, (bsz, n_frames) + fg.shape[1:])
        ft = ad.amax(fg, axis=1)
        fs = self.ffe_forward(ft)
        pooled = self.global_pool(fs)
        return self.separate_fc(pooled)

    def embed_sequence(self, frames: np.ndarray, meta=None) -> StripEmbedding:
        """Inference embedding of one sequence (all frames used).

        frames: (n_frames, H, W) or (n_frames, 1, H, W) array in [0, 1].
        """
        if frames.ndim == 3:
            frames = frames[:, None, :, :]
        out = self.embed_frames_batch(frames[None].astype(self.dtype, copy=False))
        strips = out.data[0].copy()
        meta = meta or {}
        return StripEmbedding(strips=strips,
                              subject_id=meta.get("subject_id"),
                              condition=meta.get("condition"),
                              view=meta.get("view"))

    # -- checkpoint container ------------------------------------------------

    def save(self, path):
        names = sorted(self.params)
        header = {
            "config": self.config.to_dict(),
            "tensors": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(self.params[n].data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a model checkpoint (magic {magic!r})")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            model = cls(SfeConfig.from_dict(header["config"]))
            for spec in header["tensors"]:
                shape = tuple(spec["shape"])
                count = int(np.prod(shape))
                data = np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(shape)
                if spec["name"] not in model.params:
                    raise ValueError(f"{path}: unknown tensor '{spec['name']}'")
                model.params[spec["name"]].data = data.astype(np.float32).copy()
        return model
