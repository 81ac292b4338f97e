"""Synthetic silhouette generator: an articulated ellipse figure walking,
rendered per view, written in the standard dataset directory layout.

Exists so the full pipeline can be exercised at desk scale without any
real gait dataset; bitwise deterministic per seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .dataset import DatasetIndex, index_dataset

CANVAS_H = 96
CANVAS_W = 72


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 4
    sequences_per_subject: int = 2        # per (subject, view)
    frames_per_sequence: int = 30
    views: tuple = (0, 45, 90, 135)       # degrees
    noise_level: float = 0.0
    seed: int = 0


@dataclass
class _Body:
    torso_w: float
    torso_h: float
    head_r: float
    leg_len: float
    leg_w: float
    arm_len: float
    arm_w: float
    period: float
    stride_amp: float
    arm_amp: float
    shoulder_y: float
    hip_y: float


def _draw_body(seed, subject_idx) -> _Body:
    rng = np.random.default_rng([seed, subject_idx])
    return _Body(
        torso_w=rng.uniform(4.5, 9.0),
        torso_h=rng.uniform(12.0, 16.0),
        head_r=rng.uniform(3.5, 6.0),
        leg_len=rng.uniform(30.0, 40.0),
        leg_w=rng.uniform(2.2, 4.0),
        arm_len=rng.uniform(22.0, 30.0),
        arm_w=rng.uniform(1.8, 3.0),
        period=rng.uniform(8.0, 16.0),
        stride_amp=rng.uniform(0.35, 0.7),
        arm_amp=rng.uniform(0.2, 0.5),
        shoulder_y=rng.uniform(26.0, 31.0),
        hip_y=rng.uniform(46.0, 52.0),
    )


def _ellipse(xx, yy, cx, cy, rx, ry, tilt=0.0):
    dx = xx - cx
    dy = yy - cy
    if tilt != 0.0:
        c, s = np.cos(tilt), np.sin(tilt)
        u = dx * c - dy * s
        v = dx * s + dy * c
    else:
        u, v = dx, dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _limb(xx, yy, origin_x, origin_y, length, width, angle, xscale, cx0):
    # ellipse from a joint, long axis tilted `angle` from vertical
    cx = origin_x + np.sin(angle) * length / 2.0
    cy = origin_y + np.cos(angle) * length / 2.0
    cx = cx0 + (cx - cx0) * xscale
    return _ellipse(xx, yy, cx, cy, max(0.8, width * xscale), length / 2.0, tilt=angle)


def render_frame(body: _Body, phase: float, view_deg: float,
                 noise_level=0.0, noise_rng=None) -> np.ndarray:
    """One binary silhouette frame (CANVAS_H x CANVAS_W uint8, 0/255)."""
    yy, xx = np.mgrid[0:CANVAS_H, 0:CANVAS_W].astype(np.float64)
    cx0 = CANVAS_W / 2.0
    lateral = abs(np.sin(np.deg2rad(view_deg)))
    xscale = 0.6 + 0.4 * lateral
    swing = body.stride_amp * (0.3 + 0.7 * lateral)
    arm_swing = body.arm_amp * (0.3 + 0.7 * lateral)
    bounce = 1.2 * abs(np.sin(phase))

    torso_cy = (body.shoulder_y + body.hip_y) / 2.0 - bounce
    mask = _ellipse(xx, yy, cx0, torso_cy, body.torso_w * xscale, body.torso_h)
    mask |= _ellipse(xx, yy, cx0, body.shoulder_y - body.torso_h / 2.0
                     - body.head_r - bounce, body.head_r * (0.8 + 0.2 * xscale),
                     body.head_r)
    hip_y = body.hip_y - bounce
    sh_y = body.shoulder_y - bounce
    mask |= _limb(xx, yy, cx0, hip_y, body.leg_len, body.leg_w,
                  swing * np.sin(phase), xscale, cx0)
    mask |= _limb(xx, yy, cx0, hip_y, body.leg_len, body.leg_w,
                  swing * np.sin(phase + np.pi), xscale, cx0)
    mask |= _limb(xx, yy, cx0, sh_y, body.arm_len, body.arm_w,
                  arm_swing * np.sin(phase + np.pi), xscale, cx0)
    mask |= _limb(xx, yy, cx0, sh_y, body.arm_len, body.arm_w,
                  arm_swing * np.sin(phase), xscale, cx0)

    mask = mask.astype(np.uint8)
    if noise_level > 0.0 and noise_rng is not None:
        flips = noise_rng.random(mask.shape) < noise_level
        mask = mask ^ flips.astype(np.uint8)
    return mask * 255


def synth_generate(spec: SynthSpec, out_path) -> DatasetIndex:
    """Render the full dataset tree under out_path and index it (unsplit)."""
    os.makedirs(out_path, exist_ok=True)
    for subj in range(spec.n_subjects):
        body = _draw_body(spec.seed, subj)
        subject_id = f"{subj + 1:03d}"
        for seq in range(1, spec.sequences_per_subject + 1):
            for view in spec.views:
                seq_rng = np.random.default_rng([spec.seed, subj, seq, int(view)])
                phase0 = seq_rng.uniform(0.0, 2.0 * np.pi)
                vdir = os.path.join(out_path, subject_id, f"NM-{seq:02d}", f"{int(view):03d}")
                os.makedirs(vdir, exist_ok=True)
                for f in range(spec.frames_per_sequence):
                    phase = phase0 + 2.0 * np.pi * f / body.period
                    frame = render_frame(body, phase, view,
                                         noise_level=spec.noise_level,
                                         noise_rng=seq_rng)
                    Image.fromarray(frame, mode="L").save(
                        os.path.join(vdir, f"{f + 1:04d}.png"))
    return index_dataset(out_path, protocol=None)
