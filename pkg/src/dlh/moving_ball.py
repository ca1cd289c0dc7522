"""Procedural bouncing-ball sequences with Markov color switches.

A single ball of fixed radius moves at constant speed along one of the
eight axis or diagonal directions, reflecting elastically off the frame
walls. After the first frame, each step switches the ball to a uniformly
chosen *different* palette color with probability ``switch_prob``. Motion
is smooth and predictable; color switches are the only discrete surprises,
which is what makes the dataset a probe for the change indicators.

Sequences are a pure function of (config.seed, sequence index): generation
re-derives the stream from a seed sequence over that pair, so any sequence
can be regenerated in isolation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .distributions import ContractViolation

DATASET_VERSION = 1

DEFAULT_PALETTE: tuple[tuple[int, int, int], ...] = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (0, 255, 255),
    (255, 0, 255),
)

_SQ = math.sqrt(0.5)
# Eight headings: axis-aligned and diagonal unit vectors (dx, dy).
_DIRECTIONS = np.array(
    [
        (1.0, 0.0),
        (_SQ, _SQ),
        (0.0, 1.0),
        (-_SQ, _SQ),
        (-1.0, 0.0),
        (-_SQ, -_SQ),
        (0.0, -1.0),
        (_SQ, -_SQ),
    ]
)


class DatasetFormatError(RuntimeError):
    """On-disk dataset is missing pieces or has an unsupported version."""


@dataclass(frozen=True)
class MovingBallConfig:
    frame_size: int = 32
    ball_radius: int = 4
    speed: float = 2.0
    switch_prob: float = 0.0
    sequence_length: int = 100
    palette: tuple[tuple[int, int, int], ...] = DEFAULT_PALETTE
    seed: int = 0

    def __post_init__(self):
        if self.ball_radius < 1:
            raise ContractViolation("ball_radius must be >= 1")
        if self.frame_size < 2 * self.ball_radius + 1:
            raise ContractViolation(
                f"frame_size {self.frame_size} cannot contain a radius "
                f"{self.ball_radius} ball"
            )
        if self.speed <= 0:
            raise ContractViolation("speed must be > 0")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ContractViolation(
                f"switch_prob must be within [0, 1], got {self.switch_prob}"
            )
        if self.sequence_length < 1:
            raise ContractViolation("sequence_length must be >= 1")
        if len(self.palette) < 2:
            raise ContractViolation("palette needs at least 2 colors")
        if len(set(self.palette)) != len(self.palette):
            raise ContractViolation("palette colors must be distinct")
        for color in self.palette:
            if len(color) != 3 or any(not 0 <= v <= 255 for v in color):
                raise ContractViolation(f"bad palette entry {color!r}")
        if self.seed < 0:
            raise ContractViolation("seed must be >= 0")


def render_frame(
    size: int,
    radius: int,
    center: np.ndarray,
    rgb: tuple[int, int, int],
    antialias: bool = False,
) -> np.ndarray:
    """One [size, size, 3] float32 frame; black background, hard ball edge.

    ``antialias=True`` soft-edges the ball by 4x4 subpixel coverage; it is a
    rendering nicety for figures, never used for training data.
    """
    cx, cy = float(center[0]), float(center[1])
    color = np.asarray(rgb, dtype=np.float32) / 255.0
    frame = np.zeros((size, size, 3), dtype=np.float32)
    if antialias:
        off = (np.arange(4) + 0.5) / 4.0 - 0.5
        cover = np.zeros((size, size), dtype=np.float32)
        for oy in off:
            for ox in off:
                yy, xx = np.ogrid[0:size, 0:size]
                cover += (
                    (xx + ox - cx) ** 2 + (yy + oy - cy) ** 2 <= radius**2
                ).astype(np.float32)
        frame = (cover / 16.0)[..., None] * color
    else:
        yy, xx = np.ogrid[0:size, 0:size]
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
        frame[mask] = color
    return frame


def _reflect(p: float, v: float, lo: float, hi: float) -> tuple[float, float]:
    while p < lo or p > hi:
        if p < lo:
            p = 2.0 * lo - p
        else:
            p = 2.0 * hi - p
        v = -v
    return p, v


def generate_sequence(
    cfg: MovingBallConfig, index: int
) -> tuple[np.ndarray, list[dict]]:
    """Frames [T, size, size, 3] float32 in [0, 1] plus the switch event log.

    Events are dicts {"t", "from", "to"} with palette indices; the frame at
    ``t`` is the first one showing the new color.
    """
    if index < 0:
        raise ContractViolation("sequence index must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
    size, r = cfg.frame_size, cfg.ball_radius
    lo, hi = float(r), float(size - 1 - r)
    T = cfg.sequence_length

    pos = rng.uniform(lo, hi, size=2)
    vel = cfg.speed * _DIRECTIONS[rng.integers(len(_DIRECTIONS))].copy()
    color = int(rng.integers(len(cfg.palette)))

    frames = np.zeros((T, size, size, 3), dtype=np.float32)
    frames[0] = render_frame(size, r, pos, cfg.palette[color])
    events: list[dict] = []
    for t in range(1, T):
        px, vx = _reflect(pos[0] + vel[0], vel[0], lo, hi)
        py, vy = _reflect(pos[1] + vel[1], vel[1], lo, hi)
        pos = np.array([px, py])
        vel = np.array([vx, vy])
        if rng.random() < cfg.switch_prob:
            other = int(rng.integers(len(cfg.palette) - 1))
            if other >= color:
                other += 1
            events.append({"t": t, "from": color, "to": other})
            color = other
        frames[t] = render_frame(size, r, pos, cfg.palette[color])
    return frames, events


def generate_dataset(cfg: MovingBallConfig, count: int) -> tuple[np.ndarray, list[list[dict]]]:
    if count < 1:
        raise ContractViolation("count must be >= 1")
    frames = np.zeros(
        (count, cfg.sequence_length, cfg.frame_size, cfg.frame_size, 3),
        dtype=np.float32,
    )
    events = []
    for i in range(count):
        frames[i], ev = generate_sequence(cfg, i)
        events.append(ev)
    return frames, events


def export_dataset(cfg: MovingBallConfig, count: int, out_dir: str | Path) -> dict:
    """Write seq{i:05d}/frame{t:04d}.png trees plus manifest.json.

    Pixels are quantized to uint8; since generated intensities are exact
    palette values the round trip through PNG is lossless here.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        frames, events = generate_sequence(cfg, i)
        seq_dir = out / f"seq{i:05d}"
        seq_dir.mkdir(exist_ok=True)
        quant = np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)
        for t in range(frames.shape[0]):
            Image.fromarray(quant[t]).save(seq_dir / f"frame{t:04d}.png")
        with open(seq_dir / "events.json", "w") as fh:
            json.dump(events, fh)
    manifest = {
        "version": DATASET_VERSION,
        "frame_size": cfg.frame_size,
        "ball_radius": cfg.ball_radius,
        "speed": cfg.speed,
        "palette": [list(c) for c in cfg.palette],
        "switch_prob": cfg.switch_prob,
        "sequence_length": cfg.sequence_length,
        "count": count,
        "seed": cfg.seed,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


class BallDataset:
    """Importer for an exported dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DatasetFormatError(f"no manifest.json under {self.root}")
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        version = manifest.get("version")
        if version != DATASET_VERSION:
            raise DatasetFormatError(
                f"dataset version {version!r} unsupported, expected {DATASET_VERSION}"
            )
        self.manifest = manifest
        self.count = int(manifest["count"])
        self.config = MovingBallConfig(
            frame_size=int(manifest["frame_size"]),
            ball_radius=int(manifest["ball_radius"]),
            speed=float(manifest["speed"]),
            switch_prob=float(manifest["switch_prob"]),
            sequence_length=int(manifest["sequence_length"]),
            palette=tuple(tuple(c) for c in manifest["palette"]),
            seed=int(manifest["seed"]),
        )

    def __len__(self) -> int:
        return self.count

    def load(self, index: int) -> np.ndarray:
        if not 0 <= index < self.count:
            raise IndexError(index)
        seq_dir = self.root / f"seq{index:05d}"
        T = self.config.sequence_length
        frames = np.zeros(
            (T, self.config.frame_size, self.config.frame_size, 3), dtype=np.float32
        )
        for t in range(T):
            path = seq_dir / f"frame{t:04d}.png"
            if not path.exists():
                raise DatasetFormatError(f"missing frame {path}")
            frames[t] = np.asarray(Image.open(path), dtype=np.float32) / 255.0
        return frames

    def load_all(self) -> np.ndarray:
        return np.stack([self.load(i) for i in range(self.count)])

    def events(self, index: int) -> list[dict]:
        path = self.root / f"seq{index:05d}" / "events.json"
        if not path.exists():
            return []
        with open(path) as fh:
            return json.load(fh)


class ProceduralSampler:
    """Endless training stream: fresh sequences drawn by index.

    Each batch picks random sequence indices and synthesizes them at the
    requested length, so the sampler never repeats unless indices collide.
    """

    def __init__(self, cfg: MovingBallConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)

    def sample(self, batch: int, length: int) -> np.ndarray:
        cfg = replace(self.cfg, sequence_length=length)
        out = np.zeros(
            (batch, length, cfg.frame_size, cfg.frame_size, 3), dtype=np.float32
        )
        idx = self.rng.integers(0, 2**31 - 1, size=batch)
        for b in range(batch):
            out[b], _ = generate_sequence(cfg, int(idx[b]))
        return out

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]


class ArraySampler:
    """Sampler over a fixed array [M, T, H, W, C]; windows when length < T."""

    def __init__(self, frames: np.ndarray, seed: int = 0):
        if frames.ndim != 5:
            raise ContractViolation("expected frames [M, T, H, W, C]")
        self.frames = frames
        self.rng = np.random.default_rng(seed)

    def sample(self, batch: int, length: int) -> np.ndarray:
        M, T = self.frames.shape[:2]
        if length > T:
            raise ContractViolation(
                f"requested length {length} > stored length {T}"
            )
        idx = self.rng.integers(0, M, size=batch)
        if length == T:
            return self.frames[idx].copy()
        starts = self.rng.integers(0, T - length + 1, size=batch)
        return np.stack(
            [self.frames[i, s : s + length] for i, s in zip(idx, starts)]
        )

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
