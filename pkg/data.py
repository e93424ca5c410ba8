"""Synthetic temporally coherent frame sequences and pair sampling."""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from scipy import ndimage

from formats.sequence_file import HEADER_SIZE, read_sequence, write_sequence
from helpers import ConfigError, FormatError
from loss import FramePair

data_logger = logging.getLogger('SlowPool.data')

SEQUENCE_KINDS = ('translating_blob', 'drifting_texture', 'constant', 'sinusoid')


@dataclass(frozen=True)
class FrameSequence:
    """T grayscale frames of identical size, stored as a read-only (T, H, W) array"""
    frames: np.ndarray

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 3:
            raise ConfigError(f"frames must be (T, H, W), got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise ConfigError(f"a sequence needs at least 2 frames, got {frames.shape[0]}")
        if not np.all(np.isfinite(frames)):
            raise ConfigError("frames contain non-finite values")
        frames.setflags(write=False)
        object.__setattr__(self, 'frames', frames)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def vectors(self) -> np.ndarray:
        """Frames flattened row-major to a (T, H*W) array"""
        return self.frames.reshape(self.T, -1)

    def reordered(self, order) -> 'FrameSequence':
        return FrameSequence(self.frames[np.asarray(order)])


@dataclass(frozen=True)
class SequenceSpec:
    kind: str
    T: int
    height: int
    width: int
    velocity: Tuple[float, float] = (0.0, 1.0)
    blob_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEQUENCE_KINDS:
            raise ConfigError(f"Unknown sequence kind '{self.kind}', expected one of {SEQUENCE_KINDS}")
        if self.T < 2:
            raise ConfigError(f"T must be at least 2, got {self.T}")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"Frame size must be positive, got {self.height}x{self.width}")
        if not self.blob_sigma > 0:
            raise ConfigError(f"blob_sigma must be positive, got {self.blob_sigma}")
        if len(self.velocity) != 2 or not all(math.isfinite(v) for v in self.velocity):
            raise ConfigError(f"velocity must be two finite reals, got {self.velocity}")


def _blob(height: int, width: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    """Isotropic Gaussian bump centered at (cy, cx) on a torus"""
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    dy = np.mod(rows - cy + height / 2.0, height) - height / 2.0
    dx = np.mod(cols - cx + width / 2.0, width) - width / 2.0
    return np.exp(-(dy ** 2 + dx ** 2) / (2.0 * sigma ** 2))


def _translating_blob(spec: SequenceSpec) -> np.ndarray:
    vy, vx = spec.velocity
    frames = []
    for t in range(spec.T):
        cy = np.mod(spec.height / 2.0 + t * vy, spec.height)
        cx = np.mod(spec.width / 2.0 + t * vx, spec.width)
        frames.append(_blob(spec.height, spec.width, cy, cx, spec.blob_sigma))
    return np.stack(frames)


def _drifting_texture(spec: SequenceSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal((spec.height, spec.width))
    field = ndimage.gaussian_filter(noise, sigma=spec.blob_sigma, mode='wrap')
    vy, vx = spec.velocity
    frames = []
    for t in range(spec.T):
        shift = (np.mod(t * vy, spec.height), np.mod(t * vx, spec.width))
        frames.append(ndimage.shift(field, shift, order=1, mode='grid-wrap'))
    return np.stack(frames)


def _sinusoid(spec: SequenceSpec) -> np.ndarray:
    """Rank-2 sequence cos(wt) u + sin(wt) v"""
    rng = np.random.default_rng(spec.seed)
    u = rng.standard_normal((spec.height, spec.width))
    v = rng.standard_normal((spec.height, spec.width))
    turns = math.hypot(*spec.velocity) or 1.0
    omega = 2.0 * math.pi * turns / spec.T
    t = np.arange(spec.T, dtype=np.float64)[:, None, None]
    return np.cos(omega * t) * u + np.sin(omega * t) * v


def generate(spec: SequenceSpec) -> FrameSequence:
    """
    Build a synthetic sequence from a SequenceSpec

    translating_blob moves a Gaussian bump by velocity per frame with wrap;
    drifting_texture translates a fixed-seed smooth random field with
    bilinear interpolation and wrap; constant repeats blob frame 0; sinusoid
    is a rank-2 rotation between two fixed-seed patterns.
    """
    if spec.kind == 'translating_blob':
        frames = _translating_blob(spec)
    elif spec.kind == 'drifting_texture':
        frames = _drifting_texture(spec)
    elif spec.kind == 'sinusoid':
        frames = _sinusoid(spec)
    else:
        first = _blob(spec.height, spec.width, spec.height / 2.0, spec.width / 2.0, spec.blob_sigma)
        frames = np.repeat(first[None], spec.T, axis=0)
    data_logger.debug(f"Generated {spec.kind} sequence {spec.T}x{spec.height}x{spec.width}")
    return FrameSequence(frames)


class PairSampler:
    """
    Deterministic stream of training pairs

    With probability neighbor_prob a pair (t, t+1) with uniform t; otherwise
    a uniform pair (t, t') with |t - t'| >= 2.
    """

    def __init__(self, seq: FrameSequence, neighbor_prob: float, seed: int, flatten: bool = True):
        if not 0.0 <= neighbor_prob <= 1.0:
            raise ConfigError(f"neighbor_prob must lie in [0, 1], got {neighbor_prob}")
        if neighbor_prob < 1.0 and seq.T < 3:
            raise ConfigError(f"Non-neighbor pairs need T >= 3, got T={seq.T}")
        self.seq = seq
        self.neighbor_prob = neighbor_prob
        self.flatten = flatten
        self.rng = np.random.default_rng(seed)

    def sample_indices(self) -> Tuple[int, int]:
        T = self.seq.T
        if self.rng.random() < self.neighbor_prob:
            t = int(self.rng.integers(0, T - 1))
            return t, t + 1
        while True:
            t, t_other = (int(i) for i in self.rng.integers(0, T, size=2))
            if abs(t - t_other) >= 2:
                return t, t_other

    def sample(self) -> FramePair:
        t, t_other = self.sample_indices()
        frames = self.seq.vectors() if self.flatten else self.seq.frames
        return FramePair(x_a=frames[t], x_b=frames[t_other], temporal_gap=abs(t - t_other))

    def sample_batch(self, count: int) -> List[FramePair]:
        return [self.sample() for _ in range(count)]


def sample_pair(seq: FrameSequence, neighbor_prob: float, rng_seed: int) -> FramePair:
    """One pair drawn from a fresh sampler seeded with rng_seed"""
    return PairSampler(seq, neighbor_prob, rng_seed).sample()


def sample_pairs(seq: FrameSequence, neighbor_prob: float, rng_seed: int,
                 count: int) -> List[FramePair]:
    """The first count pairs of the stream seeded with rng_seed"""
    return PairSampler(seq, neighbor_prob, rng_seed).sample_batch(count)


def normalize(seq: FrameSequence) -> FrameSequence:
    """
    Subtract each frame's mean, then divide by the average per-frame std

    Constant frames come out all-zero; a sequence whose frames all have zero
    variance comes out entirely zero.
    """
    frames = seq.frames
    centered = frames - frames.mean(axis=(1, 2), keepdims=True)
    scale = float(centered.std(axis=(1, 2)).mean())
    if scale == 0.0:
        return FrameSequence(np.zeros_like(frames))
    return FrameSequence(centered / scale)


def save_sequence(seq: FrameSequence, path: Union[str, Path]) -> None:
    write_sequence(path, seq.frames)
    data_logger.info(f"Saved {seq.T} frames of {seq.height}x{seq.width} to {path}")


def load_sequence(path: Union[str, Path]) -> FrameSequence:
    """
    Load a sequence file

    Raises:
        FormatError: for any malformed file, including one with T < 2
    """
    frames = read_sequence(path)
    if frames.shape[0] < 2:
        raise FormatError(f"sequence has {frames.shape[0]} frame(s), need at least 2", offset=8)
    if not np.all(np.isfinite(frames)):
        raise FormatError("sequence payload contains non-finite values", offset=HEADER_SIZE)
    data_logger.debug(f"Loaded {frames.shape[0]} frames from {path}")
    return FrameSequence(frames)
