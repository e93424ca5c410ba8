"""The trained encoder as a metric: retrieval scores, gap profiles, dictionary images."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

import helpers
from data import FrameSequence
from formats.pgm_file import write_pgm
from helpers import ConfigError, ShapeError
from model import ConvModelParams, ModelParams, encode_conv, encode_fc

eval_logger = logging.getLogger('SlowPool.eval')

NORMS = {'l1': 'cityblock', 'l2': 'euclidean'}
ParamsType = Union[ModelParams, ConvModelParams]


@dataclass
class MetricReport:
    learned_precision: float
    pixel_precision: float
    chance_precision: float
    frames: int
    norm: str = 'l1'
    gap_distances: List[Tuple[int, float]] = field(default_factory=list)

    def to_text(self) -> str:
        """key: value lines, then a gap,distance CSV block"""
        lines = [
            f"learned_precision_at_1: {self.learned_precision:.6f}",
            f"pixel_precision_at_1: {self.pixel_precision:.6f}",
            f"chance_precision_at_1: {self.chance_precision:.6f}",
            f"frames: {self.frames}",
            f"norm: {self.norm}",
            "gap,distance",
        ]
        lines.extend(f"{gap},{distance:.9g}" for gap, distance in self.gap_distances)
        return "\n".join(lines) + "\n"


def _encode(x: np.ndarray, params: ParamsType, p: float = 2.0):
    if isinstance(params, ConvModelParams):
        return encode_conv(x, params, p)
    return encode_fc(x, params, p)


def _check_norm(norm: str) -> str:
    if norm not in NORMS:
        raise ConfigError(f"Unknown norm '{norm}', expected one of {tuple(NORMS)}")
    return NORMS[norm]


def _frame_inputs(seq: FrameSequence, params: ParamsType) -> np.ndarray:
    if isinstance(params, ConvModelParams):
        return seq.frames
    if params.input_dim != seq.height * seq.width:
        raise ShapeError("frames do not match model input", expected=params.input_dim,
                         found=seq.height * seq.width)
    return seq.vectors()


def encode_sequence(seq: FrameSequence, params: ParamsType,
                    p: float = 2.0) -> Tuple[np.ndarray, np.ndarray]:
    """Hidden and pooled features for every frame, flattened to (T, N...) and (T, K...)"""
    inputs = _frame_inputs(seq, params)
    if helpers.WORKERS > 1:
        with ThreadPoolExecutor(max_workers=helpers.WORKERS) as executor:
            acts = list(executor.map(lambda x: _encode(x, params, p), inputs))
    else:
        acts = [_encode(x, params, p) for x in inputs]
    hidden = np.stack([a.hidden.ravel() for a in acts])
    pooled = np.stack([a.pooled.ravel() for a in acts])
    return hidden, pooled


def pooled_distance(x_a: np.ndarray, x_b: np.ndarray, params: ParamsType, norm: str = 'l1',
                    p: float = 2.0) -> float:
    """sum_i |z_a,i - z_b,i|, the quantity the slowness term drives down for neighbors"""
    _check_norm(norm)
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape:
        raise ShapeError("inputs differ in shape", expected=x_a.shape, found=x_b.shape)
    diff = _encode(x_a, params, p).pooled - _encode(x_b, params, p).pooled
    if norm == 'l2':
        return float(np.sqrt(np.sum(diff * diff)))
    return float(np.abs(diff).sum())


def temporal_precision_at_1(seq: FrameSequence, params: Optional[ParamsType] = None,
                            norm: str = 'l1', p: float = 2.0) -> float:
    """
    Fraction of frames whose nearest other frame is a temporal neighbor

    params=None scores the pixel baseline (Euclidean distance between frames);
    otherwise distances are taken between pooled features. Ties go to the
    smaller frame index.
    """
    if seq.T < 3:
        raise ConfigError(f"precision@1 needs T >= 3, got T={seq.T}")
    if params is None:
        features, metric = seq.vectors(), 'euclidean'
    else:
        features, metric = encode_sequence(seq, params, p)[1], _check_norm(norm)
    distances = cdist(features, features, metric=metric)
    np.fill_diagonal(distances, np.inf)
    nearest = np.argmin(distances, axis=1)
    hits = np.abs(nearest - np.arange(seq.T)) == 1
    return float(hits.mean())


def distance_by_gap(seq: FrameSequence, params: ParamsType, max_gap: int,
                    norm: str = 'l1', p: float = 2.0) -> List[Tuple[int, float]]:
    """Mean pooled distance between frames t and t+g, for g = 1..max_gap"""
    metric = _check_norm(norm)
    if not 1 <= max_gap < seq.T:
        raise ConfigError(f"max_gap must lie in [1, T-1] = [1, {seq.T - 1}], got {max_gap}")
    pooled = encode_sequence(seq, params, p)[1]
    profile = []
    for gap in range(1, max_gap + 1):
        if metric == 'cityblock':
            d = np.abs(pooled[gap:] - pooled[:-gap]).sum(axis=1)
        else:
            d = np.sqrt(((pooled[gap:] - pooled[:-gap]) ** 2).sum(axis=1))
        profile.append((gap, float(d.mean())))
    return profile


def evaluate(seq: FrameSequence, params: ParamsType, max_gap: int = 5,
             norm: str = 'l1', p: float = 2.0) -> MetricReport:
    """Learned vs pixel precision@1, the chance level 2/(T-1), and the gap profile"""
    max_gap = min(max_gap, seq.T - 1)
    report = MetricReport(
        learned_precision=temporal_precision_at_1(seq, params, norm, p),
        pixel_precision=temporal_precision_at_1(seq, None),
        chance_precision=2.0 / (seq.T - 1),
        frames=seq.T,
        norm=norm,
        gap_distances=distance_by_gap(seq, params, max_gap, norm, p),
    )
    eval_logger.info(f"precision@1 learned={report.learned_precision:.3f} "
                     f"pixel={report.pixel_precision:.3f} chance={report.chance_precision:.3f}")
    return report


def reconstruction_error(seq: FrameSequence, params: ModelParams) -> float:
    """Mean over frames of ||dec h - x||^2 using the model's own decoder"""
    hidden, _ = encode_sequence(seq, params)
    residual = hidden @ params.dec.T - seq.vectors()
    return float(np.mean(np.sum(residual ** 2, axis=1)))


def fit_linear_decoder(seq: FrameSequence, params: ModelParams,
                       held_out: Optional[FrameSequence] = None) -> Tuple[np.ndarray, float]:
    """
    Least-squares decoder from hidden units, fitted on seq

    The error is measured on held_out when given, otherwise on seq itself.
    Scoring on the fitting frames is exact whenever the hidden codes span
    them, so comparisons between encoders should pass held_out.

    Returns:
        (D x N decoder, mean squared reconstruction error per frame)
    """
    hidden, _ = encode_sequence(seq, params)
    coef, *_ = np.linalg.lstsq(hidden, seq.vectors(), rcond=None)
    scored = seq if held_out is None else held_out
    scored_hidden = hidden if held_out is None else encode_sequence(held_out, params)[0]
    residual = scored_hidden @ coef - scored.vectors()
    error = float(np.mean(np.sum(residual ** 2, axis=1)))
    eval_logger.debug(f"Post-hoc decoder fitted on {seq.T} frames, error {error:.6g} "
                      f"over {scored.T} frames")
    return coef.T, error


def _tile_pixels(tile: np.ndarray) -> np.ndarray:
    """Stretch a tile to 0..255; flat tiles render mid-gray"""
    lo, hi = float(tile.min()), float(tile.max())
    if hi == lo:
        return np.full(tile.shape, 128, dtype=np.uint8)
    return np.rint((tile - lo) / (hi - lo) * 255.0).astype(np.uint8)


def dictionary_image(params: ParamsType) -> np.ndarray:
    """
    Decoder atoms tiled by pool group

    Each group is a horizontal strip of its members' tiles; strips are laid
    out row-major on a near-square grid with 1-pixel black separators.
    """
    if isinstance(params, ConvModelParams):
        tiles = params.dec_kernels
    else:
        side = math.isqrt(params.input_dim)
        if side * side != params.input_dim:
            raise ShapeError(f"input dimension {params.input_dim} is not a perfect square")
        tiles = params.dec.T.reshape(params.num_hidden, side, side)

    topology = params.topology
    tile_h, tile_w = tiles.shape[1:]
    strip_w = topology.group_size * tile_w
    cols = math.ceil(math.sqrt(topology.num_groups))
    rows = math.ceil(topology.num_groups / cols)
    canvas = np.zeros((rows * tile_h + rows - 1, cols * strip_w + cols - 1), dtype=np.uint8)
    for i, group in enumerate(topology.groups):
        y = (i // cols) * (tile_h + 1)
        x = (i % cols) * (strip_w + 1)
        for slot, unit in enumerate(group):
            x0 = x + slot * tile_w
            canvas[y:y + tile_h, x0:x0 + tile_w] = _tile_pixels(tiles[unit])
    return canvas


def export_dictionary(params: ParamsType, path: Union[str, Path]) -> np.ndarray:
    """Write dictionary_image(params) as a binary PGM and return the pixels"""
    pixels = dictionary_image(params)
    write_pgm(path, pixels)
    eval_logger.info(f"Exported {params.topology.num_groups} pool groups to {path}")
    return pixels
