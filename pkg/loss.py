"""Loss functionals and their gradients.

full_loss is the reconstruction + L1 + pooled-slowness objective on a pair
of frames; drlim_loss is the contrastive neighbor / non-neighbor hinge.
Gradients are hand-derived; grad_check compares them against central
finite differences.
"""
import logging
from dataclasses import dataclass, fields
from typing import Iterable, List, Tuple, Union

import numpy as np

from helpers import ConfigError, ShapeError, UnsupportedError
from model import (
    Activations,
    ConvModelParams,
    ModelParams,
    decode_conv,
    encode_conv,
    encode_fc,
    homogeneous,
    init_params,
)
from numerics import as_image, conv2d_valid

loss_logger = logging.getLogger('SlowPool.loss')

# Denominator floor for per-coordinate relative error in grad_check
GRAD_CHECK_FLOOR = 1e-3


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 0.5     # L1 weight
    beta: float = 1.0      # slowness weight
    margin: float = 1.0    # DrLIM margin m
    p: float = 2.0         # pooling / distance norm order
    eps: float = 1e-8      # guard for norm denominators
    lr: float = 5e-4
    momentum: float = 0.9

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{f.name} must be finite and non-negative, got {value}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.p < 1:
            raise ConfigError(f"p must be at least 1, got {self.p}")
        if self.momentum >= 1:
            raise ConfigError(f"momentum must be below 1, got {self.momentum}")


@dataclass(frozen=True)
class FramePair:
    """Two frames (vectors for the fc model, images for conv) and their |t - t'|"""
    x_a: np.ndarray
    x_b: np.ndarray
    temporal_gap: int

    def __post_init__(self):
        a = np.asarray(self.x_a, dtype=np.float64)
        b = np.asarray(self.x_b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError("pair frames differ in shape", expected=a.shape, found=b.shape)
        if self.temporal_gap < 1:
            raise ConfigError(f"temporal_gap must be at least 1, got {self.temporal_gap}")
        object.__setattr__(self, 'x_a', a)
        object.__setattr__(self, 'x_b', b)

    def swapped(self) -> 'FramePair':
        return FramePair(x_a=self.x_b, x_b=self.x_a, temporal_gap=self.temporal_gap)


@dataclass(frozen=True)
class LossBreakdown:
    recon: float = 0.0
    sparsity: float = 0.0
    slowness: float = 0.0
    contrastive: float = 0.0

    @property
    def total(self) -> float:
        return self.recon + self.sparsity + self.slowness + self.contrastive

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.total))

    @staticmethod
    def mean(items: Iterable['LossBreakdown']) -> 'LossBreakdown':
        items = list(items)
        if not items:
            return LossBreakdown()
        return LossBreakdown(
            recon=float(np.mean([b.recon for b in items])),
            sparsity=float(np.mean([b.sparsity for b in items])),
            slowness=float(np.mean([b.slowness for b in items])),
            contrastive=float(np.mean([b.contrastive for b in items])),
        )


@dataclass
class Gradients:
    d_enc: np.ndarray
    d_dec: np.ndarray

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return (self.d_enc, self.d_dec)


@dataclass
class ConvGradients:
    d_enc_kernels: np.ndarray
    d_enc_biases: np.ndarray
    d_dec_kernels: np.ndarray

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return (self.d_enc_kernels, self.d_enc_biases, self.d_dec_kernels)


@dataclass
class GradCheckReport:
    max_rel_error: float
    excluded: int
    checked: int

    @property
    def excluded_fraction(self) -> float:
        total = self.excluded + self.checked
        return self.excluded / total if total else 0.0


def _require_p2(hyper: Hyperparams) -> None:
    if hyper.p != 2:
        raise UnsupportedError(f"Analytic gradients exist only for p=2, got p={hyper.p}")


def drlim_loss(z_a: np.ndarray, z_b: np.ndarray, temporal_gap: int, hyper: Hyperparams) -> float:
    """
    Contrastive pair loss on pooled features

    ||z_a - z_b||_p for temporal neighbors, max(0, m - ||z_a - z_b||_p)
    for pairs further apart.
    """
    # Non-finite features are not rejected; they give a non-finite loss
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.ndim != 1 or z_a.shape != z_b.shape:
        raise ShapeError("feature vectors differ in length", expected=z_a.shape, found=z_b.shape)
    if temporal_gap < 1:
        raise ConfigError(f"temporal_gap must be at least 1, got {temporal_gap}")
    distance = float(np.linalg.norm(z_a - z_b, ord=hyper.p))
    if temporal_gap == 1:
        return distance
    return max(0.0, hyper.margin - distance)


def _check_fc_pair(pair: FramePair, params: ModelParams) -> None:
    if pair.x_a.shape != (params.input_dim,):
        raise ShapeError("pair frames do not match model", expected=(params.input_dim,),
                         found=pair.x_a.shape)


def full_loss(pair: FramePair, params: ModelParams, hyper: Hyperparams) -> LossBreakdown:
    """
    Reconstruction, L1 and pooled-slowness terms for both frames of a pair

    recon    = sum_tau ||dec h_tau - x_tau||^2
    sparsity = alpha * sum_tau |h_tau|_1
    slowness = beta * sum_i |z_a,i - z_b,i|
    """
    _check_fc_pair(pair, params)
    act_a = encode_fc(pair.x_a, params, hyper.p)
    act_b = encode_fc(pair.x_b, params, hyper.p)
    recon = 0.0
    sparsity = 0.0
    for x, act in ((pair.x_a, act_a), (pair.x_b, act_b)):
        residual = params.dec @ act.hidden - x
        recon += float(residual @ residual)
        sparsity += float(np.abs(act.hidden).sum())
    slowness = float(np.abs(act_a.pooled - act_b.pooled).sum())
    return LossBreakdown(recon=recon, sparsity=hyper.alpha * sparsity,
                         slowness=hyper.beta * slowness)


def backward(pair: FramePair, params: ModelParams, hyper: Hyperparams) -> Gradients:
    """
    Analytic gradient of full_loss with weights shared across both branches

    Pooled-norm derivative is h_j / max(z_i, eps); sign(0) = 0 for both the
    L1 and slowness absolute values; the rectifier passes gradient only where
    the pre-activation is positive.

    Raises:
        UnsupportedError: if hyper.p != 2
    """
    _require_p2(hyper)
    _check_fc_pair(pair, params)
    act_a = encode_fc(pair.x_a, params)
    act_b = encode_fc(pair.x_b, params)
    slow_sign = np.sign(act_a.pooled - act_b.pooled)
    membership_t = params.topology.membership.T

    d_enc = np.zeros_like(params.enc)
    d_dec = np.zeros_like(params.dec)
    for x, act, direction in ((pair.x_a, act_a, 1.0), (pair.x_b, act_b, -1.0)):
        h = act.hidden
        residual = params.dec @ h - x
        d_dec += 2.0 * np.outer(residual, h)
        d_h = 2.0 * (params.dec.T @ residual) + hyper.alpha * np.sign(h)
        coef = direction * hyper.beta * slow_sign / np.maximum(act.pooled, hyper.eps)
        d_h += h * (membership_t @ coef)
        d_pre = d_h * (act.pre > 0)
        d_enc += np.outer(d_pre, homogeneous(x))
    return Gradients(d_enc=d_enc, d_dec=d_dec)


def drlim_pair_loss(pair: FramePair, params: ModelParams, hyper: Hyperparams) -> LossBreakdown:
    """drlim_loss on the encoder outputs of a pair, reported as the contrastive component"""
    _check_fc_pair(pair, params)
    z_a = encode_fc(pair.x_a, params, hyper.p).pooled
    z_b = encode_fc(pair.x_b, params, hyper.p).pooled
    return LossBreakdown(contrastive=drlim_loss(z_a, z_b, pair.temporal_gap, hyper))


def drlim_backward(pair: FramePair, params: ModelParams, hyper: Hyperparams) -> Gradients:
    """
    Gradient of drlim_pair_loss; the decoder receives none

    Non-neighbors already at least m apart contribute zero gradient.
    """
    _require_p2(hyper)
    _check_fc_pair(pair, params)
    act_a = encode_fc(pair.x_a, params)
    act_b = encode_fc(pair.x_b, params)
    diff = act_a.pooled - act_b.pooled
    distance = float(np.linalg.norm(diff))

    d_enc = np.zeros_like(params.enc)
    d_dec = np.zeros_like(params.dec)
    if pair.temporal_gap == 1:
        d_z = diff / max(distance, hyper.eps)
    elif distance < hyper.margin:
        d_z = -diff / max(distance, hyper.eps)
    else:
        return Gradients(d_enc=d_enc, d_dec=d_dec)

    membership_t = params.topology.membership.T
    for x, act, direction in ((pair.x_a, act_a, 1.0), (pair.x_b, act_b, -1.0)):
        d_h = act.hidden * (membership_t @ (direction * d_z / np.maximum(act.pooled, hyper.eps)))
        d_pre = d_h * (act.pre > 0)
        d_enc += np.outer(d_pre, homogeneous(x))
    return Gradients(d_enc=d_enc, d_dec=d_dec)


def _check_conv_pair(pair: FramePair, params: ConvModelParams) -> None:
    as_image(pair.x_a, "x_a")
    kh, kw = params.kernel_shape
    if pair.x_a.shape[0] < kh or pair.x_a.shape[1] < kw:
        raise ShapeError("pair frames smaller than kernel", expected=f">= {(kh, kw)}",
                         found=pair.x_a.shape)


def conv_full_loss(pair: FramePair, params: ConvModelParams, hyper: Hyperparams) -> LossBreakdown:
    """full_loss with filter banks in place of the linear maps and spatial pooling"""
    _check_conv_pair(pair, params)
    act_a = encode_conv(pair.x_a, params, hyper.p)
    act_b = encode_conv(pair.x_b, params, hyper.p)
    recon = 0.0
    sparsity = 0.0
    for x, act in ((pair.x_a, act_a), (pair.x_b, act_b)):
        residual = decode_conv(act, params) - x
        recon += float(np.sum(residual * residual))
        sparsity += float(np.abs(act.hidden).sum())
    slowness = float(np.abs(act_a.pooled - act_b.pooled).sum())
    return LossBreakdown(recon=recon, sparsity=hyper.alpha * sparsity,
                         slowness=hyper.beta * slowness)


def _upsample_windows(per_map: np.ndarray, spatial_pool: int, map_shape: Tuple[int, int]) -> np.ndarray:
    """Spread per-window values back over the pixels of each window; ragged edges get 0"""
    s = spatial_pool
    n, hp, wp = per_map.shape
    out = np.zeros((n,) + tuple(map_shape))
    out[:, :hp * s, :wp * s] = np.repeat(np.repeat(per_map, s, axis=1), s, axis=2)
    return out


def conv_backward(pair: FramePair, params: ConvModelParams, hyper: Hyperparams) -> ConvGradients:
    """Analytic gradient of conv_full_loss for kernels and biases, both branches summed"""
    _require_p2(hyper)
    _check_conv_pair(pair, params)
    act_a = encode_conv(pair.x_a, params)
    act_b = encode_conv(pair.x_b, params)
    slow_sign = np.sign(act_a.pooled - act_b.pooled)
    membership_t = params.topology.membership.T

    d_enc_kernels = np.zeros_like(params.enc_kernels)
    d_enc_biases = np.zeros_like(params.enc_biases)
    d_dec_kernels = np.zeros_like(params.dec_kernels)
    for x, act, direction in ((pair.x_a, act_a, 1.0), (pair.x_b, act_b, -1.0)):
        h = act.hidden
        residual = decode_conv(act, params) - x
        d_h = np.empty_like(h)
        for n in range(params.num_hidden):
            d_dec_kernels[n] += 2.0 * conv2d_valid(residual, h[n])
            d_h[n] = 2.0 * conv2d_valid(residual, params.dec_kernels[n])
        d_h += hyper.alpha * np.sign(h)
        coef = direction * hyper.beta * slow_sign / np.maximum(act.pooled, hyper.eps)
        per_map = np.tensordot(membership_t, coef, axes=(1, 0))
        d_h += h * _upsample_windows(per_map, params.spatial_pool, h.shape[1:])
        d_pre = d_h * (act.pre > 0)
        for n in range(params.num_hidden):
            d_enc_kernels[n] += conv2d_valid(x, d_pre[n])
            d_enc_biases[n] += d_pre[n].sum()
    return ConvGradients(d_enc_kernels=d_enc_kernels, d_enc_biases=d_enc_biases,
                         d_dec_kernels=d_dec_kernels)


ParamsType = Union[ModelParams, ConvModelParams]


def _kink_masks(params: ParamsType, pair: FramePair, hyper: Hyperparams,
                step: float) -> List[np.ndarray]:
    """
    Per-array masks of coordinates whose finite difference may straddle a kink

    A hidden unit is near a kink when any of its pre-activations, or the
    pooled difference of any group containing it, is within the threshold.
    Only encoder parameters move pre-activations; decoder terms are smooth.
    """
    scale = max(1.0, float(np.max(np.abs(pair.x_a))), float(np.max(np.abs(pair.x_b))))
    threshold = 10.0 * step * scale
    conv = isinstance(params, ConvModelParams)
    encode = encode_conv if conv else encode_fc
    act_a: Activations = encode(pair.x_a, params)
    act_b: Activations = encode(pair.x_b, params)

    n = params.num_hidden
    near_unit = np.zeros(n, dtype=bool)
    for act in (act_a, act_b):
        near_unit |= (np.abs(act.pre) < threshold).reshape(n, -1).any(axis=1)
    if hyper.beta > 0:
        k = params.topology.num_groups
        # An exactly zero difference stays zero under any shared-weight perturbation
        gap = np.abs(act_a.pooled - act_b.pooled)
        near_group = ((gap < threshold) & (gap > 0)).reshape(k, -1).any(axis=1)
        near_unit |= (params.topology.membership.T @ near_group) > 0

    if conv:
        kernel_mask = np.broadcast_to(near_unit[:, None, None], params.enc_kernels.shape).copy()
        return [kernel_mask, near_unit.copy(), np.zeros(params.dec_kernels.shape, dtype=bool)]
    enc_mask = np.broadcast_to(near_unit[:, None], params.enc.shape).copy()
    return [enc_mask, np.zeros(params.dec.shape, dtype=bool)]


def grad_check(params: ParamsType, pair: FramePair, hyper: Hyperparams,
               step: float = 1e-5) -> GradCheckReport:
    """
    Compare analytic gradients with central finite differences of the loss

    Relative error per coordinate is |a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR);
    coordinates near a rectifier or absolute-value kink are excluded and
    counted.

    Returns:
        GradCheckReport with the max relative error over checked coordinates
    """
    if step <= 0:
        raise ConfigError(f"step must be positive, got {step}")
    if isinstance(params, ConvModelParams):
        loss_fn, grad_fn = conv_full_loss, conv_backward
    else:
        loss_fn, grad_fn = full_loss, backward

    analytic = grad_fn(pair, params, hyper).arrays()
    masks = _kink_masks(params, pair, hyper, step)
    base = [np.array(a) for a in params.arrays()]

    max_rel = 0.0
    excluded = 0
    checked = 0
    for index, array in enumerate(base):
        for coord in range(array.size):
            if masks[index].flat[coord]:
                excluded += 1
                continue
            values = []
            for delta in (step, -step):
                trial = [a if i != index else a.copy() for i, a in enumerate(base)]
                trial[index].flat[coord] += delta
                values.append(loss_fn(pair, params.replace_arrays(*trial), hyper).total)
            numeric = (values[0] - values[1]) / (2.0 * step)
            exact = float(analytic[index].flat[coord])
            denom = max(abs(exact), abs(numeric), GRAD_CHECK_FLOOR)
            max_rel = max(max_rel, abs(exact - numeric) / denom)
            checked += 1

    loss_logger.debug(f"grad_check step={step}: max rel error {max_rel:.3e}, "
                      f"{excluded} excluded of {excluded + checked}")
    return GradCheckReport(max_rel_error=max_rel, excluded=excluded, checked=checked)


def random_check_instance(seed: int, D: int, N: int, group_size: int,
                          stride: int) -> Tuple[ModelParams, FramePair]:
    """A fixed-seed model with small random biases and a neighbor pair of Gaussian frames"""
    params = init_params(D, N, group_size, stride, seed)
    rng = np.random.default_rng(seed)
    enc = np.array(params.enc)
    enc[:, -1] = rng.uniform(-0.1, 0.1, size=N)
    x_a, x_b = rng.standard_normal((2, D))
    return params.replace_arrays(enc, params.dec), FramePair(x_a=x_a, x_b=x_b, temporal_gap=1)
