"""Pooled auto-encoder: linear map, rectifier, L2 group pooling, linear decoder.

Both the fully connected model (frames flattened to vectors, bias carried as
the last encoder column) and its convolutional counterpart (filter banks plus
non-overlapping spatial pooling windows) live here.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

from helpers import ConfigError, ShapeError
from numerics import as_image, as_vector, conv2d_transposed, conv2d_valid, matvec

model_logger = logging.getLogger('SlowPool.model')


@dataclass(frozen=True)
class PoolingTopology:
    """K index groups over N hidden units, laid out on a 1-D ring"""
    num_hidden: int
    groups: Tuple[Tuple[int, ...], ...]
    group_size: int
    stride: int

    def __post_init__(self):
        seen = set()
        for group in self.groups:
            for j in group:
                if not 0 <= j < self.num_hidden:
                    raise ConfigError(f"Pool index {j} outside 0..{self.num_hidden - 1}")
                seen.add(j)
        if len(seen) != self.num_hidden:
            missing = sorted(set(range(self.num_hidden)) - seen)
            raise ConfigError(f"Hidden units {missing} belong to no pool group")

    @classmethod
    def ring(cls, num_hidden: int, group_size: int, stride: int) -> 'PoolingTopology':
        """Build P_i = {(i*stride + j) mod N : j < group_size} for i < ceil(N/stride)"""
        if num_hidden < 1 or not 1 <= group_size <= num_hidden:
            raise ConfigError(
                f"Need N >= group_size >= 1, got N={num_hidden}, group_size={group_size}")
        if stride < 1:
            raise ConfigError(f"Stride must be at least 1, got {stride}")
        if stride > group_size:
            raise ConfigError(f"Stride {stride} exceeds group_size {group_size}: "
                              f"some hidden units would belong to no pool group")
        num_groups = math.ceil(num_hidden / stride)
        groups = tuple(
            tuple((i * stride + j) % num_hidden for j in range(group_size))
            for i in range(num_groups)
        )
        return cls(num_hidden=num_hidden, groups=groups, group_size=group_size, stride=stride)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @cached_property
    def membership(self) -> np.ndarray:
        """K x N matrix with a 1 where hidden unit j belongs to group i"""
        m = np.zeros((self.num_groups, self.num_hidden))
        for i, group in enumerate(self.groups):
            m[i, list(group)] = 1.0
        m.setflags(write=False)
        return m


def _frozen(arr, name: str) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelParams:
    """Fully connected model: enc is N x (D+1) with the bias last, dec is D x N"""
    enc: np.ndarray
    dec: np.ndarray
    topology: PoolingTopology

    def __post_init__(self):
        object.__setattr__(self, 'enc', _frozen(self.enc, "enc"))
        object.__setattr__(self, 'dec', _frozen(self.dec, "dec"))
        if self.enc.ndim != 2 or self.dec.ndim != 2:
            raise ShapeError("enc and dec must be matrices")
        n, d1 = self.enc.shape
        if self.dec.shape != (d1 - 1, n):
            raise ShapeError("dec does not match enc", expected=(d1 - 1, n), found=self.dec.shape)
        if self.topology.num_hidden != n:
            raise ShapeError("topology size does not match enc rows",
                             expected=n, found=self.topology.num_hidden)

    @property
    def input_dim(self) -> int:
        return self.dec.shape[0]

    @property
    def num_hidden(self) -> int:
        return self.enc.shape[0]

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return (self.enc, self.dec)

    def replace_arrays(self, enc: np.ndarray, dec: np.ndarray) -> 'ModelParams':
        return ModelParams(enc=enc, dec=dec, topology=self.topology)


@dataclass(frozen=True)
class ConvModelParams:
    """Convolutional model: N encoder/decoder kernels, N biases, spatial pooling"""
    enc_kernels: np.ndarray
    enc_biases: np.ndarray
    dec_kernels: np.ndarray
    topology: PoolingTopology
    spatial_pool: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'enc_kernels', _frozen(self.enc_kernels, "enc_kernels"))
        object.__setattr__(self, 'enc_biases', _frozen(self.enc_biases, "enc_biases"))
        object.__setattr__(self, 'dec_kernels', _frozen(self.dec_kernels, "dec_kernels"))
        if self.enc_kernels.ndim != 3:
            raise ShapeError("enc_kernels must be (N, kH, kW)", found=self.enc_kernels.shape)
        n = self.enc_kernels.shape[0]
        if self.enc_biases.shape != (n,):
            raise ShapeError("one bias per kernel", expected=(n,), found=self.enc_biases.shape)
        if self.dec_kernels.shape != self.enc_kernels.shape:
            raise ShapeError("dec_kernels must match enc_kernels",
                             expected=self.enc_kernels.shape, found=self.dec_kernels.shape)
        if self.topology.num_hidden != n:
            raise ShapeError("topology size does not match kernel count",
                             expected=n, found=self.topology.num_hidden)
        if self.spatial_pool < 1:
            raise ConfigError(f"spatial_pool must be at least 1, got {self.spatial_pool}")

    @property
    def kernel_shape(self) -> Tuple[int, int]:
        return self.enc_kernels.shape[1], self.enc_kernels.shape[2]

    @property
    def num_hidden(self) -> int:
        return self.enc_kernels.shape[0]

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return (self.enc_kernels, self.enc_biases, self.dec_kernels)

    def replace_arrays(self, enc_kernels: np.ndarray, enc_biases: np.ndarray,
                       dec_kernels: np.ndarray) -> 'ConvModelParams':
        return ConvModelParams(enc_kernels=enc_kernels, enc_biases=enc_biases,
                               dec_kernels=dec_kernels, topology=self.topology,
                               spatial_pool=self.spatial_pool)


@dataclass
class Activations:
    """
    Encoder outputs

    fc: hidden (N,), pooled (K,). conv: hidden (N, Ho, Wo), pooled (K, Hp, Wp).
    pre holds the pre-rectification values backprop needs for gating.
    """
    hidden: np.ndarray
    pooled: np.ndarray
    pre: Optional[np.ndarray] = field(default=None, repr=False)


def init_params(D: int, N: int, group_size: int, stride: int, seed: int) -> ModelParams:
    """
    Draw a fully connected model

    enc and dec entries are uniform in +-1/sqrt(fan_in) (D+1 for enc, N for
    dec); the bias column starts at zero. Same seed, same params.
    """
    if D < 1:
        raise ConfigError(f"Input dimension must be at least 1, got {D}")
    topology = PoolingTopology.ring(N, group_size, stride)
    rng = np.random.default_rng(seed)
    enc_limit = 1.0 / math.sqrt(D + 1)
    dec_limit = 1.0 / math.sqrt(N)
    enc = rng.uniform(-enc_limit, enc_limit, size=(N, D + 1))
    enc[:, -1] = 0.0
    dec = rng.uniform(-dec_limit, dec_limit, size=(D, N))
    model_logger.debug(f"Initialized fc model D={D} N={N} K={topology.num_groups} seed={seed}")
    return ModelParams(enc=enc, dec=dec, topology=topology)


def init_conv_params(kernel_shape: Tuple[int, int], N: int, group_size: int, stride: int,
                     spatial_pool: int, seed: int) -> ConvModelParams:
    """Draw a convolutional model with kernels uniform in +-1/sqrt(fan_in) and zero biases"""
    kh, kw = kernel_shape
    if kh < 1 or kw < 1:
        raise ConfigError(f"Kernel shape must be positive, got {kernel_shape}")
    topology = PoolingTopology.ring(N, group_size, stride)
    rng = np.random.default_rng(seed)
    enc_limit = 1.0 / math.sqrt(kh * kw)
    dec_limit = 1.0 / math.sqrt(N)
    enc_kernels = rng.uniform(-enc_limit, enc_limit, size=(N, kh, kw))
    dec_kernels = rng.uniform(-dec_limit, dec_limit, size=(N, kh, kw))
    model_logger.debug(f"Initialized conv model kernels={kernel_shape} N={N} seed={seed}")
    return ConvModelParams(enc_kernels=enc_kernels, enc_biases=np.zeros(N),
                           dec_kernels=dec_kernels, topology=topology,
                           spatial_pool=spatial_pool)


def pool_norms(energy: np.ndarray, topology: PoolingTopology, p: float = 2.0) -> np.ndarray:
    """
    Group p-norms from per-unit sums of h**p

    energy has the hidden axis first; any trailing (spatial) axes are kept.
    """
    if not p >= 1:
        raise ConfigError(f"p must be at least 1, got {p}")
    summed = np.tensordot(topology.membership, energy, axes=(1, 0))
    if p == 2:
        return np.sqrt(summed)
    return summed ** (1.0 / p)


def homogeneous(x: np.ndarray) -> np.ndarray:
    """Append the constant 1 that carries the bias"""
    return np.append(x, 1.0)


def encode_fc(x: np.ndarray, params: ModelParams, p: float = 2.0) -> Activations:
    """
    h = max(0, enc [x; 1]), z_i = ||h restricted to P_i||_p

    Raises:
        ShapeError: if x does not have params.input_dim entries
    """
    x = as_vector(x, "input")
    if x.shape[0] != params.input_dim:
        raise ShapeError("input does not match model", expected=(params.input_dim,), found=x.shape)
    pre = matvec(params.enc, homogeneous(x))
    hidden = np.maximum(pre, 0.0)
    pooled = pool_norms(hidden ** p, params.topology, p)
    return Activations(hidden=hidden, pooled=pooled, pre=pre)


def decode_fc(h: np.ndarray, params: ModelParams) -> np.ndarray:
    """Reconstruction dec @ h"""
    h = as_vector(h, "hidden")
    if h.shape[0] != params.num_hidden:
        raise ShapeError("hidden does not match model", expected=(params.num_hidden,), found=h.shape)
    return matvec(params.dec, h)


def spatial_energy(maps: np.ndarray, spatial_pool: int) -> np.ndarray:
    """Sum each map over non-overlapping s x s windows, dropping ragged edges"""
    n, ho, wo = maps.shape
    s = spatial_pool
    hp, wp = ho // s, wo // s
    cropped = maps[:, :hp * s, :wp * s]
    return cropped.reshape(n, hp, s, wp, s).sum(axis=(2, 4))


def encode_conv(img: np.ndarray, params: ConvModelParams, p: float = 2.0) -> Activations:
    """
    Feature maps max(0, img (*) k_n + b_n), pooled jointly over group members and windows

    Raises:
        ShapeError: if the image is smaller than the kernels or the pooling window
    """
    img = as_image(img)
    kh, kw = params.kernel_shape
    if img.shape[0] < kh or img.shape[1] < kw:
        raise ShapeError("image smaller than kernel", expected=f">= {(kh, kw)}", found=img.shape)
    pre = np.stack([
        conv2d_valid(img, kernel) + bias
        for kernel, bias in zip(params.enc_kernels, params.enc_biases)
    ])
    if pre.shape[1] < params.spatial_pool or pre.shape[2] < params.spatial_pool:
        raise ShapeError("feature maps smaller than the pooling window",
                         expected=f">= {params.spatial_pool}", found=pre.shape[1:])
    hidden = np.maximum(pre, 0.0)
    pooled = pool_norms(spatial_energy(hidden ** p, params.spatial_pool), params.topology, p)
    return Activations(hidden=hidden, pooled=pooled, pre=pre)


def decode_conv(activations: Activations, params: ConvModelParams) -> np.ndarray:
    """Sum of decoder kernels stamped by each hidden map"""
    hidden = np.asarray(activations.hidden, dtype=np.float64)
    if hidden.ndim != 3 or hidden.shape[0] != params.num_hidden:
        raise ShapeError("hidden maps do not match model",
                         expected=f"({params.num_hidden}, Ho, Wo)", found=hidden.shape)
    recon = None
    for h_map, kernel in zip(hidden, params.dec_kernels):
        stamp = conv2d_transposed(h_map, kernel)
        recon = stamp if recon is None else recon + stamp
    return recon
