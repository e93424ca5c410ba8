"""Siamese training loop: minibatched SGD with momentum over sampled frame pairs."""
import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

import helpers
from data import FrameSequence, PairSampler
from formats.checkpoint_file import CheckpointRecord, read_checkpoint, write_checkpoint
from helpers import ConfigError, FormatError, NumericError, UnsupportedError
from loss import (
    FramePair,
    Hyperparams,
    LossBreakdown,
    backward,
    conv_backward,
    conv_full_loss,
    drlim_backward,
    drlim_loss,
    drlim_pair_loss,
    full_loss,
)
from model import (
    ConvModelParams,
    ModelParams,
    PoolingTopology,
    encode_conv,
    encode_fc,
    init_params,
)

train_logger = logging.getLogger('SlowPool.train')

OBJECTIVES = ('full', 'drlim')
ParamsType = Union[ModelParams, ConvModelParams]


@dataclass
class TrainConfig:
    epochs: int = 50
    pairs_per_epoch: int = 64
    batch_size: int = 16
    hyper: Hyperparams = field(default_factory=Hyperparams)
    objective: str = 'full'
    neighbor_prob: float = 0.5
    seed: int = 0
    checkpoint_path: Optional[str] = None
    hidden: int = 32
    group_size: int = 4
    stride: int = 2

    def __post_init__(self):
        for name in ('epochs', 'pairs_per_epoch', 'batch_size', 'hidden', 'group_size', 'stride'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.batch_size > self.pairs_per_epoch:
            raise ConfigError(f"batch_size {self.batch_size} exceeds pairs_per_epoch "
                              f"{self.pairs_per_epoch}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"Unknown objective '{self.objective}', expected one of {OBJECTIVES}")
        if not 0.0 <= self.neighbor_prob <= 1.0:
            raise ConfigError(f"neighbor_prob must lie in [0, 1], got {self.neighbor_prob}")

    @property
    def steps_per_epoch(self) -> int:
        return self.pairs_per_epoch // self.batch_size


@dataclass
class EpochStats:
    epoch: int
    loss: LossBreakdown
    hidden_sparsity: float        # fraction of exact zeros in h
    neighbor_distance: float      # mean pooled L1 distance, |t - t'| = 1
    non_neighbor_distance: float  # mean pooled L1 distance, |t - t'| > 1
    neighbor_loss: float          # mean contrastive loss, |t - t'| = 1
    non_neighbor_loss: float      # mean hinge loss, |t - t'| > 1
    seconds: float


CSV_COLUMNS = ['epoch', 'recon', 'sparsity', 'slowness', 'contrastive', 'total',
               'hidden_sparsity', 'neighbor_distance', 'non_neighbor_distance',
               'neighbor_loss', 'non_neighbor_loss', 'seconds']


@dataclass
class TrainReport:
    epochs: List[EpochStats] = field(default_factory=list)
    seconds: float = 0.0

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(CSV_COLUMNS)
        for stats in self.epochs:
            loss = stats.loss
            writer.writerow([stats.epoch] + [f"{v:.9g}" for v in (
                loss.recon, loss.sparsity, loss.slowness, loss.contrastive, loss.total,
                stats.hidden_sparsity, stats.neighbor_distance, stats.non_neighbor_distance,
                stats.neighbor_loss, stats.non_neighbor_loss, stats.seconds)])
        return out.getvalue()


@dataclass
class OptimizerState:
    velocities: Tuple[np.ndarray, ...]

    @classmethod
    def zeros_like(cls, params: ParamsType) -> 'OptimizerState':
        return cls(velocities=tuple(np.zeros_like(a) for a in params.arrays()))


def sgd_step(params: ParamsType, grads, state: OptimizerState,
             hyper: Hyperparams) -> Tuple[ParamsType, OptimizerState]:
    """
    Classical momentum update, elementwise

    v <- momentum * v - lr * g;  w <- w + v

    Raises:
        NumericError: if any gradient entry is non-finite (reported with its coordinate)
    """
    grad_arrays = grads.arrays()
    weights = params.arrays()
    if len(grad_arrays) != len(weights) or len(state.velocities) != len(weights):
        raise ConfigError("gradients, velocities and params do not conform")
    new_weights = []
    new_velocities = []
    for index, (w, g, v) in enumerate(zip(weights, grad_arrays, state.velocities)):
        if g.shape != w.shape or v.shape != w.shape:
            raise ConfigError(f"array {index}: gradient {g.shape} / velocity {v.shape} "
                              f"do not match params {w.shape}")
        bad = np.argwhere(~np.isfinite(g))
        if bad.size:
            raise NumericError("non-finite gradient", coordinate=(index,) + tuple(int(i) for i in bad[0]))
        v_new = hyper.momentum * v - hyper.lr * g
        w_new = w + v_new
        bad = np.argwhere(~np.isfinite(w_new))
        if bad.size:
            raise NumericError("update overflowed", coordinate=(index,) + tuple(int(i) for i in bad[0]))
        new_velocities.append(v_new)
        new_weights.append(w_new)
    return params.replace_arrays(*new_weights), OptimizerState(velocities=tuple(new_velocities))


@dataclass
class _ArrayGrads:
    values: Tuple[np.ndarray, ...]

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return self.values


@dataclass
class _PairResult:
    loss: LossBreakdown
    grads: object
    zeros: int
    units: int
    distance: float
    contrastive: float
    gap: int


def _map_ordered(fn: Callable, items: list, executor: Optional[ThreadPoolExecutor]) -> list:
    """Apply fn to items; results always come back in input order"""
    if executor is None:
        return [fn(item) for item in items]
    return list(executor.map(fn, items))


def _mean_or_zero(values: List[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def _run(seq: FrameSequence, config: TrainConfig, params: ParamsType,
         loss_fn: Callable, grad_fn: Callable, encode_fn: Callable,
         flatten: bool) -> Tuple[ParamsType, TrainReport]:
    hyper = config.hyper
    if hyper.p != 2:
        raise UnsupportedError(f"training needs p=2 pooling, got p={hyper.p}")
    sampler = PairSampler(seq, config.neighbor_prob, config.seed, flatten=flatten)
    state = OptimizerState.zeros_like(params)
    report = TrainReport()
    run_start = time.perf_counter()

    def evaluate_pair(pair: FramePair) -> _PairResult:
        act_a = encode_fn(pair.x_a, params_ref[0])
        act_b = encode_fn(pair.x_b, params_ref[0])
        z_a, z_b = act_a.pooled.ravel(), act_b.pooled.ravel()
        return _PairResult(
            loss=loss_fn(pair, params_ref[0], hyper),
            grads=grad_fn(pair, params_ref[0], hyper),
            zeros=int(np.count_nonzero(act_a.hidden == 0) + np.count_nonzero(act_b.hidden == 0)),
            units=act_a.hidden.size + act_b.hidden.size,
            distance=float(np.abs(z_a - z_b).sum()),
            contrastive=drlim_loss(z_a, z_b, pair.temporal_gap, hyper),
            gap=pair.temporal_gap,
        )

    # Holder so the worker closure always sees the current params
    params_ref = [params]
    _save_epoch(params, hyper, config, epoch=0)
    executor = ThreadPoolExecutor(max_workers=helpers.WORKERS) if helpers.WORKERS > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            epoch_start = time.perf_counter()
            results: List[_PairResult] = []
            for step in range(config.steps_per_epoch):
                batch = sampler.sample_batch(config.batch_size)
                batch_results = _map_ordered(evaluate_pair, batch, executor)
                if not all(r.loss.is_finite() for r in batch_results):
                    _report_divergence(config)
                    raise NumericError(f"loss became non-finite in epoch {epoch}, step {step}")

                # Fixed-order reduction keeps the sum independent of thread timing
                summed = [np.zeros_like(a) for a in params_ref[0].arrays()]
                for r in batch_results:
                    for total, g in zip(summed, r.grads.arrays()):
                        total += g
                mean_grads = _ArrayGrads(tuple(total / len(batch_results) for total in summed))
                try:
                    params_ref[0], state = sgd_step(params_ref[0], mean_grads, state, hyper)
                except NumericError:
                    _report_divergence(config)
                    raise
                results.extend(batch_results)

            neighbor = [r for r in results if r.gap == 1]
            far = [r for r in results if r.gap > 1]
            stats = EpochStats(
                epoch=epoch,
                loss=LossBreakdown.mean(r.loss for r in results),
                hidden_sparsity=sum(r.zeros for r in results) / max(1, sum(r.units for r in results)),
                neighbor_distance=_mean_or_zero([r.distance for r in neighbor]),
                non_neighbor_distance=_mean_or_zero([r.distance for r in far]),
                neighbor_loss=_mean_or_zero([r.contrastive for r in neighbor]),
                non_neighbor_loss=_mean_or_zero([r.contrastive for r in far]),
                seconds=time.perf_counter() - epoch_start,
            )
            report.epochs.append(stats)
            train_logger.info(f"epoch {epoch}/{config.epochs} total={stats.loss.total:.6g} "
                              f"recon={stats.loss.recon:.6g} sparsity={stats.hidden_sparsity:.3f}")
            _save_epoch(params_ref[0], hyper, config, epoch)
    finally:
        if executor is not None:
            executor.shutdown()

    report.seconds = time.perf_counter() - run_start
    return params_ref[0], report


def _save_epoch(params: ParamsType, hyper: Hyperparams, config: TrainConfig, epoch: int) -> None:
    """Overwrite the checkpoint, unless the weights no longer fit the file's float32 payload"""
    if not config.checkpoint_path:
        return
    limit = np.finfo(np.float32).max
    if any(np.abs(a).max() > limit for a in params.arrays()):
        _report_divergence(config)
        raise NumericError(f"weights exceed single precision after epoch {epoch}")
    save_checkpoint(params, hyper, config.checkpoint_path)


def _report_divergence(config: TrainConfig) -> None:
    # The file on disk is always the last epoch whose weights were finite
    if config.checkpoint_path:
        train_logger.error(f"Training diverged; last good params kept in {config.checkpoint_path}")
    else:
        train_logger.error("Training diverged")


def train(seq: FrameSequence, config: TrainConfig,
          params: Optional[ModelParams] = None) -> Tuple[ModelParams, TrainReport]:
    """
    Train the fully connected model on pairs sampled from seq

    Runs epochs x (pairs_per_epoch // batch_size) steps, each averaging the
    gradient over a minibatch. objective='drlim' updates only the encoder.
    Same seed, config and data give bit-identical params.

    Raises:
        NumericError: if the loss or a gradient becomes non-finite
        UnsupportedError: if hyper.p is not 2
    """
    if params is None:
        params = init_params(seq.height * seq.width, config.hidden, config.group_size,
                             config.stride, config.seed)
    if params.input_dim != seq.height * seq.width:
        raise ConfigError(f"model expects {params.input_dim} inputs, frames have "
                          f"{seq.height * seq.width} pixels")
    if config.objective == 'drlim':
        loss_fn, grad_fn = drlim_pair_loss, drlim_backward
    else:
        loss_fn, grad_fn = full_loss, backward
    train_logger.info(f"Training {config.objective} objective: D={params.input_dim} "
                      f"N={params.num_hidden} K={params.topology.num_groups}, "
                      f"{config.epochs} epochs x {config.steps_per_epoch} steps")
    return _run(seq, config, params, loss_fn, grad_fn, encode_fc, flatten=True)


def train_conv(seq: FrameSequence, config: TrainConfig,
               params: ConvModelParams) -> Tuple[ConvModelParams, TrainReport]:
    """Train the convolutional model on full frames with the reconstruction objective"""
    if config.objective != 'full':
        raise ConfigError("the convolutional model trains with objective='full' only")
    if config.checkpoint_path:
        raise ConfigError("checkpoint files hold fully connected models only; "
                          "unset checkpoint_path for the convolutional model")
    train_logger.info(f"Training conv model: {params.num_hidden} kernels of {params.kernel_shape}")
    return _run(seq, config, params, conv_full_loss, conv_backward, encode_conv, flatten=False)


def save_checkpoint(params: ModelParams, hyper: Hyperparams, path: Union[str, Path]) -> None:
    topology = params.topology
    write_checkpoint(path, CheckpointRecord(
        input_dim=params.input_dim, num_hidden=params.num_hidden,
        num_groups=topology.num_groups, group_size=topology.group_size, stride=topology.stride,
        alpha=hyper.alpha, beta=hyper.beta, margin=hyper.margin, eps=hyper.eps,
        enc=params.enc, dec=params.dec,
    ))


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelParams, Hyperparams]:
    """
    Read params and the stored alpha, beta, margin, eps

    Raises:
        FormatError: for malformed files or stored values no model can hold
    """
    record = read_checkpoint(path)
    try:
        topology = PoolingTopology.ring(record.num_hidden, record.group_size, record.stride)
        params = ModelParams(enc=record.enc, dec=record.dec, topology=topology)
        hyper = Hyperparams(alpha=record.alpha, beta=record.beta,
                            margin=record.margin, eps=record.eps)
    except (ConfigError, ValueError) as e:
        raise FormatError(f"checkpoint holds invalid values: {e}", offset=0) from e
    return params, hyper
