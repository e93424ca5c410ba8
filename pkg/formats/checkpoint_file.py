import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from helpers import FormatError

format_logger = logging.getLogger('SlowPool.formats')

CHECKPOINT_MAGIC = b"SFAE"
CHECKPOINT_VERSION = 1
DIMS = struct.Struct('<5I')     # D, N, K, group_size, stride
SCALARS = struct.Struct('<4d')  # alpha, beta, margin, eps
DIMS_OFFSET = len(CHECKPOINT_MAGIC) + 1
SCALARS_OFFSET = DIMS_OFFSET + DIMS.size
PAYLOAD_OFFSET = SCALARS_OFFSET + SCALARS.size


@dataclass
class CheckpointRecord:
    input_dim: int
    num_hidden: int
    num_groups: int
    group_size: int
    stride: int
    alpha: float
    beta: float
    margin: float
    eps: float
    enc: np.ndarray
    dec: np.ndarray


def write_checkpoint(path: Union[str, Path], record: CheckpointRecord) -> None:
    """Write header, hyperparameters, then enc and dec as little-endian float32, row-major"""
    header = (CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION])
              + DIMS.pack(record.input_dim, record.num_hidden, record.num_groups,
                          record.group_size, record.stride)
              + SCALARS.pack(record.alpha, record.beta, record.margin, record.eps))
    with open(path, 'wb') as f:
        f.write(header)
        f.write(np.asarray(record.enc).astype('<f4').tobytes(order='C'))
        f.write(np.asarray(record.dec).astype('<f4').tobytes(order='C'))
    format_logger.debug(f"Wrote checkpoint D={record.input_dim} N={record.num_hidden} to {path}")


def read_checkpoint(path: Union[str, Path]) -> CheckpointRecord:
    """
    Read a checkpoint file

    Raises:
        FormatError: for bad magic, a version other than 1, inconsistent
            dimensions, or a file length that disagrees with the header
    """
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) or data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    if len(data) < PAYLOAD_OFFSET:
        raise FormatError("truncated checkpoint header", offset=len(data))
    version = data[len(CHECKPOINT_MAGIC)]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(CHECKPOINT_MAGIC))

    d, n, k, group_size, stride = DIMS.unpack_from(data, DIMS_OFFSET)
    alpha, beta, margin, eps = SCALARS.unpack_from(data, SCALARS_OFFSET)
    if d == 0 or n == 0 or not 1 <= stride <= group_size <= n:
        raise FormatError(f"invalid checkpoint dims D={d} N={n} group_size={group_size} "
                          f"stride={stride}", offset=DIMS_OFFSET)
    if k != math.ceil(n / stride):
        raise FormatError(f"group count {k} disagrees with N={n}, stride={stride}",
                          offset=DIMS_OFFSET + 8)

    enc_count = n * (d + 1)
    dec_count = d * n
    expected = PAYLOAD_OFFSET + 4 * (enc_count + dec_count)
    if len(data) != expected:
        raise FormatError(f"checkpoint length {len(data)} != header-implied {expected}",
                          offset=min(len(data), expected))

    values = np.frombuffer(data, dtype='<f4', offset=PAYLOAD_OFFSET).astype(np.float64)
    return CheckpointRecord(
        input_dim=d, num_hidden=n, num_groups=k, group_size=group_size, stride=stride,
        alpha=alpha, beta=beta, margin=margin, eps=eps,
        enc=values[:enc_count].reshape(n, d + 1),
        dec=values[enc_count:].reshape(d, n),
    )
