import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from helpers import FormatError

format_logger = logging.getLogger('SlowPool.formats')

SEQUENCE_MAGIC = b"SFVSEQ1\0"
HEADER = struct.Struct('<III')
HEADER_SIZE = len(SEQUENCE_MAGIC) + HEADER.size
# Largest frame count x height x width accepted from a header
MAX_ELEMENTS = 2 ** 31


def write_sequence(path: Union[str, Path], frames: np.ndarray) -> None:
    """Write a (T, H, W) stack as magic, u32 T/H/W, then little-endian float32 values"""
    frames = np.asarray(frames)
    t, h, w = frames.shape
    payload = frames.astype('<f4').tobytes(order='C')
    with open(path, 'wb') as f:
        f.write(SEQUENCE_MAGIC)
        f.write(HEADER.pack(t, h, w))
        f.write(payload)
    format_logger.debug(f"Wrote sequence {t}x{h}x{w} to {path}")


def read_sequence(path: Union[str, Path]) -> np.ndarray:
    """
    Read a sequence file back into a float64 (T, H, W) array

    Raises:
        FormatError: for bad magic, a short header, zero or oversized dims,
            or a payload whose length disagrees with the header
    """
    data = Path(path).read_bytes()
    if len(data) < len(SEQUENCE_MAGIC):
        raise FormatError("file too short for sequence magic", offset=len(data))
    if data[:len(SEQUENCE_MAGIC)] != SEQUENCE_MAGIC:
        raise FormatError("bad sequence magic", offset=0)
    if len(data) < HEADER_SIZE:
        raise FormatError("truncated sequence header", offset=len(data))

    t, h, w = HEADER.unpack_from(data, len(SEQUENCE_MAGIC))
    for index, (name, value) in enumerate((("T", t), ("H", h), ("W", w))):
        if value == 0:
            raise FormatError(f"sequence dimension {name} is zero",
                              offset=len(SEQUENCE_MAGIC) + 4 * index)
    if t * h * w > MAX_ELEMENTS:
        raise FormatError(f"sequence dimensions {t}x{h}x{w} overflow", offset=len(SEQUENCE_MAGIC))

    expected = HEADER_SIZE + 4 * t * h * w
    if len(data) < expected:
        raise FormatError(f"truncated payload, header implies {expected} bytes", offset=len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload", offset=expected)

    values = np.frombuffer(data, dtype='<f4', count=t * h * w, offset=HEADER_SIZE)
    return values.reshape(t, h, w).astype(np.float64)
