import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

format_logger = logging.getLogger('SlowPool.formats')


def write_pgm(path: Union[str, Path], pixels: np.ndarray) -> None:
    """Save an 8-bit grayscale array as binary PGM (P5, maxval 255)"""
    pixels = np.asarray(pixels, dtype=np.uint8)
    image = Image.fromarray(pixels)  # 2-D uint8 maps to mode 'L'
    image.save(path, format='PPM')
    format_logger.debug(f"Wrote {pixels.shape[1]}x{pixels.shape[0]} PGM to {path}")
