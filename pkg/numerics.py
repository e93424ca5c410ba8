"""Dense and convolutional linear algebra shared by the model and loss code.

Matrices and images are plain float64 numpy arrays; the helpers here
validate shapes and finiteness so callers get a ShapeError instead of a
numpy broadcasting surprise.
"""
import numpy as np
from scipy.signal import convolve2d, correlate2d

from helpers import ShapeError


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Return data as a finite 2-D float64 array"""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D", expected="(rows, cols)", found=arr.shape)
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def as_image(data, name: str = "image") -> np.ndarray:
    """Return data as a finite 2-D float64 image (height, width)"""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D image", expected="(height, width)",
                         found=arr.shape)
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def as_vector(data, name: str = "vector") -> np.ndarray:
    """Return data as a finite 1-D float64 array"""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D", expected="(length,)", found=arr.shape)
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")
    return arr


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    Matrix-vector product with shape checking

    Args:
        m: matrix of shape (rows, cols)
        v: vector of length cols

    Returns:
        Vector of length rows

    Raises:
        ShapeError: if v does not have m.shape[1] entries
    """
    m = as_matrix(m)
    v = as_vector(v)
    if v.shape[0] != m.shape[1]:
        raise ShapeError("matvec dimension mismatch", expected=(m.shape, (m.shape[1],)),
                         found=(m.shape, v.shape))
    return m @ v


def conv2d_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """
    Valid-mode 2-D cross-correlation (no kernel flip)

    Output has shape (H - kH + 1, W - kW + 1).

    Raises:
        ShapeError: if the kernel is larger than the image in either dimension
    """
    img = as_image(img)
    kernel = as_image(kernel, "kernel")
    if kernel.shape[0] > img.shape[0] or kernel.shape[1] > img.shape[1]:
        raise ShapeError("kernel larger than image", expected=f"<= {img.shape}", found=kernel.shape)
    return correlate2d(img, kernel, mode='valid')


def conv2d_transposed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """
    Adjoint of conv2d_valid: full-mode convolution

    Output has shape (H + kH - 1, W + kW - 1) and satisfies
    <conv2d_valid(a, k), b> == <a, conv2d_transposed(b, k)>.
    """
    img = as_image(img)
    kernel = as_image(kernel, "kernel")
    return convolve2d(img, kernel, mode='full')
