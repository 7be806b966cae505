"""Discrete Fourier transforms over the trailing two axes.

Radix-2 Cooley-Tukey (iterative, vectorized over leading axes) when the axis
length is a power of two, dense DFT matrix otherwise. Forward transforms are
unnormalized; inverse transforms carry the 1/(H*W) factor.
"""
import numpy as np


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse_perm(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _radix2_last(x: np.ndarray, sign: float) -> np.ndarray:
    n = x.shape[-1]
    lead = x.shape[:-1]
    y = x[..., _bit_reverse_perm(n)]
    m = 2
    while m <= n:
        half = m // 2
        w = np.exp(sign * 2j * np.pi * np.arange(half) / m)
        y = y.reshape(lead + (n // m, 2, half))
        even = y[..., 0, :]
        odd = y[..., 1, :] * w
        y = np.concatenate([even + odd, even - odd], axis=-1)
        m *= 2
    return y.reshape(lead + (n,))


def _direct_last(x: np.ndarray, sign: float) -> np.ndarray:
    n = x.shape[-1]
    k = np.arange(n)
    mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    return x @ mat


def _dft_last(x: np.ndarray, sign: float) -> np.ndarray:
    if _is_pow2(x.shape[-1]):
        return _radix2_last(x, sign)
    return _direct_last(x, sign)


def _cdtype(x: np.ndarray):
    return np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128


def fft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2-D DFT over the last two axes."""
    cd = _cdtype(x)
    z = np.asarray(x).astype(np.complex128)
    z = _dft_last(z, -1.0)
    z = np.swapaxes(_dft_last(np.swapaxes(z, -1, -2), -1.0), -1, -2)
    return z.astype(cd)


def ifft2(z: np.ndarray) -> np.ndarray:
    """Inverse 2-D DFT over the last two axes, including the 1/(H*W) factor."""
    cd = _cdtype(z)
    h, w = z.shape[-2:]
    y = np.asarray(z).astype(np.complex128)
    y = _dft_last(y, 1.0)
    y = np.swapaxes(_dft_last(np.swapaxes(y, -1, -2), 1.0), -1, -2)
    return (y / (h * w)).astype(cd)
