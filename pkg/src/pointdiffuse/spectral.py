"""Arbitrary-length 1-D DFT on paired real tensors.

Complex data is carried as two real tensors (re, im), so everything is plain
torch arithmetic and autograd works through the transform.  Lengths factor
into radix-2/3/5 stages; any other prime length goes through Bluestein's
chirp-z convolution on a power-of-two grid.

Convention: forward X_k = sum_n x_n exp(-2 pi i k n / L), unnormalised;
the inverse carries the 1/L.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

_DIRECT_RADICES = (2, 3, 5)


@dataclass(frozen=True, eq=False)
class SpectralField:
    values: torch.Tensor  # source shape + trailing (re, im) pair
    axis: int
    length: int

    @property
    def real(self) -> torch.Tensor:
        return self.values[..., 0]

    @property
    def imag(self) -> torch.Tensor:
        return self.values[..., 1]


def smallest_factor(n: int) -> int:
    if n % 2 == 0:
        return 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


@lru_cache(maxsize=None)
def _dft_matrix(p: int, dtype: torch.dtype):
    q = np.arange(p)
    ang = -2.0 * np.pi * np.outer(q, q) / p
    return torch.tensor(np.cos(ang), dtype=dtype), torch.tensor(np.sin(ang), dtype=dtype)


@lru_cache(maxsize=None)
def _twiddles(p: int, m: int, dtype: torch.dtype):
    ang = -2.0 * np.pi * np.outer(np.arange(p), np.arange(m)) / (p * m)
    return torch.tensor(np.cos(ang), dtype=dtype), torch.tensor(np.sin(ang), dtype=dtype)


@lru_cache(maxsize=None)
def _chirp(n: int, dtype: torch.dtype):
    # n^2 mod 2n keeps the angle argument small and exact for large n.
    k = np.arange(n, dtype=np.int64)
    ang = -np.pi * ((k * k) % (2 * n)) / n
    return torch.tensor(np.cos(ang), dtype=dtype), torch.tensor(np.sin(ang), dtype=dtype)


@lru_cache(maxsize=None)
def _bluestein_kernel(n: int, size: int, dtype: torch.dtype):
    wr, wi = _chirp(n, torch.float64)
    br = torch.zeros(size, dtype=torch.float64)
    bi = torch.zeros(size, dtype=torch.float64)
    br[:n], bi[:n] = wr, -wi
    if n > 1:
        br[size - n + 1:] = wr[1:].flip(0)
        bi[size - n + 1:] = -wi[1:].flip(0)
    kr, ki = _fft_last(br, bi)
    return kr.to(dtype), ki.to(dtype)


def _direct(re, im):
    cr, ci = _dft_matrix(re.shape[-1], re.dtype)
    return re @ cr.T - im @ ci.T, re @ ci.T + im @ cr.T


def _bluestein(re, im):
    n = re.shape[-1]
    size = 1 << (2 * n - 1).bit_length()
    wr, wi = _chirp(n, re.dtype)
    ar = re * wr - im * wi
    ai = re * wi + im * wr
    pad = [0, size - n]
    ar = torch.nn.functional.pad(ar, pad)
    ai = torch.nn.functional.pad(ai, pad)
    Ar, Ai = _fft_last(ar, ai)
    Kr, Ki = _bluestein_kernel(n, size, re.dtype)
    cr, ci = _ifft_last(Ar * Kr - Ai * Ki, Ar * Ki + Ai * Kr)
    cr, ci = cr[..., :n], ci[..., :n]
    return cr * wr - ci * wi, cr * wi + ci * wr


def _fft_last(re, im):
    n = re.shape[-1]
    if n == 1:
        return re, im
    p = smallest_factor(n)
    if p == n:
        return _direct(re, im) if n in _DIRECT_RADICES else _bluestein(re, im)
    m = n // p
    lead = re.shape[:-1]
    # Decimation in time: row r holds x[r], x[r+p], x[r+2p], ...
    sr = re.reshape(*lead, m, p).transpose(-1, -2)
    si = im.reshape(*lead, m, p).transpose(-1, -2)
    yr, yi = _fft_last(sr, si)
    tc, ts = _twiddles(p, m, re.dtype)
    zr = yr * tc - yi * ts
    zi = yr * ts + yi * tc
    dc, ds = _dft_matrix(p, re.dtype)
    xr = torch.einsum("qr,...rk->...qk", dc, zr) - torch.einsum("qr,...rk->...qk", ds, zi)
    xi = torch.einsum("qr,...rk->...qk", dc, zi) + torch.einsum("qr,...rk->...qk", ds, zr)
    return xr.reshape(*lead, n), xi.reshape(*lead, n)


def _ifft_last(re, im):
    n = re.shape[-1]
    xr, xi = _fft_last(re, -im)
    return xr / n, -xi / n


def fft_pair(re, im=None, axis: int = -1):
    """Forward DFT of (re, im) along ``axis``; returns the (re, im) spectrum."""
    if im is None:
        im = torch.zeros_like(re)
    re, im = re.movedim(axis, -1), im.movedim(axis, -1)
    xr, xi = _fft_last(re, im)
    return xr.movedim(-1, axis), xi.movedim(-1, axis)


def ifft_pair(re, im, axis: int = -1):
    re, im = re.movedim(axis, -1), im.movedim(axis, -1)
    xr, xi = _ifft_last(re, im)
    return xr.movedim(-1, axis), xi.movedim(-1, axis)


def fft_axis(values, axis: int = 0) -> SpectralField:
    x = values if isinstance(values, torch.Tensor) else torch.as_tensor(np.asarray(values, dtype=np.float64))
    if x.shape[axis] < 1:
        raise ValueError("transform axis must be non-empty")
    axis = axis % x.dim()
    re, im = fft_pair(x, None, axis)
    return SpectralField(torch.stack([re, im], dim=-1), axis, x.shape[axis])


def ifft_axis(spec: SpectralField, keep_imag: bool = False):
    """Inverse transform; returns the real part unless ``keep_imag`` is set."""
    re, im = ifft_pair(spec.real, spec.imag, spec.axis)
    return torch.stack([re, im], dim=-1) if keep_imag else re
