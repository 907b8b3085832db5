"""Patch-level spectral descriptors and the gate that consumes them.

The power spectrum is never part of the differentiation graph: it is a
function of (parameter-free) normalised input patches only.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

ENERGY_EPS = 1e-12


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(size: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(size // 2) / size)


def fft_radix2(z: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time FFT along the last axis (length 2**k)."""
    n = z.shape[-1]
    if not _is_pow2(n):
        raise ValueError(f"radix-2 FFT needs a power-of-two length, got {n}")
    a = np.asarray(z, dtype=np.complex128)[..., _bit_reverse(n)]
    lead = a.shape[:-1]
    size = 2
    while size <= n:
        half = size // 2
        blocks = a.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size)
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return a


def rfft(x: np.ndarray) -> np.ndarray:
    """One-sided DFT of real input along the last axis, ``P//2 + 1`` bins.

    Packs the real sequence as ``x[2n] + i x[2n+1]``, runs a half-length
    complex FFT and untangles the even/odd spectra.
    """
    x = np.asarray(x, dtype=np.float64)
    p = x.shape[-1]
    if p < 2 or not _is_pow2(p):
        raise ValueError(f"patch length must be a power of two >= 2, got {p}")
    h = p // 2
    zf = fft_radix2(x[..., 0::2] + 1j * x[..., 1::2])
    out = np.empty(x.shape[:-1] + (h + 1,), dtype=np.complex128)
    z0 = zf[..., 0]
    # DC and Nyquist are real; compute them without twiddle round-off
    out[..., 0] = z0.real + z0.imag
    out[..., h] = z0.real - z0.imag
    if h > 1:
        k = np.arange(1, h)
        zk = zf[..., k]
        zc = np.conj(zf[..., h - k])
        even = 0.5 * (zk + zc)
        odd = -0.5j * (zk - zc)
        out[..., 1:h] = even + np.exp(-2j * np.pi * k / p) * odd
    return out


def rfft_power(x: np.ndarray) -> np.ndarray:
    """``|rFFT(x)|**2`` along the last axis."""
    f = rfft(x)
    return f.real * f.real + f.imag * f.imag


def band_index(num_bins: int, k_freq: int) -> np.ndarray:
    """Band (0-based) of each one-sided bin; bin k joins ceil(K*k / (P/2))."""
    if k_freq < 1:
        raise ValueError(f"k_freq must be >= 1, got {k_freq}")
    half = num_bins - 1
    k = np.arange(num_bins)
    if half == 0:
        return np.zeros(1, dtype=np.int64)
    band = -(-k_freq * k // half)
    return np.clip(band, 1, k_freq) - 1


def band_aggregate(power: np.ndarray, k_freq: int = 3) -> np.ndarray:
    """Share of total power per frequency band, shape (..., k_freq).

    Patches whose total power is at or below ``ENERGY_EPS`` carry no band
    preference and map to the uniform descriptor.
    """
    power = np.asarray(power, dtype=np.float64)
    if np.any(power < 0):
        raise ValueError("power spectrum must be non-negative")
    bands = band_index(power.shape[-1], k_freq)
    sums = np.zeros(power.shape[:-1] + (k_freq,), dtype=np.float64)
    for b in range(k_freq):
        sums[..., b] = power[..., bands == b].sum(axis=-1)
    total = sums.sum(axis=-1, keepdims=True)
    silent = total <= ENERGY_EPS
    shares = sums / np.where(silent, 1.0, total)
    return np.where(silent, 1.0 / k_freq, shares)


def spectral_descriptor(patches: np.ndarray, k_freq: int = 3) -> np.ndarray:
    return band_aggregate(rfft_power(patches), k_freq)


def gate_hidden_width(d_model: int) -> int:
    return d_model // 4


def init_gate(rng: np.random.Generator, d_model: int, k_freq: int = 3, dtype=np.float64) -> dict[str, np.ndarray]:
    hidden = gate_hidden_width(d_model)
    if hidden < 1:
        raise ValueError(f"d_model={d_model} leaves no room for a D/4 gate bottleneck")
    b1, b2 = 1.0 / np.sqrt(k_freq), 1.0 / np.sqrt(hidden)
    return {
        "W_g1": rng.uniform(-b1, b1, (hidden, k_freq)).astype(dtype),
        "b_g1": rng.uniform(-b1, b1, hidden).astype(dtype),
        "W_g2": rng.uniform(-b2, b2, (d_model, hidden)).astype(dtype),
        "b_g2": rng.uniform(-b2, b2, d_model).astype(dtype),
    }


def gate_mlp(v_spec: Tensor, W_g1: Tensor, b_g1: Tensor, W_g2: Tensor, b_g2: Tensor) -> Tensor:
    """sigmoid(W_g2 relu(W_g1 v + b_g1) + b_g2), applied per patch."""
    if W_g1.shape[1] != v_spec.shape[-1]:
        raise T.ShapeError("gate_mlp", v_spec.shape, W_g1.shape, detail="descriptor width")
    if W_g2.shape[1] != W_g1.shape[0]:
        raise T.ShapeError("gate_mlp", W_g1.shape, W_g2.shape, detail="bottleneck width")
    hidden = T.relu(T.linear(v_spec, W_g1, b_g1))
    return T.sigmoid(T.linear(hidden, W_g2, b_g2))


def apply_gate(z_in: Tensor, gate: Tensor, norm_weight: Tensor | None = None,
               norm_bias: Tensor | None = None, prenorm: bool = True) -> Tensor:
    """LayerNorm(z_in) * gate (or z_in * gate with ``prenorm=False``)."""
    if z_in.shape != gate.shape:
        raise T.ShapeError("apply_gate", z_in.shape, gate.shape)
    z = T.layernorm(z_in, norm_weight, norm_bias) if prenorm else z_in
    return T.mul(z, gate)
