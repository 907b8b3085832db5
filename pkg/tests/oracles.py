"""Independent reference computations used by the tests.

Nothing here calls into the code under test beyond evaluating a scalar
function, so each oracle is a second route to the same number.
"""

import numpy as np


def central_difference(f, arrays, h=1e-4):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array,
    perturbing entries in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def dft_power(x):
    """One-sided power spectrum by the O(P^2) DFT definition."""
    x = np.asarray(x, dtype=np.float64)
    p = x.shape[-1]
    t = np.arange(p)
    out = []
    for k in range(p // 2 + 1):
        re = np.sum(x * np.cos(2 * np.pi * k * t / p), axis=-1)
        im = -np.sum(x * np.sin(2 * np.pi * k * t / p), axis=-1)
        out.append(re * re + im * im)
    return np.stack(out, axis=-1)


def band_shares_by_frequency(power, k_freq=3):
    """Band energy shares assigning bin k by its frequency k/P against the
    closed-left edges j/K of the Nyquist frequency (bin 0 in band 1)."""
    power = np.asarray(power, dtype=np.float64)
    half = power.shape[-1] - 1
    sums = np.zeros(power.shape[:-1] + (k_freq,))
    for k in range(half + 1):
        frac = k / half
        band = 0
        for j in range(k_freq):
            if frac > j / k_freq + 1e-15:
                band = j
        sums[..., band] += power[..., k]
    total = sums.sum(axis=-1, keepdims=True)
    return np.where(total <= 1e-12, 1.0 / k_freq, sums / np.where(total <= 1e-12, 1.0, total))


def recurrence_loop(a, b, h0=None):
    """h_t = a_t h_{t-1} + b_t by an explicit Python loop."""
    h = np.zeros(a.shape[1:]) if h0 is None else np.array(h0, dtype=np.float64)
    out = []
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        out.append(h.copy())
    return np.array(out)


def selective_scan_unroll(x, dt, A, B, C, D):
    """O(steps^2) closed form for a single sequence.

    y_t = sum_{s<=t} C_t . (prod_{r=s+1..t} exp(dt_r A)) (dt_s x_s B_s) + D x_t
    with x, dt (steps, d_inner), B, C (steps, d_state), A (d_inner, d_state).
    """
    steps, d_inner = x.shape
    y = np.zeros((steps, d_inner))
    for t in range(steps):
        for d in range(d_inner):
            acc = 0.0
            for s in range(t + 1):
                decay = np.ones(A.shape[1])
                for r in range(s + 1, t + 1):
                    decay = decay * np.exp(dt[r, d] * A[d])
                acc += np.sum(C[t] * decay * dt[s, d] * x[s, d] * B[s])
            y[t, d] = acc + D[d] * x[t, d]
    return y


def enumerate_windows(length, patch_len, stride):
    """Start indices of every full window, by walking the sequence."""
    starts = []
    s = 0
    while s + patch_len <= length:
        starts.append(s)
        s += stride
    return starts
