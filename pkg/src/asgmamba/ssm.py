"""Selective state-space (Mamba-style) block over the patch-token axis.

Shapes: tokens live on axis -2, so ``x`` is (..., steps, d_inner), and the
per-step input-dependent ``B``/``C`` are (..., steps, d_state). ``A`` is the
diagonal (d_inner, d_state) continuous-time matrix, ``A = -exp(A_log)``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAMBA_KEYS = ("W_in", "conv_w", "conv_b", "W_dt", "b_dt", "W_B", "W_C", "A_log", "D_skip", "W_out")


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_mamba(rng: np.random.Generator, d_model: int, d_state: int = 16, d_conv: int = 4,
               expand: int = 2, dt_min: float = 1e-3, dt_max: float = 1e-1,
               dtype=np.float64) -> dict[str, np.ndarray]:
    d_inner = expand * d_model

    def uni(bound, shape):
        return rng.uniform(-bound, bound, shape).astype(dtype)

    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_inner))
    return {
        "W_in": uni(d_model ** -0.5, (2 * d_inner, d_model)),
        "conv_w": uni(d_conv ** -0.5, (d_conv, d_inner)),
        "conv_b": uni(d_conv ** -0.5, (d_inner,)),
        "W_dt": uni(d_inner ** -0.5, (d_inner, d_inner)),
        "b_dt": inverse_softplus(dt).astype(dtype),
        "W_B": uni(d_inner ** -0.5, (d_state, d_inner)),
        "W_C": uni(d_inner ** -0.5, (d_state, d_inner)),
        "A_log": np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1)).astype(dtype),
        "D_skip": np.ones(d_inner, dtype=dtype),
        "W_out": uni(d_inner ** -0.5, (d_model, d_inner)),
    }


def ssm_parameters(x: Tensor, W_dt: Tensor, b_dt: Tensor, W_B: Tensor, W_C: Tensor):
    """Input-dependent step size and projections: (dt, B, C)."""
    dt = T.softplus(T.linear(x, W_dt, b_dt))
    return dt, T.linear(x, W_B), T.linear(x, W_C)


def state_matrix(A_log: Tensor) -> Tensor:
    return T.neg(T.exp(A_log))


def discretize(dt: Tensor, A: Tensor, B: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order hold on the diagonal with the simplified input term.

    Returns ``A_bar = exp(dt * A)`` and ``Bx_bar = dt * x * B``, both shaped
    (..., steps, d_inner, d_state).
    """
    if dt.shape != x.shape or A.shape[0] != dt.shape[-1] or B.shape[:-1] != dt.shape[:-1] \
            or B.shape[-1] != A.shape[1]:
        raise T.ShapeError("discretize", dt.shape, A.shape, B.shape, x.shape)
    dtd, ad, bd, xd = dt.data, A.data, B.data, x.data
    a_bar = np.exp(dtd[..., None] * ad)
    u = dtd * xd
    bx = u[..., None] * bd[..., None, :]
    lead = tuple(range(dtd.ndim - 1))

    def bw_a(g):
        t = g * a_bar
        return (t * ad).sum(-1), (t * dtd[..., None]).sum(axis=lead)

    def bw_b(g):
        gu = np.matmul(g, bd[..., None])[..., 0]
        gB = np.matmul(u[..., None, :], g)[..., 0, :]
        return gu * xd, gB, gu * dtd

    return (T.record(a_bar, (dt, A), bw_a, "discretize_A"),
            T.record(bx, (dt, B, x), bw_b, "discretize_B"))


def _readout(h: Tensor, C: Tensor) -> Tensor:
    """y[..., d] = sum_n h[..., d, n] * C[..., n]."""
    hd, cd = h.data, C.data

    def bw(g):
        return g[..., None] * cd[..., None, :], np.matmul(g[..., None, :], hd)[..., 0, :]

    return T.record(np.matmul(hd, cd[..., None])[..., 0], (h, C), bw, "readout")


def _skip(x: Tensor, D_skip: Tensor) -> Tensor:
    xd, dd = x.data, D_skip.data
    lead = tuple(range(xd.ndim - 1))
    return T.record(xd * dd, (x, D_skip), lambda g: (g * dd, (g * xd).sum(axis=lead)), "skip")


def selective_scan_reference(x: Tensor, dt: Tensor, A: Tensor, B: Tensor, C: Tensor,
                             D_skip: Tensor) -> Tensor:
    """Composed scan: discretize, then the generic recurrence primitive."""
    a_bar, bx = discretize(dt, A, B, x)
    nd = a_bar.ndim
    to_front = (nd - 3,) + tuple(i for i in range(nd) if i != nd - 3)
    back = tuple(np.argsort(to_front))
    h = T.linear_recurrence_scan(T.transpose(a_bar, to_front), T.transpose(bx, to_front))
    h = T.transpose(h, back)
    return _readout(h, C) + _skip(x, D_skip)


def selective_scan(x: Tensor, dt: Tensor, A: Tensor, B: Tensor, C: Tensor, D_skip: Tensor,
                   chunk_size: int | None = None) -> Tensor:
    """Fused sequential scan ``h_t = exp(dt_t A) h_{t-1} + dt_t x_t B_t``,
    ``y_t = C_t . h_t + D_skip * x_t`` with ``h_0 = 0``.

    Only the hidden-state history is kept for the backward pass. With
    ``chunk_size`` the discretisation is precomputed ``chunk_size`` steps at a
    time; the recurrence itself is unchanged, so results are bitwise equal.
    """
    if dt.shape != x.shape or B.shape != C.shape or B.shape[:-1] != x.shape[:-1]:
        raise T.ShapeError("selective_scan", x.shape, dt.shape, B.shape, C.shape)
    if A.shape != (x.shape[-1], B.shape[-1]) or D_skip.shape != (x.shape[-1],):
        raise T.ShapeError("selective_scan", x.shape, A.shape, D_skip.shape)
    lead = x.shape[:-2]
    steps, d_inner = x.shape[-2:]
    d_state = B.shape[-1]
    dtype = np.result_type(x.dtype, dt.dtype, A.dtype, B.dtype)
    xd = x.data.reshape(-1, steps, d_inner)
    dtd = dt.data.reshape(-1, steps, d_inner)
    bd = B.data.reshape(-1, steps, d_state)
    cd = C.data.reshape(-1, steps, d_state)
    ad, dd = A.data, D_skip.data
    nb = xd.shape[0]
    chunk = chunk_size or 1

    # the state history is only needed by the backward pass
    keep = T.grad_enabled() and any(v.requires_grad for v in (x, dt, A, B, C, D_skip))
    hs = np.empty((steps, nb, d_inner, d_state), dtype=dtype) if keep else None
    y = np.empty((nb, steps, d_inner), dtype=dtype)
    h = np.zeros((nb, d_inner, d_state), dtype=dtype)
    for t0 in range(0, steps, chunk):
        t1 = min(t0 + chunk, steps)
        a_bar = np.exp(dtd[:, t0:t1, :, None] * ad)
        bx = (dtd[:, t0:t1] * xd[:, t0:t1])[..., None] * bd[:, t0:t1, None, :]
        for t in range(t0, t1):
            h = a_bar[:, t - t0] * h + bx[:, t - t0]
            if keep:
                hs[t] = h
            y[:, t] = np.matmul(h, cd[:, t, :, None])[..., 0]
    y += xd * dd

    def bw(g):
        g = g.reshape(nb, steps, d_inner)
        gx = g * dd
        gD = (g * xd).sum(axis=(0, 1))
        gdt = np.zeros_like(xd, dtype=dtype)
        gA = np.zeros_like(ad, dtype=dtype)
        gB = np.zeros_like(bd, dtype=dtype)
        gC = np.zeros_like(cd, dtype=dtype)
        dh = np.zeros((nb, d_inner, d_state), dtype=dtype)
        zero = np.zeros_like(dh)
        for t in range(steps - 1, -1, -1):
            gt = g[:, t]
            gC[:, t] = np.matmul(gt[:, None, :], hs[t])[:, 0, :]
            dh = dh + gt[..., None] * cd[:, t, None, :]
            dtt, xt = dtd[:, t], xd[:, t]
            a_bar = np.exp(dtt[..., None] * ad)
            hprev = hs[t - 1] if t > 0 else zero
            tmp = dh * hprev * a_bar
            gdt[:, t] += (tmp * ad).sum(-1)
            gA += (tmp * dtt[..., None]).sum(0)
            gu = np.matmul(dh, bd[:, t, :, None])[..., 0]
            gB[:, t] = np.matmul((dtt * xt)[:, None, :], dh)[:, 0, :]
            gdt[:, t] += gu * xt
            gx[:, t] += gu * dtt
            dh = dh * a_bar
        shp = lead + (steps,)
        return (gx.reshape(shp + (d_inner,)), gdt.reshape(shp + (d_inner,)), gA,
                gB.reshape(shp + (d_state,)), gC.reshape(shp + (d_state,)), gD)

    return T.record(y.reshape(lead + (steps, d_inner)), (x, dt, A, B, C, D_skip), bw, "selective_scan")


def mamba_block(u: Tensor, p: dict[str, Tensor], fused: bool = True) -> Tensor:
    """(..., steps, D) -> (..., steps, D); the residual is the caller's job."""
    d_inner = p["D_skip"].shape[0]
    xz = T.linear(u, p["W_in"])
    x = xz[..., :d_inner]
    z = xz[..., d_inner:]
    x = T.silu(T.causal_depthwise_conv1d(x, p["conv_w"], p["conv_b"]))
    dt, B, C = ssm_parameters(x, p["W_dt"], p["b_dt"], p["W_B"], p["W_C"])
    A = state_matrix(p["A_log"])
    scan = selective_scan if fused else selective_scan_reference
    y = scan(x, dt, A, B, C, p["D_skip"])
    return T.linear(T.mul(y, T.silu(z)), p["W_out"])
