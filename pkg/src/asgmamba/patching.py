"""Overlapping patch extraction and patch embedding with identity injection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ScalePatchConfig:
    patch_len: int
    stride: int
    look_back: int

    @classmethod
    def for_branch(cls, patch_len: int, look_back: int, overlap: bool = True) -> "ScalePatchConfig":
        return cls(patch_len, patch_len // 2 if overlap else patch_len, look_back)

    @property
    def num_patches(self) -> int:
        return num_patches(self.look_back, self.patch_len, self.stride)


def num_patches(look_back: int, patch_len: int, stride: int) -> int:
    if look_back < patch_len:
        raise ValueError(f"branch P={patch_len}: look-back {look_back} is shorter than the patch")
    return (look_back - patch_len) // stride + 1


def patch_index(look_back: int, patch_len: int, stride: int) -> np.ndarray:
    n = num_patches(look_back, patch_len, stride)
    return np.arange(n)[:, None] * stride + np.arange(patch_len)[None, :]


def unfold_array(x: np.ndarray, patch_len: int, stride: int) -> np.ndarray:
    """(..., L) -> (..., N_k, P) without gradient tracking."""
    return x[..., patch_index(x.shape[-1], patch_len, stride)]


def overlapping_patch(x: Tensor, patch_len: int, stride: int) -> Tensor:
    """(S, L) -> (S, N_k, P); patch i covers [i*stride, i*stride + P)."""
    idx = patch_index(x.shape[-1], patch_len, stride)
    src_shape = x.shape

    def bw(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        # overlapping windows: scatter-add one patch offset at a time
        for j in range(patch_len):
            full[..., idx[:, j]] += g[..., j]
        return (full,)

    return T.record(x.data[..., idx], (x,), bw, "unfold")


def embed_patches(patches: Tensor, W_emb: Tensor, b_emb: Tensor) -> Tensor:
    """Per-patch linear map P -> D; ``W_emb`` is (D, P)."""
    if W_emb.shape[1] != patches.shape[-1]:
        raise T.ShapeError("embed_patches", patches.shape, W_emb.shape, detail="W_emb must be (D, P)")
    return T.linear(patches, W_emb, b_emb)


def add_context(z_raw: Tensor, E_pos: Tensor, E_node: Tensor, variate_index) -> Tensor:
    """z_raw (S, N_k, D) + E_pos (N_k, D) + E_node[variate of each sequence].

    ``variate_index`` holds one variate id per sequence row of ``z_raw``.
    """
    s, n, d = z_raw.shape
    if E_pos.shape != (n, d):
        raise T.ShapeError("add_context", z_raw.shape, E_pos.shape, detail="E_pos must be (N_k, D)")
    if E_node.ndim != 2 or E_node.shape[1] != d:
        raise T.ShapeError("add_context", z_raw.shape, E_node.shape, detail="E_node must be (M, D)")
    idx = np.asarray(variate_index, dtype=np.int64)
    if idx.shape != (s,):
        raise ValueError(f"add_context: expected {s} variate indices, got shape {idx.shape}")
    m = E_node.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise ValueError(f"add_context: variate index out of range for M={m}")
    node = T.transpose(T.expand(T.take(E_node, idx), n), (1, 0, 2))
    return z_raw + T.expand(E_pos, s) + node
