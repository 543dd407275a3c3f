"""Attention kernels: dense cross-attention, grouped cross-attention (GCA),
the blocked online-softmax FlashGCA forward/backward, sliding-window causal
self-attention with linear position bias, and a finite-difference oracle.

All kernels take ``torch.Tensor`` inputs and return freshly allocated
tensors. Matrix arguments may carry arbitrary leading batch dimensions; the
documented shapes refer to the trailing dimensions. Single-precision inputs
are accumulated in double internally and cast back on return.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

from . import opcount
from .errors import ContractError

_ACC = torch.float64


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractError(msg)


@dataclass(frozen=True)
class BlockSpec:
    """Tile sizes: ``block_rows`` query rows (B_r) by ``block_cols`` keys (B_c).

    Sizes larger than the actual extents are clamped, so a large spec means
    "single block".
    """

    block_rows: int = 16
    block_cols: int = 16

    def __post_init__(self) -> None:
        _require(self.block_rows >= 1 and self.block_cols >= 1, f"block sizes must be >= 1, got {self}")


@dataclass
class GcaForwardOut:
    out: torch.Tensor  # (..., n_q, d_h)
    out_per_chunk: torch.Tensor  # (..., K, n_q, d_h), normalized per-chunk CA outputs
    lse: torch.Tensor  # (..., n_q, K)


@dataclass
class GcaGrads:
    dq: torch.Tensor
    dk: torch.Tensor
    dv: torch.Tensor
    dw: torch.Tensor


def cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d_h)) v for q (n_q, d_h) and k, v (n_kv, d_h)."""
    _require(q.dim() >= 2 and k.dim() >= 2 and v.dim() >= 2, "cross_attention expects matrices")
    d = q.shape[-1]
    _require(d > 0, "head dimension must be positive")
    _require(k.shape[-1] == d and v.shape[-1] == d, f"head dims differ: {q.shape} {k.shape} {v.shape}")
    _require(k.shape[-2] == v.shape[-2], f"key/value rows differ: {k.shape} vs {v.shape}")
    _require(k.shape[-2] >= 1, "cross_attention needs at least one key")
    dtype = q.dtype
    s = q.to(_ACC) @ k.to(_ACC).transpose(-1, -2) / math.sqrt(d)
    return (torch.softmax(s, dim=-1) @ v.to(_ACC)).to(dtype)


def _check_gca_shapes(q: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, w: torch.Tensor) -> None:
    _require(q.dim() >= 2, f"queries must be (..., n_q, d_h), got {tuple(q.shape)}")
    _require(keys.dim() == q.dim() + 1, f"keys must be (..., K, n_kv, d_h), got {tuple(keys.shape)}")
    _require(keys.shape == values.shape, f"keys {tuple(keys.shape)} and values {tuple(values.shape)} differ")
    _require(keys.shape[-1] == q.shape[-1], "query/key head dims differ")
    _require(q.shape[-1] >= 1, "head dimension must be positive")
    _require(keys.shape[-3] >= 1, "need at least one chunk")
    _require(keys.shape[-2] >= 1, "every chunk needs at least one key (filter empty chunks before the kernel)")
    _require(w.shape[-1] == keys.shape[-3], f"{w.shape[-1]} weights for {keys.shape[-3]} chunks")
    _require(keys.shape[:-3] == q.shape[:-2] == w.shape[:-1], "leading batch dims differ")


def gca_reference(
    h: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    w: torch.Tensor,
) -> torch.Tensor:
    """Grouped cross-attention computed the obvious way.

    Runs one :func:`cross_attention` per chunk and mixes the results with
    the fusion weights ``w`` (which must sum to one).
    """
    _check_gca_shapes(h, keys, values, w)
    total = w.to(_ACC).sum(-1)
    _require(bool(torch.all((total - 1.0).abs() <= 1e-6)), f"fusion weights must sum to 1, got {total}")
    out = torch.zeros(h.shape, dtype=_ACC)
    for k in range(keys.shape[-3]):
        o_k = cross_attention(h.to(_ACC), keys[..., k, :, :].to(_ACC), values[..., k, :, :].to(_ACC))
        out = out + w[..., k, None, None].to(_ACC) * o_k
    return out.to(h.dtype)


def _blocks(n: int, size: int) -> list[tuple[int, int]]:
    size = min(size, n)
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def flash_gca_forward(
    q: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    w: torch.Tensor,
    blocks: BlockSpec = BlockSpec(),
) -> GcaForwardOut:
    """Blocked FlashGCA forward pass.

    For every query tile and every chunk the keys are streamed tile by tile
    with running max / running sum statistics, producing the normalized
    per-chunk output O'_k and its logsumexp. The fused output accumulates
    ``w_k * O'_k`` over chunks. ``w`` is not required to be normalized here:
    the output is linear in it.
    """
    _check_gca_shapes(q, keys, values, w)
    dtype = q.dtype
    *batch, n_q, d = q.shape
    n_chunks, n_kv = keys.shape[-3], keys.shape[-2]
    scale = 1.0 / math.sqrt(d)
    qa, ka, va, wa = q.to(_ACC), keys.to(_ACC), values.to(_ACC), w.to(_ACC)

    out = torch.zeros(*batch, n_q, d, dtype=_ACC)
    out_k = torch.zeros(*batch, n_chunks, n_q, d, dtype=_ACC)
    lse = torch.zeros(*batch, n_q, n_chunks, dtype=_ACC)
    col_blocks = _blocks(n_kv, blocks.block_cols)
    for i0, i1 in _blocks(n_q, blocks.block_rows):
        q_i = qa[..., i0:i1, :] * scale
        o_i = torch.zeros(*batch, i1 - i0, d, dtype=_ACC)
        for k in range(n_chunks):
            acc = torch.zeros(*batch, i1 - i0, d, dtype=_ACC)
            row_sum = torch.zeros(*batch, i1 - i0, dtype=_ACC)
            row_max = torch.full((*batch, i1 - i0), -math.inf, dtype=_ACC)
            for j0, j1 in col_blocks:
                s = q_i @ ka[..., k, j0:j1, :].transpose(-1, -2)
                new_max = torch.maximum(row_max, s.amax(dim=-1))
                p = torch.exp(s - new_max[..., None])
                rescale = torch.exp(row_max - new_max)
                row_sum = rescale * row_sum + p.sum(dim=-1)
                acc = rescale[..., None] * acc + p @ va[..., k, j0:j1, :]
                row_max = new_max
            o_ik = acc / row_sum[..., None]
            out_k[..., k, i0:i1, :] = o_ik
            o_i = o_i + wa[..., k, None, None] * o_ik
            lse[..., i0:i1, k] = row_max + torch.log(row_sum)
        out[..., i0:i1, :] = o_i
    if opcount.enabled():
        opcount.add("gca", 2 * math.prod(batch) * n_chunks * n_q * n_kv * d)
    return GcaForwardOut(out.to(dtype), out_k.to(dtype), lse.to(dtype))


def flash_gca_backward(
    q: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    w: torch.Tensor,
    out_per_chunk: torch.Tensor,
    lse: torch.Tensor,
    d_out: torch.Tensor,
    blocks: BlockSpec = BlockSpec(),
) -> GcaGrads:
    """Blocked FlashGCA backward pass for the loss <d_out, O>.

    The attention probabilities are recomputed tile by tile from the stored
    logsumexp instead of being kept from the forward pass.
    """
    _check_gca_shapes(q, keys, values, w)
    *batch, n_q, d = q.shape
    n_chunks, n_kv = keys.shape[-3], keys.shape[-2]
    _require(tuple(out_per_chunk.shape) == (*batch, n_chunks, n_q, d), f"O' has shape {tuple(out_per_chunk.shape)}")
    _require(tuple(lse.shape) == (*batch, n_q, n_chunks), f"LSE has shape {tuple(lse.shape)}")
    _require(d_out.shape == q.shape, f"dO has shape {tuple(d_out.shape)}, expected {tuple(q.shape)}")
    scale = 1.0 / math.sqrt(d)
    qa, ka, va, wa = q.to(_ACC), keys.to(_ACC), values.to(_ACC), w.to(_ACC)
    lse_a, do_a = lse.to(_ACC), d_out.to(_ACC)

    # D[..., i, k] = <dO_i, O'_{k,i}>
    dsum = (do_a[..., None, :, :] * out_per_chunk.to(_ACC)).sum(-1).transpose(-1, -2)
    dq = torch.zeros(*batch, n_q, d, dtype=_ACC)
    dk = torch.zeros(*batch, n_chunks, n_kv, d, dtype=_ACC)
    dv = torch.zeros(*batch, n_chunks, n_kv, d, dtype=_ACC)
    dw_rows = torch.zeros(*batch, n_q, n_chunks, dtype=_ACC)
    row_blocks = _blocks(n_q, blocks.block_rows)
    for k in range(n_chunks):
        w_k = wa[..., k, None, None]
        for j0, j1 in _blocks(n_kv, blocks.block_cols):
            k_j = ka[..., k, j0:j1, :]
            v_j = va[..., k, j0:j1, :]
            dk_j = torch.zeros(*batch, j1 - j0, d, dtype=_ACC)
            dv_j = torch.zeros(*batch, j1 - j0, d, dtype=_ACC)
            for i0, i1 in row_blocks:
                q_i = qa[..., i0:i1, :]
                do_i = do_a[..., i0:i1, :]
                s = (q_i @ k_j.transpose(-1, -2)) * scale
                p = torch.exp(s - lse_a[..., i0:i1, k, None])
                dv_j = dv_j + (w_k * p).transpose(-1, -2) @ do_i
                dp = do_i @ v_j.transpose(-1, -2)
                dw_rows[..., i0:i1, k] += (p * dp).sum(-1)
                ds = w_k * p * (dp - dsum[..., i0:i1, k, None])
                dq[..., i0:i1, :] += (ds @ k_j) * scale
                dk_j = dk_j + (ds.transpose(-1, -2) @ q_i) * scale
            dk[..., k, j0:j1, :] = dk_j
            dv[..., k, j0:j1, :] = dv_j
    dw = dw_rows.sum(dim=-2)
    return GcaGrads(dq.to(q.dtype), dk.to(keys.dtype), dv.to(values.dtype), dw.to(w.dtype))


class _FlashGCA(torch.autograd.Function):
    @staticmethod
    def forward(ctx, q, keys, values, w, blocks, backward_impl):
        res = flash_gca_forward(q, keys, values, w, blocks)
        ctx.save_for_backward(q, keys, values, w, res.out_per_chunk, res.lse)
        ctx.blocks = blocks
        ctx.backward_impl = backward_impl
        return res.out

    @staticmethod
    def backward(ctx, d_out):
        q, keys, values, w, out_k, lse = ctx.saved_tensors
        g = ctx.backward_impl(q, keys, values, w, out_k, lse, d_out.contiguous(), ctx.blocks)
        return g.dq, g.dk, g.dv, g.dw, None, None


def flash_gca(
    q: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    w: torch.Tensor,
    blocks: BlockSpec = BlockSpec(),
    backward_impl: Callable[..., GcaGrads] = flash_gca_backward,
) -> torch.Tensor:
    """Differentiable FlashGCA: forward and backward both use the blocked kernels.

    ``backward_impl`` exists so verification harnesses can swap in a
    deliberately broken backward and confirm it gets caught.
    """
    return _FlashGCA.apply(q, keys, values, w, blocks, backward_impl)


def alibi_slopes(n_heads: int) -> torch.Tensor:
    """Per-head linear-bias slopes 2^(-8(h+1)/n_heads), a geometric series."""
    return torch.tensor([2.0 ** (-8.0 * (h + 1) / n_heads) for h in range(n_heads)], dtype=torch.float64)


def sliding_window_self_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    window: int,
    slope: float | torch.Tensor = 0.0,
) -> torch.Tensor:
    """Dense reference for causal sliding-window attention with linear bias.

    Position i attends to j in [max(0, i - window + 1), i] with additive bias
    ``-slope * (i - j)``. ``q, k, v`` are (..., n, d_h); ``slope`` may be a
    tensor broadcasting against the leading dims (e.g. one slope per head).
    """
    _require(window >= 1, "window must be >= 1")
    _require(q.shape == k.shape == v.shape, "q, k, v must share a shape")
    n, d = q.shape[-2], q.shape[-1]
    _require(d >= 1, "head dimension must be positive")
    dtype = q.dtype
    pos = torch.arange(n)
    dist = (pos[:, None] - pos[None, :]).to(_ACC)
    allowed = (dist >= 0) & (dist < window)
    slope_t = torch.as_tensor(slope, dtype=_ACC)
    bias = -slope_t[..., None, None] * dist if slope_t.dim() else -slope_t * dist
    s = q.to(_ACC) @ k.to(_ACC).transpose(-1, -2) / math.sqrt(d) + bias
    s = s.masked_fill(~allowed, -math.inf)
    return (torch.softmax(s, dim=-1) @ v.to(_ACC)).to(dtype)


def banded_window_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    window: int,
    slopes: torch.Tensor | None,
) -> torch.Tensor:
    """Sliding-window attention for (B, H, T, d_h) tensors in O(T * window).

    The sequence is cut into tiles of ``window`` rows; each tile attends to
    itself and the previous tile under the exact band mask. Differentiable
    through autograd. Only in-window pairs are counted as work.
    """
    _require(window >= 1, "window must be >= 1")
    b, h, t, d = q.shape
    dtype = q.dtype
    tile = window
    n_tiles = -(-t // tile)
    pad = n_tiles * tile - t

    def tiles(x: torch.Tensor) -> torch.Tensor:
        x = torch.nn.functional.pad(x, (0, 0, 0, pad))
        return x.view(b, h, n_tiles, tile, d)

    qt, kt, vt = tiles(q), tiles(k), tiles(v)
    prev_k = torch.nn.functional.pad(kt, (0, 0, 0, 0, 1, 0))[:, :, :-1]
    prev_v = torch.nn.functional.pad(vt, (0, 0, 0, 0, 1, 0))[:, :, :-1]
    kk = torch.cat([prev_k, kt], dim=3)  # (b, h, n_tiles, 2*tile, d)
    vv = torch.cat([prev_v, vt], dim=3)

    a = torch.arange(tile)
    c = torch.arange(2 * tile)
    dist = a[:, None] + tile - c[None, :]  # query pos minus key pos
    tile_idx = torch.arange(n_tiles)
    key_pos = (tile_idx[:, None] - 1) * tile + c[None, :]  # (n_tiles, 2*tile)
    allowed = (dist >= 0)[None] & (dist < window)[None] & (key_pos >= 0)[:, None, :]

    s = qt.to(_ACC) @ kk.to(_ACC).transpose(-1, -2) / math.sqrt(d)
    if slopes is not None:
        s = s - slopes.to(_ACC).view(1, h, 1, 1, 1) * dist.to(_ACC)
    s = s.masked_fill(~allowed, -math.inf)
    out = torch.softmax(s, dim=-1) @ vv.to(_ACC)
    out = out.reshape(b, h, n_tiles * tile, d)[:, :, :t].to(dtype)
    if opcount.enabled():
        pairs = sum(min(i + 1, window) for i in range(t))
        opcount.add("self_attn", 2 * b * h * pairs * d)
    return out


class FiniteDifferenceError(ArithmeticError):
    """The function under test returned a non-finite value."""


def finite_difference_grad(f: Callable[[torch.Tensor], float], x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every coordinate of ``x``."""
    _require(eps > 0, "eps must be positive")
    base = x.detach().clone().to(_ACC)
    grad = torch.zeros_like(base)
    flat = base.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f(base.to(x.dtype)))
        flat[i] = orig - eps
        fm = float(f(base.to(x.dtype)))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FiniteDifferenceError(f"non-finite function value at flat index {i}: f+={fp}, f-={fm}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad
