"""Window partitioning, grid shuffling, relative-position bias, and the
three attention kernels: plain windows, shifted windows, and two-stage grid
attention mediated by an interaction feature.

All kernels take token-layout tensors. Window/grid partitioners map
(N, H, W, C) maps to (batch_of_groups, tokens, C) and back; they are pure
permutations, so round-trips are bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

MASK_NEG = -100.0


@dataclass(frozen=True)
class WindowSpec:
    """Window side length M and cyclic shift (0 or M/2)."""

    window: int
    shift: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ShapeError(f"window must be >= 1, got {self.window}")
        if not 0 <= self.shift < self.window:
            raise ShapeError(f"shift must lie in [0, {self.window}), got {self.shift}")


@dataclass(frozen=True)
class GridSpec:
    """Sampling interval K; a map splits into K^2 groups of (H/K) x (W/K) tokens."""

    interval: int

    def __post_init__(self):
        if self.interval < 1:
            raise ShapeError(f"grid interval must be >= 1, got {self.interval}")


def _check_divisible(h: int, w: int, m: int, what: str):
    if h % m or w % m:
        raise ShapeError(f"{what} needs H and W divisible by {m}, got {h}x{w}")


_perm_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _window_perm(n: int, h: int, w: int, m: int, shift: int):
    """Token permutation (and inverse) sending an (N, H, W) raster to
    raster-ordered M x M windows, with the cyclic pre-shift folded in."""
    key = ("win", n, h, w, m, shift)
    cached = _perm_cache.get(key)
    if cached is None:
        pos = np.arange(n * h * w, dtype=np.int64).reshape(n, h, w)
        if shift:
            pos = np.roll(pos, (-shift, -shift), axis=(1, 2))
        idx = (pos.reshape(n, h // m, m, w // m, m)
               .transpose(0, 1, 3, 2, 4).reshape(-1))
        inv = np.empty_like(idx)
        inv[idx] = np.arange(idx.size)
        cached = _perm_cache[key] = (idx, inv)
    return cached


def _grid_perm(n: int, h: int, w: int, k: int):
    """Token permutation for interval-K grid groups: (i, j) joins group
    (i mod K, j mod K) at intra-group position (i // K, j // K)."""
    key = ("grid", n, h, w, k)
    cached = _perm_cache.get(key)
    if cached is None:
        pos = np.arange(n * h * w, dtype=np.int64).reshape(n, h // k, k, w // k, k)
        idx = pos.transpose(0, 2, 4, 1, 3).reshape(-1)
        inv = np.empty_like(idx)
        inv[idx] = np.arange(idx.size)
        cached = _perm_cache[key] = (idx, inv)
    return cached


def window_partition(x: Tensor, spec: WindowSpec) -> Tensor:
    """(N, H, W, C) -> (N*H*W/M^2, M^2, C), non-overlapping raster-order windows.

    A positive shift first rolls the map by (-shift, -shift).
    """
    n, h, w, c = x.shape
    m = spec.window
    _check_divisible(h, w, m, "window_partition")
    idx, inv = _window_perm(n, h, w, m, spec.shift)
    return T.permute_rows(x, idx, inv, (n * (h // m) * (w // m), m * m, c))


def window_reverse(wins: Tensor, spec: WindowSpec, h: int, w: int) -> Tensor:
    """Exact inverse of window_partition, including the inverse roll."""
    m = spec.window
    _check_divisible(h, w, m, "window_reverse")
    nw = (h // m) * (w // m)
    b, t, c = wins.shape
    if t != m * m or b % nw:
        raise ShapeError(
            f"window_reverse got {b} windows of {t} tokens, inconsistent with {h}x{w} map and M={m}"
        )
    n = b // nw
    idx, inv = _window_perm(n, h, w, m, spec.shift)
    return T.permute_rows(wins, inv, idx, (n, h, w, c))


_mask_cache: dict[tuple, np.ndarray] = {}


def shift_mask(spec: WindowSpec, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Additive attention mask for shifted windows, shape (n_windows, M^2, M^2).

    Entries are 0 where query and key come from the same pre-shift region and
    MASK_NEG otherwise, so cross-region weights vanish after softmax.
    """
    if spec.shift <= 0:
        raise ShapeError("shift_mask is only defined for shift > 0")
    m, s = spec.window, spec.shift
    key = (h, w, m, s, np.dtype(dtype).str)
    cached = _mask_cache.get(key)
    if cached is not None:
        return cached
    _check_divisible(h, w, m, "shift_mask")
    region = np.zeros((h, w), dtype=np.int64)
    rid = 0
    for hs in (slice(0, h - m), slice(h - m, h - s), slice(h - s, h)):
        for ws in (slice(0, w - m), slice(w - m, w - s), slice(w - s, w)):
            region[hs, ws] = rid
            rid += 1
    region = np.roll(region, (-s, -s), axis=(0, 1))
    region = region.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    diff = region[:, :, None] != region[:, None, :]
    mask = np.where(diff, np.array(MASK_NEG, dtype=dtype), np.array(0, dtype=dtype))
    _mask_cache[key] = mask
    return mask


# ----------------------------------------------------------------------------
# relative position bias
# ----------------------------------------------------------------------------

def relative_position_index(a: int, b: int) -> np.ndarray:
    """(a*b, a*b) index map into a (2a-1)(2b-1) relative-position table."""
    coords = np.stack(np.meshgrid(np.arange(a), np.arange(b), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel.transpose(1, 2, 0)
    rel[..., 0] += a - 1
    rel[..., 1] += b - 1
    rel[..., 0] *= 2 * b - 1
    return rel.sum(-1)


class BiasTable:
    """Learnable relative-position bias over a maximum extent (a, b).

    The table covers every displacement reachable inside an a x b group, so
    it can also serve any smaller extent; index maps are cached per extent.
    """

    def __init__(self, table: Tensor, extent: tuple[int, int], heads: int):
        a, b = extent
        rows = (2 * a - 1) * (2 * b - 1)
        if table.shape != (rows, heads):
            raise ShapeError(
                f"bias table shape {table.shape} does not match extent {extent} with {heads} heads"
            )
        self.table = table
        self.extent = extent
        self.heads = heads
        self._index_cache: dict[tuple[int, int], np.ndarray] = {}

    def gather(self, a: int, b: int) -> Tensor:
        """Bias for an a x b group as (heads, a*b, a*b)."""
        amax, bmax = self.extent
        if a > amax or b > bmax:
            raise ShapeError(f"bias extent {a}x{b} exceeds table extent {amax}x{bmax}")
        idx = self._index_cache.get((a, b))
        if idx is None:
            local = relative_position_index(a, b)
            # displacement (da, db) maps to the same table row regardless of extent
            da = local // (2 * b - 1) - (a - 1)
            db = local % (2 * b - 1) - (b - 1)
            idx = ((da + amax - 1) * (2 * bmax - 1) + (db + bmax - 1)).reshape(-1)
            self._index_cache[(a, b)] = idx
        t = a * b
        bias = T.take(self.table, idx)
        if self.heads == 1:
            return T.reshape(bias, (1, t, t))
        bias = T.reshape(bias, (t, t, self.heads))
        return T.transpose(bias, (2, 0, 1))


@dataclass
class AttentionParams:
    """Projections and bias for one multi-head attention kernel."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    w_out: Tensor
    b_out: Tensor
    heads: int
    head_dim: int
    bias: BiasTable | None = None

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    b, t, c = x.shape
    x = T.reshape(x, (b, t, heads, head_dim))
    return T.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, heads, t, d = x.shape
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, t, heads * d))


def msa(x: Tensor, p: AttentionParams, mask: np.ndarray | None = None,
        extent: tuple[int, int] | None = None) -> Tensor:
    """Multi-head self-attention over token groups (B, T, C).

    Per head: softmax(Q K^T / sqrt(d) + bias [+ mask]) V, heads concatenated
    and projected. `extent` gives the 2-D group geometry for the bias gather;
    it defaults to the square root layout of T.
    """
    b, t, c = x.shape
    if c != p.channels:
        raise ShapeError(f"attention on {c} channels needs heads*head_dim == {c}, "
                         f"got {p.heads}*{p.head_dim}")
    q = _split_heads(T.linear(x, p.wq, p.bq), p.heads, p.head_dim)
    k = _split_heads(T.linear(x, p.wk, p.bk), p.heads, p.head_dim)
    v = _split_heads(T.linear(x, p.wv, p.bv), p.heads, p.head_dim)
    bias = None
    if p.bias is not None:
        if extent is None:
            side = int(round(np.sqrt(t)))
            extent = (side, side)
        bias = p.bias.gather(*extent)
    y = T.fused_attention(q, k, v, 1.0 / math.sqrt(p.head_dim), bias, mask)
    return T.linear(_merge_heads(y), p.w_out, p.b_out)


# ----------------------------------------------------------------------------
# grid shuffle
# ----------------------------------------------------------------------------

def grid_shuffle(x: Tensor, k: int) -> Tensor:
    """(N, H, W, C) -> (N*K^2, H/K, W/K, C); token (i, j) goes to group
    (i mod K, j mod K) at intra-group position (i//K, j//K)."""
    n, h, w, c = x.shape
    _check_divisible(h, w, k, "grid_shuffle")
    idx, inv = _grid_perm(n, h, w, k)
    return T.permute_rows(x, idx, inv, (n * k * k, h // k, w // k, c))


def grid_unshuffle(x: Tensor, k: int, h: int, w: int) -> Tensor:
    """Exact inverse of grid_shuffle."""
    _check_divisible(h, w, k, "grid_unshuffle")
    b, gh, gw, c = x.shape
    if gh != h // k or gw != w // k or b % (k * k):
        raise ShapeError(
            f"grid_unshuffle got groups {b}x{gh}x{gw}, inconsistent with {h}x{w} map and K={k}"
        )
    n = b // (k * k)
    idx, inv = _grid_perm(n, h, w, k)
    return T.permute_rows(x, inv, idx, (n, h, w, c))


def grid_msa(f_g: Tensor, g: Tensor, p: AttentionParams,
             extent: tuple[int, int] | None = None,
             legacy_scale: bool = False) -> Tensor:
    """Two-stage grid attention over shuffled groups (B, T, C).

    Stage 1 gathers values through the interaction feature:
    X_hat = softmax(G K^T * scale + bias) V. Stage 2 distributes back to the
    queries: softmax(Q G^T * scale + bias) X_hat. Q, K, V are projected from
    f_g; g arrives already projected to the same width. The default scale is
    1/sqrt(d); `legacy_scale` switches to 1/d.
    """
    b, t, c = f_g.shape
    if g.shape != f_g.shape:
        raise ShapeError(f"interaction feature shape {g.shape} does not match groups {f_g.shape}")
    if c != p.channels:
        raise ShapeError(f"grid attention on {c} channels needs heads*head_dim == {c}, "
                         f"got {p.heads}*{p.head_dim}")
    q = _split_heads(T.linear(f_g, p.wq, p.bq), p.heads, p.head_dim)
    k = _split_heads(T.linear(f_g, p.wk, p.bk), p.heads, p.head_dim)
    v = _split_heads(T.linear(f_g, p.wv, p.bv), p.heads, p.head_dim)
    gh = _split_heads(g, p.heads, p.head_dim)
    s = (1.0 / p.head_dim) if legacy_scale else (1.0 / math.sqrt(p.head_dim))

    bias = None
    if p.bias is not None:
        if extent is None:
            side = int(round(np.sqrt(t)))
            extent = (side, side)
        bias = p.bias.gather(*extent)  # shared by both stages

    x_hat = T.fused_attention(gh, k, v, s, bias)
    y = T.fused_attention(q, gh, x_hat, s, bias)
    return T.linear(_merge_heads(y), p.w_out, p.b_out)
