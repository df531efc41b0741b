"""Network assembly: fused convolution blocks, window-attention layers, the
mixed-attention layer with its grid branch, residual groups, and the full
upscaler, plus parameter/multiply-add accounting and tiled inference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, asdict

import numpy as np

from . import tensor as T
from .attention import (
    AttentionParams,
    BiasTable,
    WindowSpec,
    grid_msa,
    grid_shuffle,
    grid_unshuffle,
    msa,
    shift_mask,
    window_partition,
    window_reverse,
)
from .errors import ConfigError, ShapeError
from .tensor import ParamStore, Tensor

LN_EPS = 1e-5


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

@dataclass
class HmaConfig:
    """Architecture hyperparameters.

    `n_rhtb` counts residual groups and `n_fab` the attention blocks inside
    each one. `window` is the attention window side M, `grid_interval` the
    sparse-sampling stride K. `grid_extent` is the largest group side
    (H/K = W/K) the grid bias table must serve; training patches of 64 px
    with K=4 need 16. `shrink_rate` divides the expanded width to size the
    squeeze-excitation bottleneck.
    """

    scale: int = 4
    in_channels: int = 3
    channels: int = 180
    window: int = 16
    grid_interval: int = 4
    n_rhtb: int = 6
    n_fab: int = 6
    heads_fab: int = 6
    heads_gab_grid: int = 3
    heads_gab_win: int = 3
    expansion_rate: int = 6
    shrink_rate: int = 2
    mlp_ratio: int = 2
    grid_extent: int = 16
    legacy_grid_scale: bool = False

    def validate(self) -> "HmaConfig":
        c = self.channels
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3, or 4, got {self.scale}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if c % 4:
            raise ConfigError(f"channels must be divisible by 4 for the branch splits, got {c}")
        if self.window < 2 or self.window % 2:
            raise ConfigError(f"window must be even and >= 2, got {self.window}")
        if self.grid_interval < 1:
            raise ConfigError(f"grid_interval must be >= 1, got {self.grid_interval}")
        if self.window % self.grid_interval:
            raise ConfigError(
                f"grid_interval {self.grid_interval} must divide window {self.window}"
            )
        if c % self.heads_fab:
            raise ConfigError(f"channels {c} not divisible by heads_fab {self.heads_fab}")
        if (c // 2) % self.heads_gab_grid:
            raise ConfigError(
                f"grid branch width {c // 2} not divisible by heads_gab_grid {self.heads_gab_grid}"
            )
        if (c // 4) % self.heads_gab_win:
            raise ConfigError(
                f"window branch width {c // 4} not divisible by heads_gab_win {self.heads_gab_win}"
            )
        for name in ("n_rhtb", "n_fab", "expansion_rate", "shrink_rate", "mlp_ratio", "grid_extent"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if (c * self.expansion_rate) % self.shrink_rate:
            raise ConfigError(
                f"shrink_rate {self.shrink_rate} must divide expanded width {c * self.expansion_rate}"
            )
        return self

    @property
    def pad_granularity(self) -> int:
        return math.lcm(self.window, self.grid_interval)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "HmaConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, text: str) -> "HmaConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


def paper_config(scale: int = 4) -> HmaConfig:
    """The full-size configuration."""
    return HmaConfig(scale=scale).validate()


def toy_config(scale: int = 2) -> HmaConfig:
    """Desk-scale configuration used by the smoke-training and gradient checks."""
    return HmaConfig(
        scale=scale,
        channels=32,
        window=8,
        grid_interval=2,
        n_rhtb=2,
        n_fab=2,
        heads_fab=1,
        heads_gab_grid=1,
        heads_gab_win=1,
        expansion_rate=2,
        shrink_rate=2,
        mlp_ratio=1,
        grid_extent=32,
    ).validate()


# ----------------------------------------------------------------------------
# parameter bundles
# ----------------------------------------------------------------------------

@dataclass
class NormParams:
    g: Tensor
    b: Tensor


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class ConvParams:
    w: Tensor  # OIHW
    b: Tensor


@dataclass
class FusedConvParams:
    norm: NormParams
    expand: ConvParams
    se1: LinearParams
    se2: LinearParams
    project: ConvParams


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class StlParams:
    norm1: NormParams
    attn: AttentionParams
    norm2: NormParams
    mlp: MlpParams


@dataclass
class FabParams:
    fused: FusedConvParams
    stls: list[StlParams]


@dataclass
class MalParams:
    win1: AttentionParams
    win2: AttentionParams
    grid: AttentionParams
    g_proj: LinearParams
    out: LinearParams
    norm: NormParams


@dataclass
class GabParams:
    mal: MalParams
    mlp: MlpParams
    norm: NormParams


@dataclass
class RhtbParams:
    fabs: list[FabParams]
    gab: GabParams
    conv: ConvParams


@dataclass
class ReconParams:
    pre: ConvParams
    stages: list[tuple[ConvParams, int]]  # (conv C -> r^2*C, shuffle factor r)
    out: ConvParams


class _Builder:
    def __init__(self, store: ParamStore, rng: np.random.Generator, dtype):
        self.store = store
        self.rng = rng
        self.dtype = dtype

    def _weight(self, name, shape, std=0.02):
        vals = np.clip(self.rng.standard_normal(shape), -2.0, 2.0) * std
        return self.store.add(name, Tensor(vals.astype(self.dtype)))

    def _zeros(self, name, shape):
        return self.store.add(name, Tensor(np.zeros(shape, dtype=self.dtype)))

    def _ones(self, name, shape):
        return self.store.add(name, Tensor(np.ones(shape, dtype=self.dtype)))

    def norm(self, prefix, c) -> NormParams:
        return NormParams(self._ones(f"{prefix}.g", (c,)), self._zeros(f"{prefix}.b", (c,)))

    def linear(self, prefix, din, dout) -> LinearParams:
        return LinearParams(self._weight(f"{prefix}.w", (din, dout)), self._zeros(f"{prefix}.b", (dout,)))

    def conv(self, prefix, cout, cin, k) -> ConvParams:
        return ConvParams(self._weight(f"{prefix}.w", (cout, cin, k, k)),
                          self._zeros(f"{prefix}.b", (cout,)))

    def attention(self, prefix, c, heads, extent) -> AttentionParams:
        q = self.linear(f"{prefix}.q", c, c)
        k = self.linear(f"{prefix}.k", c, c)
        v = self.linear(f"{prefix}.v", c, c)
        o = self.linear(f"{prefix}.out", c, c)
        a, b = extent
        rows = (2 * a - 1) * (2 * b - 1)
        table = BiasTable(self._weight(f"{prefix}.bias.table", (rows, heads)), extent, heads)
        return AttentionParams(q.w, q.b, k.w, k.b, v.w, v.b, o.w, o.b, heads, c // heads, table)


# ----------------------------------------------------------------------------
# feature taps
# ----------------------------------------------------------------------------

class Tap:
    """Collects named intermediate activations during one forward pass."""

    def __init__(self, wanted):
        self.wanted = set(wanted)
        self.got: dict[str, np.ndarray] = {}

    def want(self, key: str) -> bool:
        return key in self.wanted

    def put(self, key: str, value: Tensor) -> None:
        self.got[key] = np.array(value.data, dtype=np.float64, copy=True)


# ----------------------------------------------------------------------------
# block forwards (token layout N x H x W x C)
# ----------------------------------------------------------------------------

def fused_conv_forward(x: Tensor, p: FusedConvParams) -> Tensor:
    """Inverted-bottleneck convolution with squeeze-excitation and residual."""
    h = T.layer_norm(x, p.norm.g, p.norm.b, LN_EPS)
    h = T.conv2d_nhwc(h, p.expand.w, p.expand.b, stride=1, pad=1)
    h = T.gelu(h)
    s = T.mean_axes(h, (1, 2), keepdims=True)
    s = T.gelu(T.linear(s, p.se1.w, p.se1.b))
    s = T.sigmoid(T.linear(s, p.se2.w, p.se2.b))
    h = T.mul(h, s)
    h = T.conv2d_nhwc(h, p.project.w, p.project.b, stride=1, pad=0)
    return T.add(h, x)


def _mlp(x: Tensor, p: MlpParams) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p.fc1.w, p.fc1.b)), p.fc2.w, p.fc2.b)


def stl_forward(x: Tensor, p: StlParams, window: int, shifted: bool) -> Tensor:
    """Pre-norm window-attention layer: attention then MLP, both residual."""
    n, h, w, c = x.shape
    spec = WindowSpec(window, window // 2 if shifted else 0)
    mask = shift_mask(spec, h, w, x.dtype) if spec.shift else None
    a = T.layer_norm(x, p.norm1.g, p.norm1.b, LN_EPS)
    wins = window_partition(a, spec)
    wins = msa(wins, p.attn, mask, extent=(window, window))
    a = window_reverse(wins, spec, h, w)
    x = T.add(a, x)
    m = _mlp(T.layer_norm(x, p.norm2.g, p.norm2.b, LN_EPS), p.mlp)
    return T.add(m, x)


def fab_forward(x: Tensor, p: FabParams, window: int, tap: Tap | None = None, path: str = "") -> Tensor:
    """Fused convolution followed by a plain and a shifted window layer."""
    x = fused_conv_forward(x, p.fused)
    for i, stl in enumerate(p.stls):
        x = stl_forward(x, stl, window, shifted=(i % 2 == 1))
    if tap is not None and tap.want(f"{path}.out"):
        tap.put(f"{path}.out", x)
    return x


def mal_forward(x: Tensor, p: MalParams, window: int, k: int,
                legacy_scale: bool = False, tap: Tap | None = None, path: str = "") -> Tensor:
    """Mixed attention: parallel window / shifted-window / grid branches over
    channel splits, concatenated, projected, post-normalized, residual."""
    n, h, w, c = x.shape
    half, quarter = c // 2, c // 4
    f_g = T.slice_axis(x, 3, 0, half)
    f_w1 = T.slice_axis(x, 3, half, half + quarter)
    f_w2 = T.slice_axis(x, 3, half + quarter, c)

    spec0 = WindowSpec(window, 0)
    spec1 = WindowSpec(window, window // 2)
    w1 = window_reverse(msa(window_partition(f_w1, spec0), p.win1, extent=(window, window)), spec0, h, w)
    mask = shift_mask(spec1, h, w, x.dtype)
    w2 = window_reverse(msa(window_partition(f_w2, spec1), p.win2, mask, extent=(window, window)), spec1, h, w)

    gh, gw = h // k, w // k
    groups = T.reshape(grid_shuffle(f_g, k), (n * k * k, gh * gw, half))
    g_all = T.reshape(grid_shuffle(x, k), (n * k * k, gh * gw, c))
    g = T.linear(g_all, p.g_proj.w, p.g_proj.b)
    if tap is not None:
        if tap.want(f"{path}.grid.g"):
            tap.put(f"{path}.grid.g", g)
        if tap.want(f"{path}.grid.q"):
            tap.put(f"{path}.grid.q", T.linear(groups, p.grid.wq, p.grid.bq))
        if tap.want(f"{path}.grid.k"):
            tap.put(f"{path}.grid.k", T.linear(groups, p.grid.wk, p.grid.bk))
    xg = grid_msa(groups, g, p.grid, extent=(gh, gw), legacy_scale=legacy_scale)
    xg = grid_unshuffle(T.reshape(xg, (n * k * k, gh, gw, half)), k, h, w)

    cat = T.concat([w1, w2, xg], axis=3)
    y = T.linear(cat, p.out.w, p.out.b)
    y = T.layer_norm(y, p.norm.g, p.norm.b, LN_EPS)
    return T.add(y, x)


def gab_forward(x: Tensor, p: GabParams, window: int, k: int,
                legacy_scale: bool = False, tap: Tap | None = None, path: str = "") -> Tensor:
    """Mixed attention followed by a post-norm MLP, both residual."""
    fm = mal_forward(x, p.mal, window, k, legacy_scale, tap, path)
    y = _mlp(fm, p.mlp)
    y = T.layer_norm(y, p.norm.g, p.norm.b, LN_EPS)
    out = T.add(y, fm)
    if tap is not None and tap.want(f"{path}.out"):
        tap.put(f"{path}.out", out)
    return out


def rhtb_forward(x: Tensor, p: RhtbParams, cfg: HmaConfig,
                 tap: Tap | None = None, path: str = "") -> Tensor:
    """Residual group: the attention blocks, one grid block, one convolution."""
    h = x
    for j, fab in enumerate(p.fabs):
        h = fab_forward(h, fab, cfg.window, tap, f"{path}.fab.{j}")
    h = gab_forward(h, p.gab, cfg.window, cfg.grid_interval, cfg.legacy_grid_scale, tap, f"{path}.gab")
    h = T.conv2d_nhwc(h, p.conv.w, p.conv.b, stride=1, pad=1)
    out = T.add(h, x)
    if tap is not None and tap.want(f"{path}.out"):
        tap.put(f"{path}.out", out)
    return out


# ----------------------------------------------------------------------------
# the full model
# ----------------------------------------------------------------------------

def _recon_plan(scale: int) -> list[int]:
    return {2: [2], 3: [3], 4: [2, 2]}[scale]


class HmaModel:
    """A constructed network: config plus the parameter store and bundles."""

    def __init__(self, cfg: HmaConfig, params: ParamStore, shallow: ConvParams,
                 body: list[RhtbParams], body_conv: ConvParams, recon: ReconParams):
        self.cfg = cfg
        self.params = params
        self.shallow = shallow
        self.body = body
        self.body_conv = body_conv
        self.recon = recon

    @classmethod
    def init(cls, cfg: HmaConfig, seed: int = 0, dtype=np.float32) -> "HmaModel":
        cfg.validate()
        store = ParamStore()
        b = _Builder(store, np.random.default_rng(seed), dtype)
        c = cfg.channels
        shallow = b.conv("shallow", c, cfg.in_channels, 3)
        body = []
        for i in range(cfg.n_rhtb):
            base = f"body.{i}"
            fabs = []
            for j in range(cfg.n_fab):
                fp = f"{base}.fab.{j}"
                fused = FusedConvParams(
                    norm=b.norm(f"{fp}.fused.norm", c),
                    expand=b.conv(f"{fp}.fused.expand", c * cfg.expansion_rate, c, 3),
                    se1=b.linear(f"{fp}.fused.se1", c * cfg.expansion_rate,
                                 c * cfg.expansion_rate // cfg.shrink_rate),
                    se2=b.linear(f"{fp}.fused.se2", c * cfg.expansion_rate // cfg.shrink_rate,
                                 c * cfg.expansion_rate),
                    project=b.conv(f"{fp}.fused.project", c, c * cfg.expansion_rate, 1),
                )
                stls = []
                for s in range(2):
                    sp = f"{fp}.stl.{s}"
                    stls.append(StlParams(
                        norm1=b.norm(f"{sp}.norm1", c),
                        attn=b.attention(f"{sp}.attn", c, cfg.heads_fab, (cfg.window, cfg.window)),
                        norm2=b.norm(f"{sp}.norm2", c),
                        mlp=MlpParams(
                            fc1=b.linear(f"{sp}.mlp.fc1", c, c * cfg.mlp_ratio),
                            fc2=b.linear(f"{sp}.mlp.fc2", c * cfg.mlp_ratio, c),
                        ),
                    ))
                fabs.append(FabParams(fused=fused, stls=stls))
            gp = f"{base}.gab"
            mal = MalParams(
                win1=b.attention(f"{gp}.mal.win1", c // 4, cfg.heads_gab_win, (cfg.window, cfg.window)),
                win2=b.attention(f"{gp}.mal.win2", c // 4, cfg.heads_gab_win, (cfg.window, cfg.window)),
                grid=b.attention(f"{gp}.mal.grid", c // 2, cfg.heads_gab_grid,
                                 (cfg.grid_extent, cfg.grid_extent)),
                g_proj=b.linear(f"{gp}.mal.gproj", c, c // 2),
                out=b.linear(f"{gp}.mal.out", c, c),
                norm=b.norm(f"{gp}.mal.norm", c),
            )
            gab = GabParams(
                mal=mal,
                mlp=MlpParams(
                    fc1=b.linear(f"{gp}.mlp.fc1", c, c * cfg.mlp_ratio),
                    fc2=b.linear(f"{gp}.mlp.fc2", c * cfg.mlp_ratio, c),
                ),
                norm=b.norm(f"{gp}.norm", c),
            )
            body.append(RhtbParams(fabs=fabs, gab=gab, conv=b.conv(f"{base}.conv", c, c, 3)))
        body_conv = b.conv("body_conv", c, c, 3)
        stages = []
        for si, r in enumerate(_recon_plan(cfg.scale)):
            stages.append((b.conv(f"recon.up{si}", c * r * r, c, 3), r))
        recon = ReconParams(
            pre=b.conv("recon.pre", c, c, 3),
            stages=stages,
            out=b.conv("recon.out", cfg.in_channels, c, 3),
        )
        return cls(cfg, store, shallow, body, body_conv, recon)

    def forward(self, img: Tensor, tap: Tap | None = None) -> Tensor:
        return hma_forward(img, self, tap)

    def capture_paths(self) -> list[str]:
        paths = []
        for i in range(self.cfg.n_rhtb):
            for j in range(self.cfg.n_fab):
                paths.append(f"body.{i}.fab.{j}.out")
            for leaf in ("g", "q", "k"):
                paths.append(f"body.{i}.gab.grid.{leaf}")
            paths.append(f"body.{i}.gab.out")
            paths.append(f"body.{i}.out")
        return paths


def hma_forward(img: Tensor, model: HmaModel, tap: Tap | None = None) -> Tensor:
    """Upscale a batch of images (N, C_in, H, W) -> (N, C_in, sH, sW)."""
    cfg = model.cfg
    if img.ndim != 4 or img.shape[1] != cfg.in_channels:
        raise ShapeError(
            f"expected input (N, {cfg.in_channels}, H, W), got {img.shape}"
        )
    n, _, h, w = img.shape
    gran = cfg.pad_granularity
    if h % gran or w % gran:
        raise ShapeError(
            f"input {h}x{w} must be divisible by {gran} (window lcm grid); "
            f"pad to {math.ceil(h / gran) * gran}x{math.ceil(w / gran) * gran} "
            f"or use tiled inference"
        )
    if h // cfg.grid_interval > cfg.grid_extent or w // cfg.grid_interval > cfg.grid_extent:
        raise ShapeError(
            f"grid groups of {h // cfg.grid_interval}x{w // cfg.grid_interval} exceed the "
            f"bias-table extent {cfg.grid_extent}; use tiles of at most "
            f"{cfg.grid_extent * cfg.grid_interval} px"
        )
    x = T.transpose(img, (0, 2, 3, 1))
    f0 = T.conv2d_nhwc(x, model.shallow.w, model.shallow.b, stride=1, pad=1)
    h_feat = f0
    for i, rhtb in enumerate(model.body):
        h_feat = rhtb_forward(h_feat, rhtb, cfg, tap, f"body.{i}")
    h_feat = T.conv2d_nhwc(h_feat, model.body_conv.w, model.body_conv.b, stride=1, pad=1)
    h_feat = T.add(h_feat, f0)

    y = T.conv2d_nhwc(h_feat, model.recon.pre.w, model.recon.pre.b, stride=1, pad=1)
    for conv, r in model.recon.stages:
        y = T.conv2d_nhwc(y, conv.w, conv.b, stride=1, pad=1)
        y = T.pixel_shuffle_nhwc(y, r)
    y = T.conv2d_nhwc(y, model.recon.out.w, model.recon.out.b, stride=1, pad=1)
    return T.transpose(y, (0, 3, 1, 2))


# ----------------------------------------------------------------------------
# complexity accounting
# ----------------------------------------------------------------------------

def _p_norm(c):
    return 2 * c


def _p_linear(din, dout):
    return din * dout + dout


def _p_conv(cout, cin, k):
    return cout * cin * k * k + cout


def _p_attention(c, heads, extent):
    a, b = extent
    return 4 * _p_linear(c, c) + (2 * a - 1) * (2 * b - 1) * heads


def _m_conv(cout, cin, k, hw):
    return cout * cin * k * k * hw[0] * hw[1]


def _m_linear(din, dout, tokens):
    return tokens * din * dout


def _m_attention(c, groups, t):
    # qkv + out projections plus the two per-head token-by-token matmuls
    return 4 * _m_linear(c, c, groups * t) + 2 * groups * t * t * c


def complexity_breakdown(cfg: HmaConfig, input_hw: tuple[int, int] = (64, 64)) -> list[tuple[str, int, int]]:
    """Per-submodule (label, params, multiply_adds) rows for one input image."""
    cfg.validate()
    c = cfg.channels
    h, w = input_hw
    hw = h * w
    e = cfg.expansion_rate
    se_mid = c * e // cfg.shrink_rate
    n_fused = cfg.n_rhtb * cfg.n_fab
    n_stl = n_fused * 2

    win_groups, win_t = hw // cfg.window ** 2, cfg.window ** 2
    grid_groups, grid_t = cfg.grid_interval ** 2, hw // cfg.grid_interval ** 2

    rows = []
    rows.append(("shallow_conv", _p_conv(c, cfg.in_channels, 3), _m_conv(c, cfg.in_channels, 3, (h, w))))

    p_fused = (_p_norm(c) + _p_conv(c * e, c, 3) + _p_linear(c * e, se_mid)
               + _p_linear(se_mid, c * e) + _p_conv(c, c * e, 1))
    m_fused = (_m_conv(c * e, c, 3, (h, w)) + c * e * se_mid * 2 + _m_conv(c, c * e, 1, (h, w)))
    rows.append((f"fused_conv x{n_fused}", p_fused * n_fused, m_fused * n_fused))

    p_stl = (2 * _p_norm(c) + _p_attention(c, cfg.heads_fab, (cfg.window, cfg.window))
             + _p_linear(c, c * cfg.mlp_ratio) + _p_linear(c * cfg.mlp_ratio, c))
    m_stl = (_m_attention(c, win_groups, win_t)
             + _m_linear(c, c * cfg.mlp_ratio, hw) + _m_linear(c * cfg.mlp_ratio, c, hw))
    rows.append((f"window_layer x{n_stl}", p_stl * n_stl, m_stl * n_stl))

    cq, ch = c // 4, c // 2
    p_gwin = _p_attention(cq, cfg.heads_gab_win, (cfg.window, cfg.window))
    m_gwin = _m_attention(cq, win_groups, win_t)
    rows.append((f"gab_window_branch x{2 * cfg.n_rhtb}", p_gwin * 2 * cfg.n_rhtb, m_gwin * 2 * cfg.n_rhtb))

    p_grid = (_p_attention(ch, cfg.heads_gab_grid, (cfg.grid_extent, cfg.grid_extent))
              + _p_linear(c, ch))
    m_grid = (_m_attention(ch, grid_groups, grid_t) + _m_linear(c, ch, hw)
              + 2 * grid_groups * grid_t * grid_t * ch)  # second softmax stage matmul pair
    rows.append((f"gab_grid_branch x{cfg.n_rhtb}", p_grid * cfg.n_rhtb, m_grid * cfg.n_rhtb))

    p_gmix = (_p_linear(c, c) + _p_norm(c)
              + _p_linear(c, c * cfg.mlp_ratio) + _p_linear(c * cfg.mlp_ratio, c) + _p_norm(c))
    m_gmix = (_m_linear(c, c, hw)
              + _m_linear(c, c * cfg.mlp_ratio, hw) + _m_linear(c * cfg.mlp_ratio, c, hw))
    rows.append((f"gab_fuse_mlp x{cfg.n_rhtb}", p_gmix * cfg.n_rhtb, m_gmix * cfg.n_rhtb))

    rows.append((f"rhtb_conv x{cfg.n_rhtb}", _p_conv(c, c, 3) * cfg.n_rhtb,
                 _m_conv(c, c, 3, (h, w)) * cfg.n_rhtb))
    rows.append(("body_conv", _p_conv(c, c, 3), _m_conv(c, c, 3, (h, w))))

    p_recon = _p_conv(c, c, 3)
    m_recon = _m_conv(c, c, 3, (h, w))
    ch_, cw_ = h, w
    for r in _recon_plan(cfg.scale):
        p_recon += _p_conv(c * r * r, c, 3)
        m_recon += _m_conv(c * r * r, c, 3, (ch_, cw_))
        ch_, cw_ = ch_ * r, cw_ * r
    p_recon += _p_conv(cfg.in_channels, c, 3)
    m_recon += _m_conv(cfg.in_channels, c, 3, (ch_, cw_))
    rows.append(("reconstruction", p_recon, m_recon))
    return rows


def count_params_macs(cfg: HmaConfig, input_hw: tuple[int, int] = (64, 64)) -> tuple[int, int]:
    """Total (parameters, multiply-adds) for one image of the given size."""
    rows = complexity_breakdown(cfg, input_hw)
    return sum(r[1] for r in rows), sum(r[2] for r in rows)


# ----------------------------------------------------------------------------
# tiled inference
# ----------------------------------------------------------------------------

def _pad_to(arr: np.ndarray, th: int, tw: int) -> np.ndarray:
    # symmetric padding applied in slices so tiny images can reach any size
    while arr.shape[0] < th or arr.shape[1] < tw:
        ph = min(max(th - arr.shape[0], 0), arr.shape[0])
        pw = min(max(tw - arr.shape[1], 0), arr.shape[1])
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="symmetric")
    return arr


def _tile_starts(total: int, tile: int, step: int) -> list[int]:
    starts = list(range(0, max(total - tile, 0) + 1, step))
    if starts[-1] != total - tile:
        starts.append(total - tile)
    return starts


def tiled_inference(arr: np.ndarray, model: HmaModel, tile: int = 64, overlap: int = 8) -> np.ndarray:
    """Upscale an (H, W, C) float image of arbitrary size.

    The image is padded to the tile grid with symmetric reflection, each tile
    runs through the network, overlapping predictions are averaged, and the
    result is cropped to exactly (s*H, s*W, C).
    """
    cfg = model.cfg
    gran = cfg.pad_granularity
    if tile % gran:
        raise ShapeError(f"tile {tile} must be a multiple of {gran}")
    if tile // cfg.grid_interval > cfg.grid_extent:
        raise ShapeError(
            f"tile {tile} exceeds the supported {cfg.grid_extent * cfg.grid_interval} px "
            f"(grid bias-table extent)"
        )
    if not 0 <= overlap < tile:
        raise ShapeError(f"overlap must lie in [0, tile), got {overlap}")
    if arr.ndim != 3 or arr.shape[2] != cfg.in_channels:
        raise ShapeError(f"expected (H, W, {cfg.in_channels}) image, got {arr.shape}")
    h, w, _ = arr.shape
    s = cfg.scale
    padded = _pad_to(arr.astype(np.float32, copy=False), max(h, tile), max(w, tile))
    ph, pw, _ = padded.shape
    step = tile - overlap
    acc = np.zeros((ph * s, pw * s, cfg.in_channels), dtype=np.float64)
    weight = np.zeros((ph * s, pw * s, 1), dtype=np.float64)
    for ys in _tile_starts(ph, tile, step):
        for xs in _tile_starts(pw, tile, step):
            patch = padded[ys:ys + tile, xs:xs + tile]
            inp = Tensor(patch.transpose(2, 0, 1)[None])
            out = hma_forward(inp, model).data[0].transpose(1, 2, 0)
            acc[ys * s:(ys + tile) * s, xs * s:(xs + tile) * s] += out
            weight[ys * s:(ys + tile) * s, xs * s:(xs + tile) * s] += 1.0
    blended = (acc / weight)[: h * s, : w * s]
    return blended.astype(np.float32)
