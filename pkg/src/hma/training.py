"""Loss, optimizer, learning-rate schedule, checkpoint serialization, the
training loop, and cross-scale parameter transfer.
"""

from __future__ import annotations

import io
import math
import struct
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ShapeError, TrainingDivergedError
from .image_io import write_atomic
from .imaging import ImageF32, augment, psnr_y
from .model import HmaConfig, HmaModel, hma_forward
from .tensor import Tape, Tensor, backward

CKPT_MAGIC = b"HMA1"
CKPT_VERSION = 1


# ----------------------------------------------------------------------------
# loss and optimizer
# ----------------------------------------------------------------------------

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    return T.mean_all(T.abs_(T.sub(pred, target)))


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(store, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter in the store."""
    missing = [name for name, p in store.items() if p.grad is None]
    if missing:
        raise ShapeError(f"adam_step: {len(missing)} parameters have no gradient, e.g. {missing[0]!r}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in store.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainConfig:
    total_iters: int
    batch: int
    lr0: float
    milestones: list[int]
    patch_lr: int = 64
    seed: int = 0
    augment: bool = True

    def validate(self) -> "TrainConfig":
        if self.total_iters < 1 or self.batch < 1 or self.lr0 <= 0 or self.patch_lr < 1:
            raise ConfigError("total_iters, batch, patch_lr must be >= 1 and lr0 > 0")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.total_iters for m in ms) \
                or any(m < 0 for m in ms):
            raise ConfigError(f"milestones must be strictly increasing and < total_iters, got {ms}")
        return self


PRESETS = {
    "pretrain": TrainConfig(800_000, 32, 2e-4, [300_000, 500_000, 650_000, 700_000, 750_000]),
    "finetune": TrainConfig(250_000, 32, 5e-6, [125_000, 200_000, 230_000, 240_000]),
    # overfits a handful of fixed patches, so augmentation stays off
    "toy": TrainConfig(2_000, 1, 2e-4, [1_500], augment=False),
}


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """lr0 halved once per milestone <= iteration."""
    if not 0 <= iteration < cfg.total_iters:
        raise ConfigError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    return cfg.lr0 * 0.5 ** bisect_right(cfg.milestones, iteration)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def _write_entry(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"parameter name too long: {name[:40]}...")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(struct.pack("<B", 0))  # dtype 0 = f32
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what} at offset {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what): return struct.unpack("<B", self.take(1, what))[0]
    def u16(self, what): return struct.unpack("<H", self.take(2, what))[0]
    def u32(self, what): return struct.unpack("<I", self.take(4, what))[0]
    def u64(self, what): return struct.unpack("<Q", self.take(8, what))[0]


def _read_entry(r: _Reader) -> tuple[str, np.ndarray]:
    nlen = r.u16("name length")
    name = r.take(nlen, "parameter name").decode("utf-8", errors="replace")
    rank = r.u8(f"rank of {name!r}")
    dims = tuple(r.u32(f"dim {i} of {name!r}") for i in range(rank))
    dtype = r.u8(f"dtype of {name!r}")
    if dtype != 0:
        raise CheckpointError(f"parameter {name!r}: unknown dtype code {dtype}")
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if count < 0 or count > (1 << 33):
        raise CheckpointError(f"parameter {name!r}: implausible element count {count}")
    payload = r.take(4 * count, f"payload of {name!r}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return name, arr


@dataclass
class Checkpoint:
    config: HmaConfig
    params: dict[str, np.ndarray]
    adam: AdamState | None
    iteration: int


def checkpoint_bytes(model: HmaModel, state: AdamState | None = None, iteration: int = 0) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg_blob = model.cfg.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_blob)))
    buf.write(cfg_blob)
    names = model.params.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        t = model.params[name]
        if t.data.dtype != np.float32:
            raise CheckpointError(f"checkpoints hold f32 parameters, {name!r} is {t.data.dtype}")
        _write_entry(buf, name, t.data)
    if state is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", state.t))
        buf.write(struct.pack("<I", 2 * len(state.m)))
        for prefix, table in (("m", state.m), ("v", state.v)):
            for name, arr in table.items():
                _write_entry(buf, f"{prefix}.{name}", arr.astype(np.float32, copy=False))
    buf.write(struct.pack("<Q", iteration))
    return buf.getvalue()


def checkpoint_save(path: str, model: HmaModel, state: AdamState | None = None,
                    iteration: int = 0) -> None:
    write_atomic(path, checkpoint_bytes(model, state, iteration))


def checkpoint_load_bytes(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = r.u32("format version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_len = r.u32("config length")
    cfg = HmaConfig.from_json(r.take(cfg_len, "config blob").decode("utf-8"))
    n = r.u32("parameter count")
    params: dict[str, np.ndarray] = {}
    for _ in range(n):
        name, arr = _read_entry(r)
        if name in params:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        params[name] = arr
    adam = None
    if r.u8("optimizer flag") == 1:
        adam = AdamState(t=r.u64("optimizer step"))
        n_opt = r.u32("optimizer entry count")
        for _ in range(n_opt):
            name, arr = _read_entry(r)
            kind, _, pname = name.partition(".")
            table = adam.m if kind == "m" else adam.v if kind == "v" else None
            if table is None:
                raise CheckpointError(f"unknown optimizer entry {name!r}")
            if pname in table:
                raise CheckpointError(f"duplicate optimizer entry {name!r}")
            table[pname] = arr
    iteration = r.u64("iteration counter")
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after iteration counter")
    return Checkpoint(cfg, params, adam, iteration)


def checkpoint_load(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    return checkpoint_load_bytes(blob)


def model_from_checkpoint(ckpt: Checkpoint) -> HmaModel:
    model = HmaModel.init(ckpt.config, seed=0)
    want = set(model.params.names())
    have = set(ckpt.params)
    if want != have:
        missing = sorted(want - have)[:3]
        extra = sorted(have - want)[:3]
        raise CheckpointError(f"checkpoint parameter set mismatch; missing {missing}, extra {extra}")
    for name, arr in ckpt.params.items():
        t = model.params[name]
        if t.shape != arr.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, model expects {t.shape}")
        t.data = arr.copy()
    return model


# ----------------------------------------------------------------------------
# transfer
# ----------------------------------------------------------------------------

@dataclass
class TransferReport:
    copied: list[str]
    reinitialized: list[str]

    @property
    def n_copied(self) -> int:
        return len(self.copied)

    @property
    def n_reinitialized(self) -> int:
        return len(self.reinitialized)

    def summary(self) -> str:
        lines = [f"transfer: {self.n_copied} tensors copied, {self.n_reinitialized} reinitialized"]
        for name in self.reinitialized:
            lines.append(f"  reinitialized {name}")
        return "\n".join(lines)


def transfer_parameters(src: Checkpoint, dst_cfg: HmaConfig, seed: int = 0) -> tuple[HmaModel, TransferReport]:
    """Seed a fresh model from a checkpoint: copy every parameter whose name
    and shape match; everything else keeps its fresh initialization."""
    model = HmaModel.init(dst_cfg, seed=seed)
    copied, reinit = [], []
    for name, t in model.params.items():
        srcarr = src.params.get(name)
        if srcarr is not None and srcarr.shape == t.shape:
            t.data = srcarr.astype(t.data.dtype).copy()
            copied.append(name)
        else:
            reinit.append(name)
    return model, TransferReport(copied, reinit)


# ----------------------------------------------------------------------------
# datasets and the loop
# ----------------------------------------------------------------------------

class PatchDataset:
    """Aligned (LR, HR) patch pairs held in memory as float32 arrays."""

    def __init__(self, pairs: list[tuple[ImageF32, ImageF32]]):
        if not pairs:
            raise ShapeError("dataset is empty")
        self.pairs = pairs

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> tuple[ImageF32, ImageF32]:
        return self.pairs[i]


def make_texture_image(size: int, seed: int, channels: int = 3) -> ImageF32:
    """Smooth band-limited synthetic texture: few low-frequency sinusoids per
    channel over a gentle gradient, normalized into [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, channels))
    for c in range(channels):
        plane = 0.3 * (xx * rng.uniform(-1, 1) + yy * rng.uniform(-1, 1))
        for _ in range(3):
            fx, fy = rng.uniform(0.25, 1.1, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.1, 0.3)
            plane = plane + amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        lo, hi = plane.min(), plane.max()
        img[..., c] = 0.1 + 0.8 * (plane - lo) / max(hi - lo, 1e-9)
    return ImageF32(img.astype(np.float32))


def builtin_toy_dataset(scale: int = 2, patch_lr: int = 64, count: int = 4,
                        seed: int = 7) -> PatchDataset:
    """The bundled fixed patch set used by the smoke-training run."""
    from .imaging import bicubic_resize

    pairs = []
    for i in range(count):
        hr = make_texture_image(patch_lr * scale, seed + i)
        lr = bicubic_resize(hr, patch_lr, patch_lr, antialias=True)
        pairs.append((lr, hr))
    return PatchDataset(pairs)


@dataclass
class TrainResult:
    trace: list[tuple[int, float]]
    state: AdamState
    iterations: int


def train_loop(model: HmaModel, dataset: PatchDataset, cfg: TrainConfig, *,
               state: AdamState | None = None, log_every: int = 100,
               on_log=None, should_stop=None, on_milestone=None) -> TrainResult:
    """Seeded sampling, augmentation, forward, L1, backward, Adam; the whole
    sampling order is drawn from one generator so runs are reproducible.

    `should_stop(iteration)` is polled every `log_every` iterations and may
    end the run early (used by target-driven smoke training);
    `on_milestone(iteration)` fires when a learning-rate milestone is reached
    so callers can checkpoint there.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    state = state or AdamState()
    trace: list[tuple[int, float]] = []
    milestones = set(cfg.milestones)
    n = len(dataset)
    done = 0
    for it in range(cfg.total_iters):
        idx = rng.integers(0, n, size=cfg.batch)
        if cfg.augment:
            flips = rng.integers(0, 2, size=cfg.batch)
            rots = rng.integers(0, 4, size=cfg.batch)
        lr_imgs, hr_imgs = [], []
        for bi, di in enumerate(idx):
            pair = dataset[int(di)]
            if cfg.augment:
                pair = augment(pair, bool(flips[bi]), int(rots[bi]))
            lr_imgs.append(pair[0].data.transpose(2, 0, 1))
            hr_imgs.append(pair[1].data.transpose(2, 0, 1))
        lr_batch = Tensor(np.stack(lr_imgs))
        hr_batch = Tensor(np.stack(hr_imgs))
        with Tape() as tape:
            pred = hma_forward(lr_batch, model)
            loss = l1_loss(pred, hr_batch)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(f"non-finite loss {loss_val} at iteration {it}")
            model.params.zero_grads()
            backward(tape, loss)
        adam_step(model.params, state, lr_at(it, cfg))
        trace.append((it, loss_val))
        done = it + 1
        if on_log is not None and (it % log_every == 0 or it == cfg.total_iters - 1):
            on_log(it, loss_val)
        if on_milestone is not None and done in milestones:
            on_milestone(done)
        if should_stop is not None and done % log_every == 0 and should_stop(done):
            break
    return TrainResult(trace, state, done)


def dataset_psnr(model: HmaModel, dataset: PatchDataset, tile: int | None = None) -> float:
    """Mean luma PSNR of the model's predictions over a dataset, crop = scale."""
    from .model import tiled_inference

    scale = model.cfg.scale
    vals = []
    for lr, hr in dataset.pairs:
        if tile is None:
            inp = Tensor(lr.data.transpose(2, 0, 1)[None])
            out = hma_forward(inp, model).data[0].transpose(1, 2, 0)
        else:
            out = tiled_inference(lr.data, model, tile=tile)
        pred = ImageF32(np.clip(out, 0.0, 1.0))
        vals.append(psnr_y(pred, hr, crop=scale))
    finite = [v for v in vals if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def trace_csv(trace: list[tuple[int, float]]) -> str:
    lines = ["iteration,loss"]
    for it, val in trace:
        lines.append(f"{it},{val:.8f}")
    return "\n".join(lines) + "\n"
