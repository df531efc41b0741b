"""Linear centered kernel alignment between layer activations, plus the
capture machinery that pulls named intermediate features out of a forward
pass and a CSV report for layer-by-layer similarity grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .image_io import write_atomic
from .model import HmaModel, Tap, hma_forward
from .tensor import Tensor


def as_feature_matrix(arr: np.ndarray) -> np.ndarray:
    """Flatten captured activations into (samples, features) float64 rows."""
    if arr.ndim < 2:
        raise ShapeError(f"feature capture needs at least 2 dims, got shape {arr.shape}")
    mat = arr.reshape(-1, arr.shape[-1]).astype(np.float64)
    if mat.shape[0] < 2:
        raise ShapeError(f"feature matrix needs at least 2 rows, got {mat.shape[0]}")
    if not np.all(np.isfinite(mat)):
        raise ShapeError("feature matrix contains non-finite values")
    return mat


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered matrices.

    Returns 0 when either argument has (numerically) constant features.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"linear_cka needs 2-D matrices, got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"linear_cka row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ShapeError("linear_cka needs at least 2 rows")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cross = np.linalg.norm(yc.T @ xc) ** 2
    nx = np.linalg.norm(xc.T @ xc)
    ny = np.linalg.norm(yc.T @ yc)
    denom = nx * ny
    if denom <= 0.0 or not np.isfinite(denom):
        return 0.0
    return float(cross / denom)


def capture_features(model: HmaModel, probe: np.ndarray,
                     selectors: list[str]) -> dict[str, np.ndarray]:
    """Run one forward pass, returning {selector: (tokens, channels) matrix}.

    `probe` is a (N, C_in, H, W) float batch. Unknown selectors are rejected
    with the list of available layer paths.
    """
    available = model.capture_paths()
    unknown = [s for s in selectors if s not in available]
    if unknown:
        raise ShapeError(
            f"unknown capture selectors {unknown}; available: {', '.join(available)}"
        )
    tap = Tap(selectors)
    hma_forward(Tensor(np.asarray(probe, dtype=np.float32)), model, tap)
    return {key: as_feature_matrix(val) for key, val in tap.got.items()}


@dataclass
class CkaReport:
    """Layer-by-layer similarity grid; values lie in [0, 1]."""

    row_labels: list[str]
    col_labels: list[str]
    values: np.ndarray

    def to_csv(self) -> str:
        lines = ["," + ",".join(self.col_labels)]
        for label, row in zip(self.row_labels, self.values):
            lines.append(label + "," + ",".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        write_atomic(path, self.to_csv().encode("utf-8"))


def cka_grid(feats_a: dict[str, np.ndarray], feats_b: dict[str, np.ndarray],
             rows: list[str], cols: list[str]) -> CkaReport:
    values = np.zeros((len(rows), len(cols)))
    for i, ra in enumerate(rows):
        for j, cb in enumerate(cols):
            values[i, j] = linear_cka(feats_a[ra], feats_b[cb])
    return CkaReport(rows, cols, values)
