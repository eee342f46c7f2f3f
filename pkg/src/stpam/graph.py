"""Electrode and slice-chain graphs, Laplacians and Chebyshev bases."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ElectrodeLayout:
    names: tuple[str, ...]
    positions: np.ndarray  # (C, 3) unit vectors

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape != (len(self.names), 3):
            raise LayoutError(f"expected {len(self.names)}x3 coordinates, got {pos.shape}")
        if len(set(self.names)) != len(self.names):
            raise LayoutError("channel names must be unique")
        norms = np.linalg.norm(pos, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise LayoutError("electrode coordinates must lie on the unit sphere")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise LayoutError(f"unknown channel {name!r}") from None

    def projected(self) -> np.ndarray:
        """Azimuthal-equidistant projection from the vertex; the equator maps to radius 1."""
        x, y, z = self.positions.T
        r = np.arccos(np.clip(z, -1.0, 1.0)) / (np.pi / 2)
        h = np.hypot(x, y)
        safe = np.where(h > 0, h, 1.0)
        return np.stack([np.where(h > 0, x / safe * r, 0.0), np.where(h > 0, y / safe * r, 0.0)], axis=1)

    def subset(self, names: Sequence[str]) -> "ElectrodeLayout":
        idx = [self.index(n) for n in names]
        return ElectrodeLayout(tuple(names), self.positions[idx])


def read_layout(path: Union[str, Path]) -> ElectrodeLayout:
    """Parse a ``name x y z`` text file ('#' starts a comment)."""
    names, coords = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise LayoutError(f"{path}:{lineno}: expected 'name x y z'")
        names.append(parts[0])
        try:
            coords.append([float(v) for v in parts[1:]])
        except ValueError:
            raise LayoutError(f"{path}:{lineno}: bad coordinate") from None
    return ElectrodeLayout(tuple(names), np.array(coords))


def write_layout(layout: ElectrodeLayout, path: Union[str, Path]) -> None:
    lines = ["# name x y z"]
    lines += [f"{n} {x:.9f} {y:.9f} {z:.9f}" for n, (x, y, z) in zip(layout.names, layout.positions)]
    Path(path).write_text("\n".join(lines) + "\n")


def biosemi64() -> ElectrodeLayout:
    with resources.as_file(resources.files("stpam") / "data" / "biosemi64.txt") as p:
        return read_layout(p)


# ---------------------------------------------------------------------------
# adjacency


def spatial_adjacency(
    layout: Union[ElectrodeLayout, np.ndarray],
    sigma_scale: float = 1.0,
    threshold: float = 0.1,
) -> np.ndarray:
    """Gaussian-kernel adjacency over electrode distances.

    sigma = sigma_scale * mean pairwise distance; weights below ``threshold``
    are dropped.
    """
    pos = layout.positions if isinstance(layout, ElectrodeLayout) else np.asarray(layout, float)
    n = len(pos)
    if n < 2:
        raise LayoutError("need at least two electrodes")
    if sigma_scale <= 0:
        raise ValueError("sigma_scale must be positive")
    if not 0 <= threshold < 1:
        raise ValueError("threshold must lie in [0, 1)")
    diff = pos[:, None, :] - pos[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    iu = np.triu_indices(n, 1)
    dist = np.sqrt(d2[iu])
    if np.any(dist < 1e-12):
        raise LayoutError("distinct channels share a position")
    sigma = sigma_scale * dist.mean()
    A = np.exp(-d2 / (2 * sigma**2))
    A[A < threshold] = 0.0
    np.fill_diagonal(A, 0.0)
    return A


def temporal_adjacency(m: int) -> np.ndarray:
    if m < 2:
        raise ValueError("a slice chain needs at least two nodes")
    A = np.zeros((m, m))
    i = np.arange(m - 1)
    A[i, i + 1] = A[i + 1, i] = 1.0
    return A


# ---------------------------------------------------------------------------
# Laplacians


def _check_symmetric(A: np.ndarray) -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12):
        raise ValueError("adjacency must be symmetric")
    if np.any(A < 0):
        raise ValueError("adjacency must be nonnegative")


def normalized_laplacian(A: np.ndarray) -> np.ndarray:
    """I - D^-1/2 A D^-1/2; isolated nodes keep a unit diagonal."""
    A = np.asarray(A, dtype=np.float64)
    _check_symmetric(A)
    deg = A.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return np.eye(len(A)) - inv_sqrt[:, None] * A * inv_sqrt[None, :]


def power_iteration_lambda_max(L: np.ndarray, tol: float = 1e-9, max_iter: int = 10_000) -> float:
    n = len(L)
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = L @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        new = float(v @ w)
        v = w / norm
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new
        lam = new
    return lam


def scaled_laplacian(L: np.ndarray, lambda_max: Optional[float] = None) -> np.ndarray:
    """(2 / lambda_max) L - I. ``lambda_max=None`` estimates it by power iteration."""
    if lambda_max is None:
        lambda_max = power_iteration_lambda_max(L)
    if lambda_max <= 0:
        # edgeless graph: spectrum is {1} for the isolated-node convention
        lambda_max = 2.0
    return (2.0 / lambda_max) * L - np.eye(len(L))


def chebyshev_basis(L_scaled: np.ndarray, K: int) -> list[np.ndarray]:
    if K < 0:
        raise ValueError("Chebyshev order must be nonnegative")
    n = len(L_scaled)
    basis = [np.eye(n)]
    if K >= 1:
        basis.append(np.array(L_scaled, dtype=np.float64))
    for _ in range(2, K + 1):
        basis.append(2.0 * L_scaled @ basis[-1] - basis[-2])
    return basis


@dataclass(frozen=True)
class GraphSpec:
    adjacency: np.ndarray
    laplacian: np.ndarray
    scaled: np.ndarray
    lambda_max: float
    order: int
    basis: tuple[np.ndarray, ...]

    @property
    def n(self) -> int:
        return len(self.adjacency)

    @classmethod
    def build(cls, A: np.ndarray, order: int, lambda_max: Optional[float] = None) -> "GraphSpec":
        L = normalized_laplacian(A)
        lam = power_iteration_lambda_max(L) if lambda_max is None else float(lambda_max)
        Ls = scaled_laplacian(L, lam)
        basis = chebyshev_basis(Ls, order)
        arrays = [np.array(A, dtype=np.float64), L, Ls, *basis]
        for arr in arrays:
            arr.setflags(write=False)
        return cls(arrays[0], L, Ls, lam, order, tuple(basis))
