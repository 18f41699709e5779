"""Greedy baselines: orthogonal matching pursuit and a 3-D block-structured
variant that picks a delay tap and then a Doppler-angle block per round."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .measurement import MeasurementModel


@dataclass(frozen=True)
class OmpConfig:
    """Greedy stopping rules and block extents.

    ``max_atoms`` is the atom budget; :func:`somp3d` stops adding blocks once
    it is reached, so its last block may overshoot by less than one block.
    ``residual_tol`` stops once ``||r|| <= tol * ||y||``.
    """

    max_atoms: int = 64
    residual_tol: float = 0.1
    block_dims: tuple[int, int, int] = (1, 3, 3)

    def __post_init__(self):
        if self.max_atoms < 1:
            raise ValueError("max_atoms must be >= 1")
        if self.residual_tol < 0:
            raise ValueError("residual_tol must be >= 0")
        if len(self.block_dims) != 3 or min(self.block_dims) < 1:
            raise ValueError("block_dims must be three positive extents")
        object.__setattr__(self, "block_dims", tuple(int(b) for b in self.block_dims))

    @classmethod
    def from_dict(cls, d: dict) -> "OmpConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class GreedyResult:
    estimate: np.ndarray  # flat coefficient vector
    support: np.ndarray
    residual_norms: list[float] = field(default_factory=list)
    status: str = "ok"


def _refit(model: MeasurementModel, support: list[int]):
    A = model.phi.columns(np.asarray(support, dtype=int))
    coef, *_ = np.linalg.lstsq(A, model.y, rcond=None)
    return coef, model.y - A @ coef


def omp(model: MeasurementModel, cfg: OmpConfig | None = None) -> GreedyResult:
    """Orthogonal matching pursuit on column-normalized correlations."""
    cfg = cfg or OmpConfig()
    y = model.y
    N = model.n_coefficients
    scale = 1.0 / np.sqrt(model.column_sq_norms)
    y_norm = np.linalg.norm(y)
    h = np.zeros(N, dtype=complex)
    residual = y.copy()
    norms = [float(y_norm)]
    support: list[int] = []
    if y_norm == 0:
        return GreedyResult(h, np.zeros(0, dtype=int), norms)
    coef = np.zeros(0, dtype=complex)
    while len(support) < cfg.max_atoms and norms[-1] > cfg.residual_tol * y_norm:
        corr = np.abs(model.phi.rmatvec(residual)) * scale
        corr[support] = -1.0
        support.append(int(np.argmax(corr)))
        coef, residual = _refit(model, support)
        norms.append(float(np.linalg.norm(residual)))
    h[support] = coef
    return GreedyResult(h, np.asarray(support, dtype=int), norms)


def _block_scores(energy: np.ndarray, bk: int, br: int) -> np.ndarray:
    """Sum of ``energy`` over every cyclic ``bk x br`` window anchored at (k, r)."""
    out = np.zeros_like(energy)
    for dk in range(bk):
        for dr in range(br):
            out += np.roll(energy, (-dk, -dr), axis=(-2, -1))
    return out


def somp3d(model: MeasurementModel, cfg: OmpConfig | None = None, grid_dims=None) -> GreedyResult:
    """Block-structured OMP over the delay-Doppler-angle grid.

    Each round picks the delay tap with the largest correlation energy, then
    the ``block_dims`` window (cyclic in Doppler and angle) with the largest
    energy starting at that tap, adds the whole block, and refits by least
    squares. The block extents must be supplied; they are not learned.
    Extents larger than one along delay span consecutive (cyclic) taps.
    """
    cfg = cfg or OmpConfig()
    if grid_dims is None:
        grid_dims = model.cfg.dda_shape
    nl, nk, nt = grid_dims
    bl, bk, br = cfg.block_dims
    if bl > nl or bk > nk or br > nt:
        raise ValueError(f"block_dims {cfg.block_dims} exceed grid {grid_dims}")
    y = model.y
    scale = 1.0 / np.sqrt(model.column_sq_norms)
    y_norm = np.linalg.norm(y)
    h = np.zeros(nl * nk * nt, dtype=complex)
    norms = [float(y_norm)]
    selected: list[int] = []
    if y_norm == 0:
        return GreedyResult(h, np.zeros(0, dtype=int), norms)
    residual = y.copy()
    coef = np.zeros(0, dtype=complex)
    while len(selected) < cfg.max_atoms and norms[-1] > cfg.residual_tol * y_norm:
        energy = (np.abs(model.phi.rmatvec(residual)) * scale) ** 2
        energy = energy.reshape(nt, nl, nk).transpose(1, 2, 0)  # (l, k, r)
        tap_energy = sum(np.roll(energy.sum(axis=(1, 2)), -d) for d in range(bl))
        l0 = int(np.argmax(tap_energy))
        taps = [(l0 + d) % nl for d in range(bl)]
        scores = _block_scores(energy[taps].sum(axis=0), bk, br)
        k0, r0 = np.unravel_index(int(np.argmax(scores)), scores.shape)
        new = []
        for l in taps:
            for dk in range(bk):
                for dr in range(br):
                    n = ((r0 + dr) % nt) * nl * nk + l * nk + (k0 + dk) % nk
                    if n not in selected and n not in new:
                        new.append(int(n))
        if not new:
            break
        selected.extend(new)
        coef, residual = _refit(model, selected)
        norms.append(float(np.linalg.norm(residual)))
    if selected:
        h[np.asarray(selected)] = coef
    return GreedyResult(h, np.asarray(sorted(selected), dtype=int), norms)
