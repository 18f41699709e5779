"""Pilot placement, the DDA sensing operator, and observation generation.

The received delay-Doppler grid, flattened row-major (``m = l * N_k + k_idx``),
is modelled as ``y = Phi h + w`` where ``h`` is the flattened DDA channel and

    Phi[(l, k), (lc, kc, r)] = exp(j 2 pi l kc / (N_k (N_l + N_cp)))
                               * sum_q exp(j 2 pi q r / N_T) x_q[l - lc, k - kc]

with cyclic delay/Doppler index arithmetic. Columns come in angle blocks, block
``r`` being the phase mask times a 2-D cyclic convolution matrix of the
angle-combined pilot grid.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .channel import PathSet, apply_channel, complex_noise
from .otfs import OtfsConfig, otfs_demodulate, otfs_modulate, to_fft_order, to_natural_order

DEFAULT_DENSE_BUDGET = 1 << 24
_MAGIC = b"DDAM"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PilotPattern:
    """Pilot positions and per-antenna symbols.

    ``positions`` is an ``(n_pilots, 2)`` int array of ``(l, k)`` with signed
    ``k``; ``symbols`` is ``(n_tx, n_pilots)``.
    """

    positions: np.ndarray
    symbols: np.ndarray
    overhead: float

    def grids(self, cfg: OtfsConfig) -> np.ndarray:
        """Per-antenna DD pilot grids, shape ``(n_tx, n_delay, n_doppler)``."""
        x = np.zeros((cfg.n_tx,) + cfg.grid_shape, dtype=complex)
        l = self.positions[:, 0]
        k = self.positions[:, 1] + cfg.n_doppler // 2
        x[:, l, k] = self.symbols
        return x

    @property
    def n_pilots(self) -> int:
        return len(self.positions)


def qpsk(rng: np.random.Generator, shape) -> np.ndarray:
    bits = rng.integers(0, 2, size=tuple(shape) + (2,))
    return ((1 - 2 * bits[..., 0]) + 1j * (1 - 2 * bits[..., 1])) / math.sqrt(2)


def make_pilot_pattern(cfg: OtfsConfig, overhead: float, seed: int) -> PilotPattern:
    """Place ``ceil(overhead * N_l * N_k)`` pilots as a centered contiguous block.

    The block is as close to the grid's aspect ratio as possible and is filled
    in raster order, so the last delay row may be partial. Symbols are
    independent unit-modulus QPSK per antenna.
    """
    if not 0 < overhead <= 1:
        raise ValueError("overhead must lie in (0, 1]")
    total = cfg.n_delay * cfg.n_doppler
    n = min(total, math.ceil(overhead * total - 1e-9))
    width = min(cfg.n_doppler, max(1, math.ceil(math.sqrt(n * cfg.n_doppler / cfg.n_delay))))
    height = math.ceil(n / width)
    if height > cfg.n_delay:
        height = cfg.n_delay
        width = math.ceil(n / height)
    l0 = (cfg.n_delay - height) // 2
    k0 = -(width // 2)
    idx = np.arange(n)
    positions = np.stack([l0 + idx // width, k0 + idx % width], axis=1)
    rng = np.random.default_rng(seed)
    symbols = qpsk(rng, (cfg.n_tx, n))
    return PilotPattern(positions, symbols, n / total)


class DdaOperator:
    """Matrix-free sensing operator ``Phi`` for one pilot pattern.

    Matvecs run in ``O(N_l N_k^2 N_T)`` via delay-axis FFTs; the squared-modulus
    operator ``|Phi|^2`` is a pure 2-D cyclic convolution per angle block.
    """

    def __init__(self, pilots: PilotPattern, cfg: OtfsConfig, dense_budget: int = DEFAULT_DENSE_BUDGET):
        self.cfg = cfg
        self.pilots = pilots
        self.dense_budget = dense_budget
        nl, nk, nt = cfg.dda_shape
        self.shape = (nl * nk, nl * nk * nt)

        q = np.arange(nt)
        r = cfg.angle_indices()
        steer = np.exp(2j * np.pi * np.outer(q, r) / nt)  # (q, r)
        x = to_fft_order(pilots.grids(cfg), axis=-1)  # (q, l, k)
        self._p = np.einsum("qlk,qr->lkr", x, steer)  # combined pilot, (l, k_fft, r)
        block_norms = np.sum(np.abs(self._p) ** 2, axis=(0, 1))
        if np.any(block_norms <= 1e-12 * max(block_norms.max(), 1.0)):
            raise ValueError("pilot pattern leaves some angle bins unobserved (all-zero columns)")
        self._col_sq = np.repeat(block_norms, nl * nk)
        self._pf = np.fft.fft(self._p, axis=0)
        self._pf_h = np.conj(self._pf).transpose(0, 2, 1)  # (f, r, k)
        self._abs2_f = np.fft.fft2(np.abs(self._p) ** 2, axes=(0, 1))

        kc = np.fft.fftfreq(nk, 1.0 / nk)  # signed Doppler of each fft-order index
        l = np.arange(nl)
        self._phase = np.exp(2j * np.pi * np.outer(l, kc) / (nk * (nl + cfg.n_cp)))  # (l, kc)
        kk = np.arange(nk)
        self._shift_fwd = (kk[:, None] - kk[None, :]) % nk  # [k, kc] -> k - kc
        self._shift_adj = (kk[:, None] + kk[None, :]) % nk  # [k', kc] -> k' + kc
        self._kc_grid = np.broadcast_to(kk[None, :], (nk, nk))

    @property
    def column_sq_norms(self) -> np.ndarray:
        return self._col_sq

    # layout helpers: vectors <-> (l, k_fft, r) arrays
    def _vec_to_lkr(self, h):
        nl, nk, nt = self.cfg.dda_shape
        t = np.asarray(h).reshape(nt, nl, nk).transpose(1, 2, 0)
        return to_fft_order(t, axis=1)

    def _lkr_to_vec(self, t):
        return to_natural_order(t, axis=1).transpose(2, 0, 1).reshape(-1)

    def _grid_to_fft(self, y):
        nl, nk = self.cfg.grid_shape
        return to_fft_order(np.asarray(y).reshape(nl, nk), axis=1)

    def _fft_to_vec(self, g):
        return to_natural_order(g, axis=1).reshape(-1)

    def matvec(self, h: np.ndarray) -> np.ndarray:
        hf = np.fft.fft(self._vec_to_lkr(h), axis=0)  # (f, kc, r)
        w = np.fft.ifft(np.matmul(self._pf, hf.transpose(0, 2, 1)), axis=0)  # (l, k', kc)
        shifted = w[:, self._shift_fwd, self._kc_grid]  # (l, k, kc)
        y = np.einsum("lkc,lc->lk", shifted, self._phase)
        return self._fft_to_vec(y)

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        g = self._grid_to_fft(y)
        u = g[:, self._shift_adj] * np.conj(self._phase)[:, None, :]  # (l, k', kc)
        uf = np.fft.fft(u, axis=0)
        out = np.fft.ifft(np.matmul(self._pf_h, uf), axis=0)  # (l, r, kc)
        return self._lkr_to_vec(out.transpose(0, 2, 1))

    def abs2_matvec(self, v: np.ndarray) -> np.ndarray:
        """``|Phi|^2 v`` for a real vector ``v``."""
        vf = np.fft.fft2(self._vec_to_lkr(v), axes=(0, 1))
        out = np.fft.ifft2(np.sum(self._abs2_f * vf, axis=2), axes=(0, 1)).real
        return self._fft_to_vec(out)

    def abs2_rmatvec(self, u: np.ndarray) -> np.ndarray:
        """``|Phi|^T u`` for a real vector ``u``."""
        uf = np.fft.fft2(self._grid_to_fft(u), axes=(0, 1))
        out = np.fft.ifft2(np.conj(self._abs2_f) * uf[:, :, None], axes=(0, 1)).real
        return self._lkr_to_vec(out)

    def columns(self, idx) -> np.ndarray:
        """Dense ``(M, len(idx))`` submatrix of the selected columns."""
        cfg = self.cfg
        nl, nk, nt = cfg.dda_shape
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        r_idx, rem = np.divmod(idx, nl * nk)
        lc, kc_nat = np.divmod(rem, nk)
        kc_fft = (kc_nat - nk // 2) % nk
        l = np.arange(nl)[:, None, None]
        k_fft = ((np.arange(nk) - nk // 2) % nk)[None, :, None]  # natural row order
        src_l = (l - lc[None, None, :]) % nl
        src_k = (k_fft - kc_fft[None, None, :]) % nk
        vals = self._p[src_l, src_k, r_idx[None, None, :]] * self._phase[l, kc_fft[None, None, :]]
        return vals.reshape(nl * nk, len(idx))

    def to_dense(self) -> np.ndarray:
        m, n = self.shape
        if m * n > self.dense_budget:
            raise MemoryError(f"dense operator needs {m * n} elements, budget is {self.dense_budget}")
        return self.columns(np.arange(n))


class DenseOperator:
    """Explicit-matrix operator with the same interface as :class:`DdaOperator`."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix)
        self.shape = self.matrix.shape
        self._abs2 = np.abs(self.matrix) ** 2
        self._col_sq = self._abs2.sum(axis=0)
        if np.any(self._col_sq == 0):
            raise ValueError("operator has all-zero columns")

    @property
    def column_sq_norms(self) -> np.ndarray:
        return self._col_sq

    def matvec(self, h):
        return self.matrix @ h

    def rmatvec(self, y):
        return self.matrix.conj().T @ y

    def abs2_matvec(self, v):
        return self._abs2 @ v

    def abs2_rmatvec(self, u):
        return self._abs2.T @ u

    def columns(self, idx):
        return self.matrix[:, np.atleast_1d(idx)]

    def to_dense(self):
        return self.matrix


def effective_dd_matrix(h_dda: np.ndarray, weights: np.ndarray, cfg: OtfsConfig) -> np.ndarray:
    """DD-domain channel matrix seen by one precoded data stream.

    Antenna ``q`` sends ``weights[q] * X``; the received grid is ``H @ vec(X)``
    with the same model as :class:`DdaOperator`, i.e. a phase-masked 2-D
    cyclic convolution with ``g[l, k] = sum_r h[l, k, r] W_r``, where
    ``W_r = sum_q weights[q] exp(j 2 pi q r / N_T)``. Rows and columns follow
    the flattened DD grid (signed ``k`` in natural order).
    """
    nl, nk, nt = cfg.dda_shape
    h_dda = np.asarray(h_dda)
    if h_dda.shape != (nl, nk, nt):
        raise ValueError(f"channel shape {h_dda.shape} != {(nl, nk, nt)}")
    steer = np.exp(2j * np.pi * np.outer(np.arange(nt), cfg.angle_indices()) / nt)
    g = h_dda @ (np.asarray(weights) @ steer)  # (l, k natural)
    l = np.repeat(np.arange(nl), nk)
    k = np.tile(np.arange(nk), nl)
    lc = (l[:, None] - l[None, :]) % nl
    kc = (k[:, None] - k[None, :] + nk // 2) % nk - nk // 2  # signed channel Doppler
    phase = np.exp(2j * np.pi * l[:, None] * kc / (nk * (nl + cfg.n_cp)))
    return g[lc, kc + nk // 2] * phase


def effective_tf_blocks(h_dda: np.ndarray, weights: np.ndarray, cfg: OtfsConfig) -> np.ndarray:
    """Time-frequency form of :func:`effective_dd_matrix`, one block per symbol.

    A channel Doppler shift ``kc`` multiplies symbol ``n`` by
    ``exp(j 2 pi n kc / N_k)``, so ``U H U^H`` (``U`` the ISFFT) is block
    diagonal with ``B_n = sum_kc exp(j 2 pi n kc / N_k) F diag(p_kc) C(g_kc) F^H``,
    where ``C(g_kc)`` is the cyclic delay convolution and ``p_kc`` the phase
    mask. Returns shape ``(N_k, N_l, N_l)``.
    """
    nl, nk, nt = cfg.dda_shape
    steer = np.exp(2j * np.pi * np.outer(np.arange(nt), cfg.angle_indices()) / nt)
    g = np.asarray(h_dda) @ (np.asarray(weights) @ steer)  # (l, k natural)
    kc = cfg.doppler_indices()
    l = np.arange(nl)
    F = np.fft.fft(np.eye(nl), norm="ortho")
    circ = g[(l[:, None] - l[None, :]) % nl]  # (l, l', kc)
    phase = np.exp(2j * np.pi * np.outer(l, kc) / (nk * (nl + cfg.n_cp)))  # (l, kc)
    Q = F @ (phase.T[:, :, None] * np.moveaxis(circ, -1, 0)) @ F.conj().T  # (kc, m, m')
    doppler = np.exp(2j * np.pi * np.outer(np.arange(nk), kc) / nk)  # (n, kc)
    return np.tensordot(doppler, Q, axes=(1, 0))


def build_operator(pilots: PilotPattern, cfg: OtfsConfig, dense_budget: int = DEFAULT_DENSE_BUDGET) -> DdaOperator:
    return DdaOperator(pilots, cfg, dense_budget)


@dataclass
class MeasurementModel:
    """Observation ``y`` with its sensing operator.

    ``noise_var`` is the true noise variance; estimators must not read it.
    """

    y: np.ndarray
    phi: DdaOperator | DenseOperator
    noise_var: float
    cfg: OtfsConfig | None = None
    pilots: PilotPattern | None = None
    snr_db: float = math.inf
    meta: dict = field(default_factory=dict)

    @property
    def column_sq_norms(self) -> np.ndarray:
        return self.phi.column_sq_norms

    @property
    def n_measurements(self) -> int:
        return self.phi.shape[0]

    @property
    def n_coefficients(self) -> int:
        return self.phi.shape[1]


def observe(
    paths: PathSet,
    pilots: PilotPattern,
    cfg: OtfsConfig,
    snr_db: float,
    seed: int | np.random.Generator,
    operator: DdaOperator | None = None,
) -> MeasurementModel:
    """Generate the received pilot grid through the physical signal chain.

    Pilot grids are OTFS-modulated per antenna, passed through
    :func:`apply_channel`, and demodulated. Noise is added in the time domain
    with variance chosen so the DD-domain SNR equals ``snr_db`` (``inf`` gives
    a noiseless observation).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = otfs_modulate(pilots.grids(cfg), cfg)
    r_clean = apply_channel(s, paths, cfg)
    y_clean = otfs_demodulate(r_clean, cfg)
    power = float(np.mean(np.abs(y_clean) ** 2))
    noise_var = 0.0 if math.isinf(snr_db) and snr_db > 0 else power / 10 ** (snr_db / 10)
    if noise_var > 0:
        y = otfs_demodulate(r_clean + complex_noise(rng, r_clean.shape, noise_var), cfg)
    else:
        y = y_clean
    phi = operator if operator is not None else build_operator(pilots, cfg)
    return MeasurementModel(y.reshape(-1), phi, noise_var, cfg, pilots, snr_db)


def _complex_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.complex128)
    inter = np.empty(a.shape + (2,), dtype="<f8")
    inter[..., 0] = a.real
    inter[..., 1] = a.imag
    return inter.tobytes()


def _complex_from(buf: bytes, shape) -> np.ndarray:
    inter = np.frombuffer(buf, dtype="<f8").reshape(tuple(shape) + (2,))
    return inter[..., 0] + 1j * inter[..., 1]


def save_measurement(model: MeasurementModel, fh) -> None:
    """Write ``model`` as ``DDAM`` magic, a length-prefixed JSON header, and
    little-endian interleaved re/im float64 payloads."""
    if model.cfg is None or model.pilots is None:
        raise ValueError("only models built from a pilot pattern can be serialized")
    arrays = {"y": model.y, "pilot_symbols": model.pilots.symbols}
    header = {
        "format_version": _FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "noise_var": model.noise_var,
        "snr_db": None if math.isinf(model.snr_db) else model.snr_db,
        "overhead": model.pilots.overhead,
        "pilot_positions": model.pilots.positions.tolist(),
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "meta": model.meta,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    own = isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__")
    f = open(fh, "wb") if own else fh
    try:
        f.write(_MAGIC + struct.pack("<I", len(raw)) + raw)
        for v in arrays.values():
            f.write(_complex_bytes(v))
    finally:
        if own:
            f.close()


def load_measurement(fh) -> MeasurementModel:
    own = isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__")
    f = open(fh, "rb") if own else fh
    try:
        data = f.read()
    finally:
        if own:
            f.close()
    if data[:4] != _MAGIC:
        raise ValueError("not a measurement container")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + n])
    buf = io.BytesIO(data[8 + n :])
    arrays = {}
    for spec in header["arrays"]:
        size = 16 * int(np.prod(spec["shape"]))
        arrays[spec["name"]] = _complex_from(buf.read(size), spec["shape"])
    cfg = OtfsConfig.from_dict(header["config"])
    pilots = PilotPattern(
        np.asarray(header["pilot_positions"], dtype=int).reshape(-1, 2),
        arrays["pilot_symbols"],
        header["overhead"],
    )
    snr = header["snr_db"]
    return MeasurementModel(
        arrays["y"],
        build_operator(pilots, cfg),
        header["noise_var"],
        cfg,
        pilots,
        math.inf if snr is None else snr,
        header.get("meta", {}),
    )
