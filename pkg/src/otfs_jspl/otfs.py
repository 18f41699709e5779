"""OTFS frame: grid configuration, ISFFT/SFFT, and the OFDM-based modulator chain.

Delay-Doppler grids are ``(n_delay, n_doppler)`` arrays whose Doppler axis is
stored in signed natural order, column ``j`` holding ``k = j - n_doppler // 2``.
All DFTs use unitary (``norm="ortho"``) scaling, so modulate/demodulate are an
exact inverse pair and preserve energy (cyclic prefix excluded).

Every transform acts on the last two axes and broadcasts over leading ones, so
a stack of per-antenna grids ``(n_tx, n_delay, n_doppler)`` can be processed in
one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class OtfsConfig:
    """Dimensions and physical parameters of one OTFS frame.

    Parameters
    ----------
    n_delay : int
        Number of subcarriers, i.e. delay bins.
    n_doppler : int
        Number of OFDM symbols, i.e. Doppler bins. Must be even.
    n_cp : int
        Cyclic prefix length in samples (one prefix per OFDM symbol).
    n_tx : int
        Number of base-station antennas. Must be even.
    subcarrier_spacing : float
        Subcarrier spacing in Hz.
    carrier_freq : float
        Carrier frequency in Hz.
    """

    n_delay: int = 32
    n_doppler: int = 16
    n_cp: int = 8
    n_tx: int = 16
    subcarrier_spacing: float = 15e3
    carrier_freq: float = 4.9e9

    def __post_init__(self):
        for name in ("n_delay", "n_doppler", "n_tx"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.n_doppler % 2 or self.n_tx % 2:
            raise ValueError("n_doppler and n_tx must be even")
        if self.n_cp < 0:
            raise ValueError("n_cp must be non-negative")
        if self.subcarrier_spacing <= 0 or self.carrier_freq <= 0:
            raise ValueError("subcarrier_spacing and carrier_freq must be positive")

    @property
    def sample_period(self) -> float:
        return 1.0 / (self.n_delay * self.subcarrier_spacing)

    @property
    def symbol_duration(self) -> float:
        """Duration of one CP-extended OFDM symbol."""
        return (self.n_delay + self.n_cp) * self.sample_period

    @property
    def grid_shape(self) -> tuple[int, int]:
        return (self.n_delay, self.n_doppler)

    @property
    def dda_shape(self) -> tuple[int, int, int]:
        return (self.n_delay, self.n_doppler, self.n_tx)

    @property
    def n_measurements(self) -> int:
        return self.n_delay * self.n_doppler

    @property
    def n_coefficients(self) -> int:
        return self.n_delay * self.n_doppler * self.n_tx

    @property
    def frame_length(self) -> int:
        """Number of time samples in one serialized frame."""
        return (self.n_delay + self.n_cp) * self.n_doppler

    @property
    def doppler_resolution(self) -> float:
        """Doppler bin width ``1 / (n_doppler * T)`` in Hz."""
        return 1.0 / (self.n_doppler * self.symbol_duration)

    def doppler_indices(self) -> np.ndarray:
        return signed_indices(self.n_doppler)

    def angle_indices(self) -> np.ndarray:
        return signed_indices(self.n_tx)

    def to_dict(self) -> dict:
        return {
            "n_delay": self.n_delay,
            "n_doppler": self.n_doppler,
            "n_cp": self.n_cp,
            "n_tx": self.n_tx,
            "subcarrier_spacing": self.subcarrier_spacing,
            "carrier_freq": self.carrier_freq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OtfsConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def signed_indices(n: int) -> np.ndarray:
    """Signed index range ``-n/2 .. n/2 - 1`` in natural order."""
    return np.arange(n) - n // 2


def to_fft_order(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Reorder an axis from signed natural order to DFT order (index ``k mod n``)."""
    return np.fft.ifftshift(a, axes=axis)


def to_natural_order(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`to_fft_order`."""
    return np.fft.fftshift(a, axes=axis)


def _check_grid(x: np.ndarray, cfg: OtfsConfig | None) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError("grid must have at least two dimensions")
    if cfg is not None and x.shape[-2:] != cfg.grid_shape:
        raise ValueError(f"grid shape {x.shape[-2:]} does not match config {cfg.grid_shape}")
    return x


def isfft(dd: np.ndarray, cfg: OtfsConfig | None = None) -> np.ndarray:
    """Map a delay-Doppler grid to the time-frequency plane.

    DFT along delay and inverse DFT along Doppler. The returned TF grid has its
    symbol (time) axis in plain DFT order.
    """
    dd = _check_grid(dd, cfg)
    tf = np.fft.fft(dd, axis=-2, norm="ortho")
    return np.fft.ifft(to_fft_order(tf, axis=-1), axis=-1, norm="ortho")


def sfft(tf: np.ndarray, cfg: OtfsConfig | None = None) -> np.ndarray:
    """Inverse of :func:`isfft`."""
    tf = _check_grid(tf, cfg)
    dd = np.fft.ifft(tf, axis=-2, norm="ortho")
    return to_natural_order(np.fft.fft(dd, axis=-1, norm="ortho"), axis=-1)


def _check_window(window, n: int) -> np.ndarray | None:
    if window is None:
        return None
    w = np.asarray(window)
    if w.ndim == 2:
        if np.count_nonzero(w - np.diag(np.diagonal(w))):
            raise ValueError("only diagonal windows are supported")
        w = np.diagonal(w)
    if w.shape != (n,):
        raise ValueError(f"window must have {n} diagonal entries")
    return w


def otfs_modulate(x_dd: np.ndarray, cfg: OtfsConfig, tx_window=None) -> np.ndarray:
    """ISFFT, per-symbol IDFT, transmit window, CP insertion and serialization.

    Parameters
    ----------
    x_dd : ndarray, shape (..., n_delay, n_doppler)
        Delay-Doppler symbols (Doppler in natural order).
    cfg : OtfsConfig
    tx_window : array_like, optional
        Diagonal of the transmit window (identity if omitted).

    Returns
    -------
    ndarray, shape (..., (n_delay + n_cp) * n_doppler)
        Time samples, one CP-extended OFDM symbol after another.
    """
    x_dd = _check_grid(x_dd, cfg)
    tf = isfft(x_dd)
    blocks = np.fft.ifft(tf, axis=-2, norm="ortho")
    w = _check_window(tx_window, cfg.n_delay)
    if w is not None:
        blocks = blocks * w[:, None]
    if cfg.n_cp:
        blocks = np.concatenate([blocks[..., -cfg.n_cp :, :], blocks], axis=-2)
    # column-wise vec: symbol index is the slow axis
    return np.swapaxes(blocks, -1, -2).reshape(*blocks.shape[:-2], -1)


def otfs_demodulate(r: np.ndarray, cfg: OtfsConfig, rx_window=None) -> np.ndarray:
    """De-serialization, CP removal, receive window, DFT and SFFT.

    Exact inverse of :func:`otfs_modulate` over an ideal channel.
    """
    r = np.asarray(r)
    if r.shape[-1] != cfg.frame_length:
        raise ValueError(f"signal length {r.shape[-1]} != frame length {cfg.frame_length}")
    blocks = np.swapaxes(r.reshape(*r.shape[:-1], cfg.n_doppler, cfg.n_delay + cfg.n_cp), -1, -2)
    blocks = blocks[..., cfg.n_cp :, :]
    w = _check_window(rx_window, cfg.n_delay)
    if w is not None:
        blocks = blocks * w[:, None]
    tf = np.fft.fft(blocks, axis=-2, norm="ortho")
    return sfft(tf)
