"""Multipath channel: path sampling, time-domain application, and the
delay-Doppler-angle (DDA) channel tensor.

A DDA tensor has shape ``(n_delay, n_doppler, n_tx)`` indexed by
``(l, k, r)`` with ``k`` and ``r`` in signed natural order. Its column-vector
form is angle-block major (see :func:`flatten_dda`), matching the block layout
of the sensing operator in :mod:`otfs_jspl.measurement`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .otfs import SPEED_OF_LIGHT, OtfsConfig


@dataclass(frozen=True)
class Path:
    """One propagation path.

    ``doppler`` is in Hz; ``aod_sin`` is the inter-element phase increment in
    cycles, ``(d / wavelength) * sin(theta)``, in ``[-1/2, 1/2)``. Delays are
    whole sample periods.
    """

    gain: complex
    delay_taps: int
    doppler: float
    aod_sin: float

    def delay(self, cfg: OtfsConfig) -> float:
        """Delay in seconds."""
        return self.delay_taps * cfg.sample_period

    def validate(self, cfg: OtfsConfig, margin: float = 0.0):
        if not 0 <= self.delay_taps < cfg.n_delay:
            raise ValueError(f"delay tap {self.delay_taps} outside [0, {cfg.n_delay})")
        limit = cfg.n_doppler / (2 * cfg.symbol_duration) * (1 - margin)
        if abs(self.doppler) >= limit:
            raise ValueError(f"|doppler| {abs(self.doppler):.1f} Hz exceeds {limit:.1f} Hz")
        if not -0.5 <= self.aod_sin < 0.5:
            raise ValueError("aod_sin must lie in [-1/2, 1/2)")


@dataclass(frozen=True)
class PathSet:
    paths: tuple[Path, ...] = ()
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        taps = [p.delay_taps for p in self.paths]
        if len(set(taps)) != len(taps):
            raise ValueError("path delays must be distinct taps")

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.paths], dtype=complex)

    @property
    def delay_taps(self) -> np.ndarray:
        return np.array([p.delay_taps for p in self.paths], dtype=int)

    @property
    def dopplers(self) -> np.ndarray:
        return np.array([p.doppler for p in self.paths], dtype=float)

    @property
    def aod_sins(self) -> np.ndarray:
        return np.array([p.aod_sin for p in self.paths], dtype=float)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "paths": [
                {
                    "gain": {"re": float(np.real(p.gain)), "im": float(np.imag(p.gain))},
                    "delay_taps": int(p.delay_taps),
                    "doppler_hz": float(p.doppler),
                    "aod_sin": float(p.aod_sin),
                }
                for p in self.paths
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PathSet":
        paths = [
            Path(
                gain=complex(p["gain"]["re"], p["gain"]["im"]),
                delay_taps=int(p["delay_taps"]),
                doppler=float(p["doppler_hz"]),
                aod_sin=float(p["aod_sin"]),
            )
            for p in d["paths"]
        ]
        return cls(paths, d.get("seed"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PathSet":
        return cls.from_dict(json.loads(text))


def max_doppler(speed: float, carrier_freq: float) -> float:
    """Maximum Doppler shift ``v * f_c / c`` in Hz for a speed in m/s."""
    return speed * carrier_freq / SPEED_OF_LIGHT


def sample_paths(
    cfg: OtfsConfig,
    n_paths: int,
    max_speed: float,
    seed: int,
    *,
    on_grid: bool = False,
    overdelay_fraction: float = 0.25,
    burst_angles: bool = False,
) -> PathSet:
    """Draw a random set of paths.

    Gains are complex Gaussian normalized to unit total power; delays are
    distinct integer taps in ``[0, n_delay * overdelay_fraction)`` (capped at
    the CP length so the channel stays ISI-free); Dopplers follow the Jakes
    model ``max_doppler * cos(phi)`` with uniform ``phi``; ``aod_sin`` is
    uniform. With ``burst_angles`` the angles are grouped into clusters whose
    spread is about ``n_tx / 10`` angle bins. ``on_grid`` snaps Doppler and
    angle to the nearest grid point.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if max_speed < 0:
        raise ValueError("max_speed must be >= 0")
    n_taps = min(max(1, math.ceil(cfg.n_delay * overdelay_fraction)), cfg.n_cp + 1, cfg.n_delay)
    if n_paths > n_taps:
        raise ValueError(f"{n_paths} paths need distinct taps but only {n_taps} are available")

    rng = np.random.default_rng(seed)
    gains = (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)) / math.sqrt(2)
    gains /= np.linalg.norm(gains)
    taps = rng.choice(n_taps, size=n_paths, replace=False)
    phi = rng.uniform(0.0, 2 * math.pi, size=n_paths)
    nu = max_doppler(max_speed, cfg.carrier_freq) * np.cos(phi)

    if burst_angles:
        n_clusters = max(1, n_paths // 2)
        centers = rng.uniform(-0.5, 0.5, size=n_clusters)
        spread = max(1.0, cfg.n_tx / 10) / cfg.n_tx
        psi = centers[rng.integers(n_clusters, size=n_paths)] + rng.uniform(
            -spread / 2, spread / 2, size=n_paths
        )
        psi = (psi + 0.5) % 1.0 - 0.5
    else:
        psi = rng.uniform(-0.5, 0.5, size=n_paths)

    if on_grid:
        res = cfg.doppler_resolution
        nu = np.round(nu / res) * res
        psi = np.round(psi * cfg.n_tx) / cfg.n_tx
        psi = (psi + 0.5) % 1.0 - 0.5

    # keep the Doppler index strictly inside the unambiguous range
    limit = cfg.n_doppler / (2 * cfg.symbol_duration)
    if np.any(np.abs(nu) >= limit):
        raise ValueError("max_speed produces Doppler beyond the grid's unambiguous range")

    paths = [
        Path(complex(g), int(t), float(f), float(a)) for g, t, f, a in zip(gains, taps, nu, psi)
    ]
    return PathSet(tuple(paths), seed)


def dirichlet_kernel(x, n: int) -> np.ndarray:
    """``sin(pi x) / sin(pi x / n) * exp(j pi x (n - 1) / n)``.

    This equals the geometric sum ``sum_{c<n} exp(j 2 pi c x / n)``; the 0/0
    points (``x`` a multiple of ``n``) take their limit ``n``.
    """
    x = np.asarray(x, dtype=float)
    den = np.sin(np.pi * x / n)
    singular = np.abs(den) < 1e-12
    safe = np.where(singular, 1.0, den)
    ratio = np.where(singular, n * np.cos(np.pi * x) / np.cos(np.pi * x / n), np.sin(np.pi * x) / safe)
    return ratio * np.exp(1j * np.pi * x * (n - 1) / n)


def dda_channel(paths: PathSet, cfg: OtfsConfig, *, receiver_aligned: bool = False) -> np.ndarray:
    """Evaluate the DDA-domain channel tensor of a path set.

    With ``receiver_aligned=False`` each path contributes
    ``gain * exp(j 2 pi nu Ts) * D_k(nu N_k T - k) * D_T(N_T psi - r)`` at its
    delay tap, with ``D_n`` the Dirichlet kernel; an on-grid path therefore has
    peak magnitude ``|gain| * N_k * N_T``.

    ``receiver_aligned=True`` returns the tensor actually seen through the
    unitary OTFS chain and the sensing operator: the kernels are scaled by
    ``1 / (N_k N_T)`` and the residual phase is ``exp(j 2 pi nu N_cp Ts)``
    (the first kept sample of every symbol sits ``N_cp`` samples into it).
    This is the estimation target.
    """
    h = np.zeros(cfg.dda_shape, dtype=complex)
    if len(paths) == 0:
        return h
    ks = cfg.doppler_indices()
    rs = cfg.angle_indices()
    T = cfg.symbol_duration
    Ts = cfg.sample_period
    for p in paths:
        xk = p.doppler * cfg.n_doppler * T - ks
        xr = cfg.n_tx * p.aod_sin - rs
        dk = dirichlet_kernel(xk, cfg.n_doppler)
        dr = dirichlet_kernel(xr, cfg.n_tx)
        if receiver_aligned:
            coef = p.gain * np.exp(2j * np.pi * p.doppler * cfg.n_cp * Ts) / (cfg.n_doppler * cfg.n_tx)
        else:
            coef = p.gain * np.exp(2j * np.pi * p.doppler * Ts)
        h[p.delay_taps] += coef * np.outer(dk, dr)
    return h


def flatten_dda(h: np.ndarray) -> np.ndarray:
    """Tensor ``(l, k, r)`` -> vector with index ``r_idx * M + l * N_k + k_idx``."""
    h = np.asarray(h)
    return np.moveaxis(h, -1, -3).reshape(*h.shape[:-3], -1)


def unflatten_dda(vec: np.ndarray, cfg: OtfsConfig) -> np.ndarray:
    """Inverse of :func:`flatten_dda`."""
    vec = np.asarray(vec)
    t = vec.reshape(*vec.shape[:-1], cfg.n_tx, cfg.n_delay, cfg.n_doppler)
    return np.moveaxis(t, -3, -1)


def dda_index(l: int, k: int, r: int, cfg: OtfsConfig) -> int:
    """Column index of the coefficient at delay ``l``, signed Doppler ``k``, signed angle ``r``."""
    return (r + cfg.n_tx // 2) * cfg.n_measurements + l * cfg.n_doppler + (k + cfg.n_doppler // 2)


def dda_coords(n: int, cfg: OtfsConfig) -> tuple[int, int, int]:
    """Inverse of :func:`dda_index`."""
    r_idx, rem = divmod(int(n), cfg.n_measurements)
    l, k_idx = divmod(rem, cfg.n_doppler)
    return l, k_idx - cfg.n_doppler // 2, r_idx - cfg.n_tx // 2


def apply_channel(
    s: np.ndarray,
    paths: PathSet,
    cfg: OtfsConfig,
    noise_var: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Pass per-antenna time signals through the multipath channel.

    ``r[kappa] = sum_i sum_q gain_i exp(j 2 pi nu_i kappa Ts) exp(j 2 pi q psi_i)
    s_q[kappa - tap_i] + w[kappa]``, the delay acting circularly inside each
    CP-extended symbol (identical to linear convolution once the CP is removed).

    Parameters
    ----------
    s : ndarray, shape (..., n_tx, frame_length)
    noise_var : float
        Complex noise variance per sample; ``rng`` is required when positive.

    Returns
    -------
    ndarray, shape (..., frame_length)
    """
    s = np.asarray(s)
    if s.shape[-2:] != (cfg.n_tx, cfg.frame_length):
        raise ValueError(f"expected (..., {cfg.n_tx}, {cfg.frame_length}) signals, got {s.shape}")
    sym_len = cfg.n_delay + cfg.n_cp
    blocks = s.reshape(*s.shape[:-1], cfg.n_doppler, sym_len)
    kappa = np.arange(cfg.frame_length)
    q = np.arange(cfg.n_tx)
    r = np.zeros(s.shape[:-2] + (cfg.frame_length,), dtype=complex)
    for p in paths:
        if p.delay_taps > cfg.n_cp:
            raise ValueError(f"delay of {p.delay_taps} taps exceeds the CP length {cfg.n_cp}")
        steer = np.exp(2j * np.pi * q * p.aod_sin)
        combined = np.tensordot(steer, np.moveaxis(blocks, -3, 0), axes=(0, 0))
        delayed = np.roll(combined, p.delay_taps, axis=-1).reshape(*combined.shape[:-2], -1)
        r += p.gain * np.exp(2j * np.pi * p.doppler * kappa * cfg.sample_period) * delayed
    if noise_var > 0:
        if rng is None:
            raise ValueError("rng is required when noise_var > 0")
        r += complex_noise(rng, r.shape, noise_var)
    return r


def complex_noise(rng: np.random.Generator, shape, var: float) -> np.ndarray:
    return math.sqrt(var / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
