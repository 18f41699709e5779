"""Joint sparsity-pattern learning (JSPL) channel estimator.

Spike-and-slab AMP with incremental EM hyperparameter learning. The sparsity
probabilities are refreshed by averaging posterior support probabilities over
each coefficient's Doppler-angle neighbourhood, which lets the block/burst
structure of the DDA channel sharpen the support estimate. The learned support
is then thresholded per delay tap and the channel is recovered by least squares
on it.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .measurement import MeasurementModel

log = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-6
_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class JsplConfig:
    """Iteration control, thresholds and neighbourhood weights.

    A delay tap is detected when its slice norm of the learned sparsity tensor
    exceeds ``eps2_delay`` times the largest slice norm, or
    ``delay_floor_factor`` times the median slice norm (a noise-floor
    reference that keeps weak paths next to a dominant one). ``eps2_entry``
    is absolute on the probabilities.

    When ``eta_init`` is omitted the noise variance starts from a low quantile
    of ``|y|^2`` (``noise_quantile``), exact for noise-only samples since
    ``|w|^2`` is exponential, but never below ``eta_rel_floor * ||y||^2 / M``
    (noiseless data would otherwise start AMP at a near-zero noise level,
    which can diverge). The EM noise update is floored at
    ``eta_floor_factor`` times the starting value; set it to 0 to keep only
    the tiny absolute floor.
    ``lambda_rule="independent"`` replaces the neighbourhood average by the
    plain per-coefficient EM update.
    """

    t_max: int = 100
    eps1: float = 1e-3
    eps2_delay: float = 0.5
    eps2_entry: float = 0.1
    delay_floor_factor: float | None = 3.0
    damping: float = 0.7
    xi_self: float = 1.0
    xi_nb: float = 0.1
    neighbor_radius: int = 1
    neighbor_decay: float = 0.5
    lambda_init: float = 0.02
    mu_init: float | None = None
    eta_init: float | None = None
    noise_quantile: float = 0.05
    eta_rel_floor: float = 1e-6
    eta_floor_factor: float = 0.5
    lambda_rule: str = "adjacent"

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.eps1 <= 0 or self.eps2_delay <= 0 or self.eps2_entry <= 0:
            raise ValueError("thresholds must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.xi_self < 0 or self.xi_nb < 0 or self.xi_self + self.xi_nb <= 0:
            raise ValueError("neighbour weights must be non-negative with a positive sum")
        if self.delay_floor_factor is not None and self.delay_floor_factor <= 0:
            raise ValueError("delay_floor_factor must be positive")
        if self.neighbor_radius < 0:
            raise ValueError("neighbor_radius must be >= 0")
        if not 0 < self.lambda_init < 1:
            raise ValueError("lambda_init must lie in (0, 1)")
        if not 0 < self.noise_quantile < 1:
            raise ValueError("noise_quantile must lie in (0, 1)")
        if self.eta_rel_floor < 0:
            raise ValueError("eta_rel_floor must be >= 0")
        if not 0 <= self.eta_floor_factor <= 1:
            raise ValueError("eta_floor_factor must lie in [0, 1]")
        if self.lambda_rule not in ("adjacent", "independent"):
            raise ValueError(f"unknown lambda_rule {self.lambda_rule!r}")

    def neighbor_weights(self) -> list[float]:
        """Weights for neighbour orders ``a = 1 .. neighbor_radius``."""
        return [self.xi_nb * self.neighbor_decay ** (a - 1) for a in range(1, self.neighbor_radius + 1)]

    @classmethod
    def from_dict(cls, d: dict) -> "JsplConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class JsplState:
    lam: np.ndarray
    mu: float
    eta: float
    h_bar: np.ndarray
    v: np.ndarray
    V: np.ndarray
    S: np.ndarray
    beta: np.ndarray | None = None
    gamma: np.ndarray | None = None
    phi_post: np.ndarray | None = None
    phi_parts: np.ndarray | None = None  # (2, N): real / imaginary part probabilities
    t: int = 0
    eta_floor: float = 0.0


@dataclass
class SupportSet:
    delay_taps: list[int]
    per_tap_da: dict[int, list[tuple[int, int]]]
    flat: np.ndarray
    n_paths_detected: int

    @classmethod
    def empty(cls) -> "SupportSet":
        return cls([], {}, np.zeros(0, dtype=int), 0)


@dataclass
class JsplResult:
    estimate: np.ndarray  # DDA tensor (N_l, N_k, N_T)
    support: SupportSet
    lam: np.ndarray  # learned probabilities reshaped to the DDA tensor
    diagnostics: list[dict] = field(default_factory=list)
    status: str = "ok"
    converged: bool = False
    iterations: int = 0


# ---------------------------------------------------------------------------
# AMP steps


def amp_forward(state: JsplState, model: MeasurementModel) -> tuple[np.ndarray, np.ndarray]:
    """Output-side update: ``V = |Phi|^2 v``, Onsager-corrected scaled residual ``S``."""
    phi = model.phi
    V = np.maximum(phi.abs2_matvec(state.v), 0.0)
    S = (model.y - phi.matvec(state.h_bar) + V * state.S) / (state.eta + V)
    return V, S


def amp_backward(state: JsplState, model: MeasurementModel) -> tuple[np.ndarray, np.ndarray]:
    """Input-side update: pseudo-observation variance ``gamma`` and mean ``beta``."""
    phi = model.phi
    u = 1.0 / (state.eta + state.V)
    # FFT round-off can break the exact bounds when u spans many decades
    col = model.column_sq_norms
    gamma = 1.0 / np.clip(phi.abs2_rmatvec(u), u.min() * col, u.max() * col)
    beta = state.h_bar + gamma * phi.rmatvec(state.S)
    return gamma, beta


def _log_gauss0(beta, var):
    """``log N(0; beta, var)`` for the real Gaussian."""
    return -0.5 * (_LOG_2PI + np.log(var)) - beta**2 / (2 * var)


def spike_slab_moments(beta, gamma, lam, mu):
    """Posterior of a real spike-and-slab variable observed as ``beta = x + N(0, gamma)``.

    The prior is ``(1 - lam) delta(x) + lam N(x; 0, mu)``. Returns the slab
    probability, posterior mean and posterior variance, evaluated in the log
    domain so extreme ``beta / gamma`` ratios do not underflow.
    """
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore"):
        log_spike = np.log1p(-lam) + _log_gauss0(beta, gamma)
        log_slab = np.log(lam) + _log_gauss0(beta, gamma + mu)
    log_zeta = np.logaddexp(log_spike, log_slab)
    phi = np.exp(log_slab - log_zeta)
    m = mu * beta / (gamma + mu)
    s2 = mu * gamma / (gamma + mu)
    mean = phi * m
    var = phi * s2 + phi * (1 - phi) * m**2
    return phi, mean, var


def posterior_update(state: JsplState):
    """Per-part posterior of the complex coefficients.

    Real and imaginary parts are treated as two independent real
    spike-and-slab variables, each carrying half of the complex slab and AMP
    variances. Returns the combined probability (mean over the parts), the
    complex posterior mean, the summed variance, and the per-part
    probabilities.
    """
    half_gamma = state.gamma / 2
    half_mu = state.mu / 2
    phi_re, m_re, v_re = spike_slab_moments(state.beta.real, half_gamma, state.lam, half_mu)
    phi_im, m_im, v_im = spike_slab_moments(state.beta.imag, half_gamma, state.lam, half_mu)
    phi_parts = np.stack([phi_re, phi_im])
    return phi_parts.mean(axis=0), m_re + 1j * m_im, v_re + v_im, phi_parts


# ---------------------------------------------------------------------------
# EM updates


def _neighbor_sums(phi: np.ndarray, a: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum and count of the order-``a`` Doppler-angle neighbours of every entry.

    Doppler neighbours are truncated at the grid edges; angle neighbours wrap.
    ``phi`` has shape ``(..., N_k, N_T)``.
    """
    nk, nt = phi.shape[-2:]
    total = np.zeros_like(phi)
    count = np.zeros(phi.shape[-2:])
    if a < nk:
        total[..., a:, :] += phi[..., :-a, :]
        total[..., :-a, :] += phi[..., a:, :]
        count[a:, :] += 1
        count[:-a, :] += 1
    if a % nt:
        total += np.roll(phi, a, axis=-1)
        count += 1
        if (2 * a) % nt:
            total += np.roll(phi, -a, axis=-1)
            count += 1
    return total, count


def update_lambda_adjacent(phi: np.ndarray, cfg: JsplConfig, grid_dims) -> np.ndarray:
    """Neighbourhood-weighted EM update of the sparsity probabilities.

    ``lambda_n = sum_a xi_a sum_{b in Gamma(n, a)} phi_b / sum_a xi_a |Gamma(n, a)|``
    with ``a = 0`` the coefficient itself. Neighbourhoods lie in the
    Doppler-angle plane of the coefficient's own delay tap. ``phi`` is a flat
    vector in operator column order; the result is clipped to the open unit
    interval.
    """
    nl, nk, nt = grid_dims
    p = np.asarray(phi).reshape(nt, nl, nk).transpose(1, 2, 0)
    num = cfg.xi_self * p
    den = np.full((nk, nt), cfg.xi_self)
    for a, w in enumerate(cfg.neighbor_weights(), start=1):
        if w == 0:
            continue
        s, c = _neighbor_sums(p, a)
        num = num + w * s
        den = den + w * c
    lam = (num / den).transpose(2, 0, 1).reshape(-1)
    return np.clip(lam, LAMBDA_FLOOR, 1 - LAMBDA_FLOOR)


def update_lambda_independent(phi: np.ndarray) -> np.ndarray:
    """Plain per-coefficient EM update ``lambda_n = phi_n``."""
    return np.clip(phi, LAMBDA_FLOOR, 1 - LAMBDA_FLOOR)


def update_mu_eta(state: JsplState, n_measurements: int | None = None) -> tuple[float, float]:
    """EM updates of the slab variance and the noise variance.

    Uses the iteration-``t`` quantities held in ``state``. The slab update sums
    the real and imaginary contributions (each with half the complex
    variances), which reduces to the complex formula when both parts share one
    probability. ``mu`` is kept when no coefficient is active; ``eta`` is
    floored at ``state.eta_floor``.
    """
    mu, eta = state.mu, state.eta
    parts = state.phi_parts if state.phi_parts is not None else np.stack([state.phi_post] * 2)
    weight = parts.sum()
    if weight > 0:
        hm, hg = mu / 2, state.gamma / 2
        shrink = hm / (hg + hm)
        m2 = np.stack([(shrink * state.beta.real) ** 2, (shrink * state.beta.imag) ** 2])
        s2 = hm * hg / (hg + hm)
        mu_new = 2 * float(np.sum(parts * (m2 + s2)) / weight)
        if not mu_new > 0:
            mu_new = mu
    else:
        mu_new = mu
    M = n_measurements if n_measurements is not None else len(state.S)
    eta_new = float(np.sum(np.abs(eta * state.S) ** 2 + eta * state.V / (eta + state.V)) / M)
    if eta_new < state.eta_floor:
        log.debug("noise variance update %.3g floored at %.3g", eta_new, state.eta_floor)
        eta_new = state.eta_floor
    return mu_new, eta_new


# ---------------------------------------------------------------------------
# driver


def estimate_noise_var(y: np.ndarray, q: float = 0.05) -> float:
    """Noise variance from the ``q`` quantile of ``|y|^2``.

    For circular complex Gaussian noise ``|w|^2`` is exponential with mean
    ``eta``, so its ``q`` quantile is ``-eta * log(1 - q)``. Signal-bearing
    samples only push the estimate up.
    """
    return float(np.quantile(np.abs(y) ** 2, q) / -np.log1p(-q))


def init_state(model: MeasurementModel, cfg: JsplConfig) -> JsplState:
    y = model.y
    M, N = model.phi.shape
    energy = float(np.vdot(y, y).real)
    mean_col = float(np.mean(model.column_sq_norms))
    mu = cfg.mu_init if cfg.mu_init is not None else energy / (cfg.lambda_init * N * mean_col)
    abs_floor = 1e-12 * energy / M
    if cfg.eta_init is not None:
        eta = cfg.eta_init
    else:
        eta = max(estimate_noise_var(y, cfg.noise_quantile), cfg.eta_rel_floor * energy / M)
    eta = max(eta, abs_floor)
    lam = np.full(N, cfg.lambda_init)
    return JsplState(
        lam=lam,
        mu=mu,
        eta=eta,
        h_bar=np.zeros(N, dtype=complex),
        v=lam * mu,
        V=np.zeros(M),
        S=np.zeros(M, dtype=complex),
        eta_floor=max(abs_floor, cfg.eta_floor_factor * eta),
    )


def jspl_iteration(state: JsplState, model: MeasurementModel, cfg: JsplConfig, grid_dims) -> float:
    """One pass of AMP + EM; mutates ``state`` and returns the relative
    change of the sparsity probabilities."""
    d = cfg.damping if state.t > 0 else 1.0
    V, S = amp_forward(state, model)
    state.V = d * V + (1 - d) * state.V
    state.S = d * S + (1 - d) * state.S
    state.gamma, state.beta = amp_backward(state, model)
    phi, h_bar, v, parts = posterior_update(state)
    state.phi_post, state.phi_parts = phi, parts
    if cfg.lambda_rule == "adjacent":
        lam = update_lambda_adjacent(phi, cfg, grid_dims)
    else:
        lam = update_lambda_independent(phi)
    mu, eta = update_mu_eta(state, model.n_measurements)
    state.h_bar = d * h_bar + (1 - d) * state.h_bar
    state.v = d * v + (1 - d) * state.v
    delta = float(np.linalg.norm(lam - state.lam) / np.linalg.norm(state.lam))
    state.lam, state.mu, state.eta = lam, mu, eta
    state.t += 1
    return delta


def extract_support(lam_tensor: np.ndarray, cfg: JsplConfig) -> SupportSet:
    """Threshold the learned probabilities: delay taps first, then the
    Doppler-angle entries inside each detected tap."""
    nl, nk, nt = lam_tensor.shape
    slice_norms = np.sqrt(np.sum(lam_tensor**2, axis=(1, 2)))
    detected = slice_norms > cfg.eps2_delay * slice_norms.max()
    if cfg.delay_floor_factor is not None:
        detected |= slice_norms > cfg.delay_floor_factor * np.median(slice_norms)
    taps, per_tap, flat = [], {}, []
    for l in np.flatnonzero(detected):
        ks, rs = np.nonzero(lam_tensor[l] > cfg.eps2_entry)
        if ks.size == 0:
            continue
        taps.append(int(l))
        per_tap[int(l)] = [(int(k) - nk // 2, int(r) - nt // 2) for k, r in zip(ks, rs)]
        flat.extend(rs * nl * nk + l * nk + ks)
    return SupportSet(taps, per_tap, np.sort(np.asarray(flat, dtype=int)), len(taps))


def least_squares_on_support(model: MeasurementModel, support: np.ndarray) -> tuple[np.ndarray, bool]:
    """Pseudo-inverse solution restricted to ``support``; returns the full
    coefficient vector and a rank-deficiency flag."""
    N = model.n_coefficients
    h = np.zeros(N, dtype=complex)
    if support.size == 0:
        return h, False
    A = model.phi.columns(support)
    coef, _, rank, _ = np.linalg.lstsq(A, model.y, rcond=None)
    h[support] = coef
    return h, rank < support.size


def run_jspl(model: MeasurementModel, cfg: JsplConfig | None = None, grid_dims=None, callback=None) -> JsplResult:
    """Estimate the DDA channel from ``model``.

    Parameters
    ----------
    model : MeasurementModel
    cfg : JsplConfig, optional
    grid_dims : tuple of int, optional
        ``(N_l, N_k, N_T)``; taken from ``model.cfg`` when omitted.
    callback : callable, optional
        Called as ``callback(state)`` after every iteration.
    """
    cfg = cfg or JsplConfig()
    if grid_dims is None:
        grid_dims = model.cfg.dda_shape
    nl, nk, nt = grid_dims
    if nl * nk * nt != model.n_coefficients:
        raise ValueError("grid_dims do not match the operator")

    if not np.any(model.y):
        warnings.warn("zero observation: returning the zero channel", RuntimeWarning, stacklevel=2)
        zero = np.zeros(grid_dims, dtype=complex)
        return JsplResult(zero, SupportSet.empty(), np.zeros(grid_dims), status="empty_support")

    state = init_state(model, cfg)
    diagnostics = []
    converged = False
    for _ in range(cfg.t_max):
        delta = jspl_iteration(state, model, cfg, grid_dims)
        diagnostics.append(
            {
                "t": state.t,
                "lambda_delta": delta,
                "mu": state.mu,
                "eta": state.eta,
                "support_size_estimate": int(np.count_nonzero(state.lam > cfg.eps2_entry)),
            }
        )
        if callback is not None:
            callback(state)
        if delta < cfg.eps1:
            converged = True
            break

    lam_tensor = state.lam.reshape(nt, nl, nk).transpose(1, 2, 0)
    support = extract_support(lam_tensor, cfg)
    status = "ok"
    if support.flat.size == 0:
        warnings.warn("no support detected: returning the zero channel", RuntimeWarning, stacklevel=2)
        status = "empty_support"
    h, deficient = least_squares_on_support(model, support.flat)
    if deficient or support.flat.size > model.n_measurements:
        status = "rank_deficient"
    estimate = h.reshape(nt, nl, nk).transpose(1, 2, 0)
    return JsplResult(estimate, support, lam_tensor, diagnostics, status, converged, state.t)


def write_diagnostics(diagnostics: list[dict], fh) -> None:
    """Write one JSON object per iteration."""
    for rec in diagnostics:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
