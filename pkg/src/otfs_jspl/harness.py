"""Monte Carlo experiment harness: NMSE / support sweeps, BER runs and
support-map export.

Every random draw is seeded from the master seed through
:class:`numpy.random.SeedSequence` keyed by purpose and trial coordinates, so
results do not depend on execution order or thread count. Within a trial the
channel is shared by all SNRs, overheads and estimators (paired comparisons);
with a shared seed the path geometry is also shared across speeds, only the
Doppler scale changing.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath

import numpy as np
import scipy.linalg

from .baselines import OmpConfig, omp, somp3d
from .channel import (
    PathSet,
    apply_channel,
    complex_noise,
    dda_channel,
    flatten_dda,
    sample_paths,
    unflatten_dda,
)
from .jspl import JsplConfig, run_jspl
from .measurement import (
    MeasurementModel,
    effective_tf_blocks,
    make_pilot_pattern,
    observe,
)
from .otfs import OtfsConfig, isfft, otfs_demodulate, otfs_modulate, sfft

SCHEMA_VERSION = 1
ESTIMATORS = ("jspl", "omp", "somp3d")
PERFECT = "perfect"
DEFAULT_MEMORY_LIMIT = 2 << 30

TRIAL_COLUMNS = (
    "estimator",
    "snr_db",
    "speed",
    "overhead",
    "trial",
    "seed",
    "status",
    "nmse",
    "nmse_db",
    "support_precision",
    "support_recall",
    "n_support",
    "iterations",
)
BER_COLUMNS = (
    "estimator",
    "snr_db",
    "speed",
    "overhead",
    "trial",
    "seed",
    "status",
    "bit_errors",
    "n_bits",
    "ber",
    "nmse",
)

# seed-stream tags
_CHANNEL, _PILOT, _NOISE, _DATA = range(4)


def derive_seed(master: int, *key: int) -> int:
    """Deterministic 32-bit child seed for a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(master), *map(int, key)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator entry of an experiment.

    ``overheads`` optionally restricts the estimator to a subset of the
    experiment's overhead grid (e.g. JSPL at 5 % and baselines at 50 %).
    """

    kind: str
    config: dict = field(default_factory=dict)
    label: str | None = None
    overheads: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.kind!r}; expected one of {ESTIMATORS}")
        if self.overheads is not None:
            object.__setattr__(self, "overheads", tuple(float(o) for o in self.overheads))
        self.make_config()  # validate eagerly

    @property
    def name(self) -> str:
        return self.label or self.kind

    def make_config(self):
        cls = JsplConfig if self.kind == "jspl" else OmpConfig
        unknown = set(self.config) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown {self.kind} options: {sorted(unknown)}")
        cfg = dict(self.config)
        if "block_dims" in cfg:
            cfg["block_dims"] = tuple(cfg["block_dims"])
        return cls(**cfg)

    def runs_at(self, overhead: float) -> bool:
        return self.overheads is None or any(math.isclose(overhead, o) for o in self.overheads)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "config": dict(self.config)}
        if self.label is not None:
            d["label"] = self.label
        if self.overheads is not None:
            d["overheads"] = list(self.overheads)
        return d

    @classmethod
    def from_dict(cls, d: dict | str) -> "EstimatorSpec":
        if isinstance(d, str):
            return cls(d)
        return cls(d["kind"], dict(d.get("config", {})), d.get("label"), d.get("overheads"))


@dataclass(frozen=True)
class ExperimentSpec:
    """Monte Carlo sweep definition (serialized as versioned JSON)."""

    cfg: OtfsConfig = field(default_factory=OtfsConfig)
    estimators: tuple[EstimatorSpec, ...] = (EstimatorSpec("jspl"), EstimatorSpec("omp"))
    snr_grid: tuple[float, ...] = (10.0, 20.0)
    speeds: tuple[float, ...] = (100.0,)
    overheads: tuple[float, ...] = (0.2,)
    n_trials: int = 10
    seed: int = 0
    output_path: str | None = None
    n_paths: int = 4
    on_grid: bool = False
    burst_angles: bool = False
    support_energy: float = 0.999
    memory_limit: int = DEFAULT_MEMORY_LIMIT
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name in ("estimators", "snr_grid", "speeds", "overheads"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        for name in ("estimators", "snr_grid", "speeds", "overheads"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if len({e.name for e in self.estimators}) != len(self.estimators):
            raise ValueError("estimator names must be unique (set 'label')")
        if not 0 < self.support_energy <= 1:
            raise ValueError("support_energy must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "cfg": self.cfg.to_dict(),
            "estimators": [e.to_dict() for e in self.estimators],
            "snr_grid": list(self.snr_grid),
            "speeds": list(self.speeds),
            "overheads": list(self.overheads),
            "n_trials": self.n_trials,
            "seed": self.seed,
            "output_path": self.output_path,
            "n_paths": self.n_paths,
            "on_grid": self.on_grid,
            "burst_angles": self.burst_angles,
            "support_energy": self.support_energy,
            "memory_limit": self.memory_limit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        if "schema_version" not in d:
            raise ValueError("spec is missing 'schema_version'")
        kw = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        kw["cfg"] = OtfsConfig.from_dict(d.get("cfg", {}))
        if "estimators" in d:
            kw["estimators"] = tuple(EstimatorSpec.from_dict(e) for e in d["estimators"])
        for name in ("snr_grid", "speeds", "overheads"):
            if name in kw:
                kw[name] = tuple(float(v) for v in kw[name])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_json(FsPath(path).read_text())


def estimated_memory_bytes(cfg: OtfsConfig) -> int:
    """Rough peak memory of one estimator run: about a dozen length-N state
    vectors plus the operator's pilot tensors."""
    n = cfg.n_coefficients
    return 16 * (12 * n + 3 * n)


def check_memory(spec: ExperimentSpec) -> None:
    need = estimated_memory_bytes(spec.cfg)
    if need > spec.memory_limit:
        raise MemoryError(
            f"grid {spec.cfg.dda_shape} needs about {need / 2**30:.1f} GiB per trial, "
            f"above the configured limit of {spec.memory_limit / 2**30:.1f} GiB"
        )


# ---------------------------------------------------------------------------
# metrics


def nmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """``||estimate - truth||^2 / ||truth||^2``; a zero truth gives 0 for an
    exact estimate and ``inf`` otherwise."""
    err = float(np.sum(np.abs(np.asarray(estimate) - np.asarray(truth)) ** 2))
    ref = float(np.sum(np.abs(truth) ** 2))
    if ref == 0:
        return 0.0 if err == 0 else math.inf
    return err / ref


def energy_support(h: np.ndarray, energy: float = 0.999) -> np.ndarray:
    """Smallest index set (flat, sorted) holding at least ``energy`` of ``|h|^2``."""
    e = np.abs(np.ravel(h)) ** 2
    total = e.sum()
    if total == 0:
        return np.zeros(0, dtype=int)
    order = np.argsort(e, kind="stable")[::-1]
    k = int(np.searchsorted(np.cumsum(e[order]), energy * total * (1 - 1e-12))) + 1
    return np.sort(order[: min(k, e.size)])


def support_precision_recall(estimated, true) -> tuple[float, float]:
    """Precision and recall of an index set; empty sets score 1."""
    est, tru = set(np.ravel(estimated).tolist()), set(np.ravel(true).tolist())
    hit = len(est & tru)
    precision = hit / len(est) if est else 1.0
    recall = hit / len(tru) if tru else 1.0
    return precision, recall


# ---------------------------------------------------------------------------
# single-trial plumbing


@dataclass
class TrialResult:
    estimator: str
    snr_db: float
    speed: float
    overhead: float
    trial: int
    seed: int
    status: str = "ok"
    nmse: float = math.nan
    nmse_db: float = math.nan
    support_precision: float = math.nan
    support_recall: float = math.nan
    n_support: int = 0
    iterations: int = 0
    runtime: float = 0.0

    def row(self) -> list:
        return [getattr(self, c) for c in TRIAL_COLUMNS]


@dataclass
class Estimate:
    h: np.ndarray  # flat coefficient vector
    support: np.ndarray
    iterations: int
    status: str


def run_estimator(est: EstimatorSpec, model: MeasurementModel) -> Estimate:
    """Run one estimator and return its flat estimate and support."""
    cfg = est.make_config()
    if est.kind == "jspl":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = run_jspl(model, cfg)
        return Estimate(flatten_dda(res.estimate), res.support.flat, res.iterations, res.status)
    fn = omp if est.kind == "omp" else somp3d
    res = fn(model, cfg)
    return Estimate(res.estimate, res.support, len(res.residual_norms) - 1, res.status)


def _paths(spec: ExperimentSpec, speed: float, seed: int) -> PathSet:
    if spec.n_paths == 0:
        return PathSet((), seed)
    return sample_paths(
        spec.cfg, spec.n_paths, speed, seed, on_grid=spec.on_grid, burst_angles=spec.burst_angles
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: FsPath, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(v) for v in r])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def _prepare_output(path) -> FsPath:
    out = FsPath(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    return out


def _map_units(units, fn, threads: int):
    if threads <= 1:
        return [fn(u) for u in units]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, units))


def _median(values) -> float:
    v = [x for x in values if not (isinstance(x, float) and math.isnan(x))]
    return float(np.median(v)) if v else math.nan


# ---------------------------------------------------------------------------
# NMSE / support sweeps


@dataclass
class ExperimentResult:
    rows: list[TrialResult]
    aggregate: dict
    output_dir: FsPath | None = None


def _nmse_unit(spec: ExperimentSpec, unit) -> list[TrialResult]:
    trial, si, speed, oi, overhead, ni, snr = unit
    cfg = spec.cfg
    ch_seed = derive_seed(spec.seed, _CHANNEL, trial)
    active = [e for e in spec.estimators if e.runs_at(overhead)]
    base = dict(snr_db=snr, speed=speed, overhead=overhead, trial=trial, seed=ch_seed)
    try:
        paths = _paths(spec, speed, ch_seed)
        h_true = flatten_dda(dda_channel(paths, cfg, receiver_aligned=True))
        true_sup = energy_support(h_true, spec.support_energy)
        pilots = make_pilot_pattern(cfg, overhead, derive_seed(spec.seed, _PILOT, trial, oi))
        model = observe(paths, pilots, cfg, snr, derive_seed(spec.seed, _NOISE, trial, si, oi, ni))
    except Exception as exc:  # recorded, never aborts the sweep
        return [TrialResult(e.name, status=f"error: {type(exc).__name__}: {exc}", **base) for e in active]

    rows = []
    for est in active:
        t0 = time.perf_counter()
        try:
            out = run_estimator(est, model)
            err = nmse(out.h, h_true)
            prec, rec = support_precision_recall(out.support, true_sup)
            rows.append(
                TrialResult(
                    est.name,
                    status=out.status,
                    nmse=err,
                    nmse_db=10 * math.log10(err) if err > 0 else -math.inf,
                    support_precision=prec,
                    support_recall=rec,
                    n_support=int(len(out.support)),
                    iterations=int(out.iterations),
                    runtime=time.perf_counter() - t0,
                    **base,
                )
            )
        except Exception as exc:
            rows.append(
                TrialResult(est.name, status=f"error: {type(exc).__name__}: {exc}", runtime=time.perf_counter() - t0, **base)
            )
    return rows


def _units(spec: ExperimentSpec):
    return [
        (t, si, sp, oi, ov, ni, snr)
        for t in range(spec.n_trials)
        for si, sp in enumerate(spec.speeds)
        for oi, ov in enumerate(spec.overheads)
        for ni, snr in enumerate(spec.snr_grid)
        if any(e.runs_at(ov) for e in spec.estimators)
    ]


def _sort_key(spec: ExperimentSpec):
    order = {e.name: i for i, e in enumerate(spec.estimators)}
    order[PERFECT] = -1
    return lambda r: (order[r.estimator], r.snr_db, r.speed, r.overhead, r.trial)


def aggregate_trials(rows: list[TrialResult], spec: ExperimentSpec) -> dict:
    """Per-cell medians (robust to divergent outliers)."""
    cells: dict[tuple, list[TrialResult]] = {}
    for r in rows:
        cells.setdefault((r.estimator, r.snr_db, r.speed, r.overhead), []).append(r)
    out = []
    for (name, snr, speed, overhead), rs in cells.items():
        ok = [r for r in rs if not r.status.startswith("error")]
        out.append(
            {
                "estimator": name,
                "snr_db": snr,
                "speed": speed,
                "overhead": overhead,
                "n_trials": len(rs),
                "n_ok": len(ok),
                "median_nmse": _median([r.nmse for r in ok]),
                "median_nmse_db": _median([r.nmse_db for r in ok]),
                "median_support_precision": _median([r.support_precision for r in ok]),
                "median_support_recall": _median([r.support_recall for r in ok]),
                "median_iterations": _median([float(r.iterations) for r in ok]),
            }
        )
    return {
        "schema_version": SCHEMA_VERSION,
        "csv_columns": list(TRIAL_COLUMNS),
        "spec": spec.to_dict(),
        "cells": out,
    }


def run_experiment(spec: ExperimentSpec, output_dir=None, threads: int = 1) -> ExperimentResult:
    """Run the NMSE / support sweep.

    Writes ``trials.csv`` (one row per estimator and trial, canonical order,
    byte-identical across runs), ``timings.csv`` (wall-clock runtimes, kept
    apart because they are not reproducible) and ``aggregate.json``.
    """
    check_memory(spec)
    out_dir = output_dir if output_dir is not None else spec.output_path
    out = _prepare_output(out_dir) if out_dir is not None else None
    results = _map_units(_units(spec), lambda u: _nmse_unit(spec, u), threads)
    rows = sorted((r for rs in results for r in rs), key=_sort_key(spec))
    agg = aggregate_trials(rows, spec)
    if out is not None:
        _write_csv(out / "trials.csv", TRIAL_COLUMNS, [r.row() for r in rows])
        keys = ("estimator", "snr_db", "speed", "overhead", "trial")
        _write_csv(out / "timings.csv", keys + ("runtime",), [[getattr(r, k) for k in keys + ("runtime",)] for r in rows])
        (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True))
    return ExperimentResult(rows, agg, out)


def read_trials(path) -> list[dict]:
    """Read a ``trials.csv`` back with numeric columns converted."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("snr_db", "speed", "overhead", "nmse", "nmse_db", "support_precision", "support_recall"):
            r[k] = float(r[k])
        for k in ("trial", "seed", "n_support", "iterations"):
            r[k] = int(r[k])
    return rows


# ---------------------------------------------------------------------------
# BER


def precoder(cfg: OtfsConfig, seed: int) -> np.ndarray:
    """Random unit-modulus single-stream precoder with unit total power."""
    rng = np.random.default_rng(seed)
    return np.exp(2j * np.pi * rng.random(cfg.n_tx)) / math.sqrt(cfg.n_tx)


def physical_dd_matrix(paths: PathSet, weights: np.ndarray, cfg: OtfsConfig, batch: int = 256) -> np.ndarray:
    """Exact DD-domain matrix of the precoded physical chain, built column by
    column from unit DD impulses (includes every effect the sparse model
    approximates)."""
    m = cfg.n_measurements
    H = np.empty((m, m), dtype=complex)
    for start in range(0, m, batch):
        idx = np.arange(start, min(start + batch, m))
        grids = np.zeros((len(idx), m), dtype=complex)
        grids[np.arange(len(idx)), idx] = 1.0
        s = otfs_modulate(grids.reshape(len(idx), *cfg.grid_shape), cfg)
        r = apply_channel(weights[None, :, None] * s[:, None, :], paths, cfg)
        H[:, idx] = otfs_demodulate(r, cfg).reshape(len(idx), m).T
    return H


def physical_tf_blocks(paths: PathSet, weights: np.ndarray, cfg: OtfsConfig) -> np.ndarray:
    """Per-symbol time-frequency blocks of the precoded physical chain.

    Without inter-symbol interference, exciting subcarrier ``m'`` on every
    symbol at once yields column ``m'`` of all blocks in one pass.
    """
    nl, nk = cfg.grid_shape
    tf = np.zeros((nl, nl, nk), dtype=complex)
    tf[np.arange(nl), np.arange(nl), :] = 1.0
    s = otfs_modulate(sfft(tf), cfg)
    r = apply_channel(weights[None, :, None] * s[:, None, :], paths, cfg)
    out = isfft(otfs_demodulate(r, cfg))  # (m', m, n)
    return np.transpose(out, (2, 1, 0))


def tf_blocks(H: np.ndarray, cfg: OtfsConfig) -> np.ndarray:
    """Per-symbol time-frequency blocks of a DD-domain matrix.

    With one CP per OFDM symbol and delays inside it there is no inter-symbol
    interference, so ``U H U^H`` (``U`` the unitary ISFFT) is block diagonal
    with one ``N_l x N_l`` block per symbol. Returns shape ``(N_k, N_l, N_l)``.
    """
    nl, nk = cfg.grid_shape
    m = nl * nk
    A = isfft(H.T.reshape(m, nl, nk)).reshape(m, m).T  # U H
    T = np.conj(isfft(np.conj(A).reshape(m, nl, nk)).reshape(m, m))  # U H U^H
    T4 = T.reshape(nl, nk, nl, nk)
    return np.stack([T4[:, n, :, n] for n in range(nk)])


def mmse_equalize(H: np.ndarray, y: np.ndarray, noise_var: float) -> np.ndarray:
    """Linear MMSE estimate of unit-power symbols ``x`` from ``y = H x + w``."""
    G = H.conj().T @ H
    G[np.diag_indices_from(G)] += max(noise_var, 1e-300)
    return scipy.linalg.solve(G, H.conj().T @ y, assume_a="pos")


def mmse_equalize_tf(B: np.ndarray, y: np.ndarray, noise_var: float, cfg: OtfsConfig) -> np.ndarray:
    """:func:`mmse_equalize` for an ISI-free channel given by its per-symbol
    time-frequency blocks ``B`` (see :func:`tf_blocks`); exact since the
    ISFFT is unitary."""
    nl, nk = cfg.grid_shape
    reg = max(noise_var, 1e-300)
    Bh = np.conj(np.swapaxes(B, -1, -2))
    y_tf = isfft(y.reshape(nl, nk)).T[..., None]  # (n, m, 1)
    G = Bh @ B + reg * np.eye(nl)
    x_tf = np.linalg.solve(G, Bh @ y_tf)[..., 0].T
    return sfft(x_tf).reshape(-1)


def qpsk_bits(symbols: np.ndarray) -> np.ndarray:
    """Gray hard decisions matching :func:`~otfs_jspl.measurement.qpsk`."""
    s = np.ravel(symbols)
    return np.stack([s.real < 0, s.imag < 0], axis=-1).astype(np.int8)


def _ber_unit(spec: ExperimentSpec, unit) -> list[dict]:
    trial, si, speed = unit
    cfg = spec.cfg
    ch_seed = derive_seed(spec.seed, _CHANNEL, trial)
    rows = []
    paths = _paths(spec, speed, ch_seed)
    h_true = flatten_dda(dda_channel(paths, cfg, receiver_aligned=True))
    w = precoder(cfg, derive_seed(spec.seed, _DATA, trial, 0))
    B_true = physical_tf_blocks(paths, w, cfg)
    for ni, snr in enumerate(spec.snr_grid):
        rng = np.random.default_rng(derive_seed(spec.seed, _DATA, trial, 1, si, ni))
        bits = rng.integers(0, 2, size=(cfg.n_measurements, 2))
        x = ((1 - 2 * bits[:, 0]) + 1j * (1 - 2 * bits[:, 1])) / math.sqrt(2)
        y_clean = sfft(np.einsum("nab,nb->an", B_true, isfft(x.reshape(cfg.grid_shape)).T)).reshape(-1)
        power = float(np.mean(np.abs(y_clean) ** 2))
        noise_var = 0.0 if math.isinf(snr) else power / 10 ** (snr / 10)
        y = y_clean + complex_noise(rng, y_clean.shape, noise_var) if noise_var > 0 else y_clean
        base = dict(snr_db=snr, speed=speed, trial=trial, seed=ch_seed)

        def score(name, B, overhead, err, status="ok"):
            x_hat = mmse_equalize_tf(B, y, noise_var, cfg)
            n_err = int(np.count_nonzero(qpsk_bits(x_hat) != bits))
            rows.append(
                dict(estimator=name, overhead=overhead, status=status, bit_errors=n_err,
                     n_bits=bits.size, ber=n_err / bits.size, nmse=err, **base)
            )

        score(PERFECT, B_true, 0.0, 0.0)
        for oi, overhead in enumerate(spec.overheads):
            active = [e for e in spec.estimators if e.runs_at(overhead)]
            if not active:
                continue
            pilots = make_pilot_pattern(cfg, overhead, derive_seed(spec.seed, _PILOT, trial, oi))
            model = observe(paths, pilots, cfg, snr, derive_seed(spec.seed, _NOISE, trial, si, oi, ni))
            for est in active:
                try:
                    out = run_estimator(est, model)
                    B_hat = effective_tf_blocks(unflatten_dda(out.h, cfg), w, cfg)
                    score(est.name, B_hat, overhead, nmse(out.h, h_true), out.status)
                except Exception as exc:
                    rows.append(
                        dict(estimator=est.name, overhead=overhead, status=f"error: {type(exc).__name__}: {exc}",
                             bit_errors=0, n_bits=0, ber=math.nan, nmse=math.nan, **base)
                    )
    return rows


def ber_interval(bers) -> tuple[float, float]:
    """Mean and two-sided 95 % normal-approximation half-width over trials."""
    b = np.asarray([v for v in bers if not math.isnan(v)], dtype=float)
    if b.size == 0:
        return math.nan, math.nan
    half = 1.96 * b.std(ddof=1) / math.sqrt(b.size) if b.size > 1 else math.inf
    return float(b.mean()), float(half)


def run_ber(spec: ExperimentSpec, output_dir=None, threads: int = 1, detector: str = "mmse") -> ExperimentResult:
    """Uncoded QPSK BER with each estimator's channel and with the exact
    physical channel (lower bound). Each data frame fills the whole DD grid
    and is sent as one precoded stream; detection is linear MMSE in the DD
    domain. Writes ``ber.csv`` and ``ber_aggregate.json``."""
    if detector != "mmse":
        raise ValueError("only the 'mmse' detector is available")
    check_memory(spec)
    out_dir = output_dir if output_dir is not None else spec.output_path
    out = _prepare_output(out_dir) if out_dir is not None else None
    units = [(t, si, sp) for t in range(spec.n_trials) for si, sp in enumerate(spec.speeds)]
    results = _map_units(units, lambda u: _ber_unit(spec, u), threads)
    order = {e.name: i for i, e in enumerate(spec.estimators)}
    order[PERFECT] = -1
    rows = sorted(
        (r for rs in results for r in rs),
        key=lambda r: (order[r["estimator"]], r["snr_db"], r["speed"], r["overhead"], r["trial"]),
    )
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        cells.setdefault((r["estimator"], r["snr_db"], r["speed"], r["overhead"]), []).append(r)
    agg_cells = []
    for (name, snr, speed, overhead), rs in cells.items():
        mean, half = ber_interval([r["ber"] for r in rs])
        agg_cells.append(
            {"estimator": name, "snr_db": snr, "speed": speed, "overhead": overhead, "n_trials": len(rs),
             "mean_ber": mean, "ci95_half_width": half, "median_nmse": _median([r["nmse"] for r in rs])}
        )
    agg = {"schema_version": SCHEMA_VERSION, "csv_columns": list(BER_COLUMNS), "spec": spec.to_dict(), "cells": agg_cells}
    if out is not None:
        _write_csv(out / "ber.csv", BER_COLUMNS, [[r[c] for c in BER_COLUMNS] for r in rows])
        (out / "ber_aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True))
    return ExperimentResult(rows, agg, out)


# ---------------------------------------------------------------------------
# support maps


@dataclass(frozen=True)
class SupportMapTrial:
    """A single JSPL trial to visualize."""

    cfg: OtfsConfig = field(default_factory=OtfsConfig)
    n_paths: int = 4
    speed: float = 100.0
    snr_db: float = 20.0
    overhead: float = 0.2
    seed: int = 0
    on_grid: bool = False
    burst_angles: bool = False
    jspl: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, d: dict) -> "SupportMapTrial":
        kw = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        kw["cfg"] = OtfsConfig.from_dict(d.get("cfg", {}))
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cfg"] = self.cfg.to_dict()
        return d


def export_support_map(trial: SupportMapTrial | dict) -> dict:
    """Run JSPL on one trial and pair the true and learned Doppler-angle maps.

    The true map is ``|h|`` normalized to its peak; the learned map is the
    sparsity tensor. Both are given per delay tap (union of the taps holding
    true energy and the detected taps) and as a max projection over delay.
    """
    if isinstance(trial, dict):
        trial = SupportMapTrial.from_dict(trial)
    cfg = trial.cfg
    spec = ExperimentSpec(cfg=cfg, n_paths=trial.n_paths, on_grid=trial.on_grid, burst_angles=trial.burst_angles)
    paths = _paths(spec, trial.speed, trial.seed)
    h = dda_channel(paths, cfg, receiver_aligned=True)
    pilots = make_pilot_pattern(cfg, trial.overhead, trial.seed)
    model = observe(paths, pilots, cfg, trial.snr_db, trial.seed)
    jcfg = JsplConfig.from_dict(trial.jspl)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = run_jspl(model, jcfg)
    mag = np.abs(h)
    peak = mag.max()
    true_map = mag / peak if peak > 0 else mag
    true_taps = sorted({int(l) for l in np.flatnonzero(true_map.max(axis=(1, 2)) > 1e-9)})
    taps = sorted(set(true_taps) | set(res.support.delay_taps))
    return {
        "schema_version": SCHEMA_VERSION,
        "trial": trial.to_dict(),
        "doppler_indices": cfg.doppler_indices().tolist(),
        "angle_indices": cfg.angle_indices().tolist(),
        "threshold": jcfg.eps2_entry,
        "true_taps": true_taps,
        "detected_taps": list(res.support.delay_taps),
        "true_map": true_map.max(axis=0).tolist(),
        "learned_map": res.lam.max(axis=0).tolist(),
        "per_tap": [
            {"delay": l, "true": true_map[l].tolist(), "learned": res.lam[l].tolist()} for l in taps
        ],
        "status": res.status,
    }
