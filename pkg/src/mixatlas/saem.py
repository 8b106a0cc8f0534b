"""Stochastic-approximation EM with truncation on random boundaries."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .errors import ChainDiverged, EmptyDataset
from .kernels import Geometry
from .params import (
    AbsorbingBounds, ComponentParams, HiddenState, Hyperparams, ModelParams, SufficientStats,
    absorbing_bounds, expected_objective, in_absorbing_set, m_step, sa_update, sufficient_stats,
)
from .rng import INIT, CounterRNG
from .sampler import sample_hidden

log = logging.getLogger(__name__)

INIT_RIDGE = 1e-3


@dataclass
class SaemConfig:
    k_max: int = 200
    k_heat: int = 150
    step_exponent: float = 0.6
    J: int = 50
    J_growth: bool = False
    compact_radius0: float | None = None
    compact_growth: float = 2.0
    kappa_max: int = 64
    seed: int = 0
    sigma_fixed: bool | None = None
    init_sigma2: float = 1.0
    threads: int = 1

    def __post_init__(self):
        if self.k_max < 1 or self.k_heat < 0 or self.J < 1:
            raise ValueError("k_max and J must be positive, k_heat non-negative")
        if not 0.5 < self.step_exponent <= 1.0:
            raise ValueError("step_exponent must lie in (0.5, 1]")
        if not self.compact_growth > 1.0:
            raise ValueError("compact_growth must exceed 1")
        if self.compact_radius0 is not None and not self.compact_radius0 > 0:
            raise ValueError("compact_radius0 must be positive")
        if not self.init_sigma2 > 0:
            raise ValueError("init_sigma2 must be positive")


def step_size(k: int, config: SaemConfig) -> float:
    """1 during the heating period, then ``(k - k_heat)^-exponent``."""
    if k < 1:
        raise ValueError("iterations are numbered from 1")
    if k <= config.k_heat:
        return 1.0
    return float((k - config.k_heat) ** (-config.step_exponent))


def chain_length(k: int, config: SaemConfig) -> int:
    if config.J_growth:
        return config.J * math.ceil(math.sqrt(k))
    return config.J


@dataclass(frozen=True)
class StatScales:
    """Per-block normalisers of the compact-set norm."""

    s0: float
    s1: float
    s2: float
    s3: float
    s4: float

    @classmethod
    def from_data(cls, bounds: AbsorbingBounds, hyper: Hyperparams) -> "StatScales":
        tiny = 1e-300
        return cls(max(bounds.n, tiny), max(bounds.s1, tiny), max(bounds.s2, tiny),
                   max(bounds.n * float(np.trace(hyper.sigma_g_mat)), tiny),
                   max(bounds.s4, tiny))


def stat_norm(s: SufficientStats, scales: StatScales) -> float:
    total = 0.0
    for t in range(s.tau_m):
        total += abs(s.s0[t]) / scales.s0
        total += np.linalg.norm(s.s1[t]) / scales.s1
        total += np.linalg.norm(s.s2[t]) / scales.s2
        total += np.linalg.norm(s.s3[t]) / scales.s3
        total += abs(s.s4[t]) / scales.s4
    return float(total)


def compact_radius(kappa: int, config: SaemConfig, tau_m: int) -> float:
    r0 = config.compact_radius0
    if r0 is None:
        r0 = 10.0 * 5 * tau_m
    return r0 * config.compact_growth ** kappa


def compact_set_contains(s: SufficientStats, kappa: int, config: SaemConfig,
                         scales: StatScales) -> bool:
    """Closed-ball membership in the ``kappa``-th compact set."""
    return stat_norm(s, scales) <= compact_radius(kappa, config, s.tau_m)


@dataclass
class SaemState:
    hidden: HiddenState
    s: SufficientStats
    kappa: int
    k: int
    eta: ModelParams


@dataclass
class Trace:
    tau_m: int
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        cols = ["k", "delta", "J", "kappa", "truncated", "in_absorbing", "log_posterior",
                "step_norm"]
        for name in ("sigma2", "rho", "count", "accept"):
            cols += [f"{name}_{t + 1}" for t in range(self.tau_m)]
        return cols

    def append(self, row: dict) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)

    def to_text(self, sep: str = "\t") -> str:
        cols = self.columns
        lines = [sep.join(cols)]
        for r in self.rows:
            lines.append(sep.join(_fmt(r[c]) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def initial_params(data: np.ndarray, geometry: Geometry, hyper: Hyperparams,
                   config: SaemConfig) -> ModelParams:
    """Every template starts as the kernel fit of the mean training image."""
    k0 = geometry.design0
    lhs = k0.T @ k0 + INIT_RIDGE * hyper.precision_p
    alpha0 = np.linalg.solve(lhs, k0.T @ data.mean(0))
    comps = [ComponentParams(alpha0.copy(), config.init_sigma2, hyper.sigma_g_mat.copy())
             for _ in range(hyper.tau_m)]
    return ModelParams(comps, np.full(hyper.tau_m, 1.0 / hyper.tau_m))


class SaemEngine:
    """Holds the fixed context of one run and advances its state."""

    def __init__(self, data, geometry: Geometry, hyper: Hyperparams, config: SaemConfig):
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[0] == 0:
            raise EmptyDataset("training requires at least one image")
        if config.sigma_fixed is not None and config.sigma_fixed != hyper.sigma_fixed:
            hyper = Hyperparams(**{f.name: getattr(hyper, f.name) for f in fields(hyper)
                                   if f.name != "sigma_fixed"}, sigma_fixed=config.sigma_fixed)
        self.data = data
        self.geometry = geometry
        self.hyper = hyper
        self.config = config
        self.rng = CounterRNG(config.seed)
        self.bounds = absorbing_bounds(data, geometry.k_p)
        self.scales = StatScales.from_data(self.bounds, hyper)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def stats(self, hidden: HiddenState) -> SufficientStats:
        return sufficient_stats(self.data, hidden, self.geometry, self.hyper.tau_m)

    def initial_state(self, eta0: ModelParams | None = None) -> SaemState:
        gen = self.rng.generator(0, 0, INIT)
        tau0 = gen.integers(0, self.hyper.tau_m, size=self.n)
        hidden = HiddenState(np.zeros((self.n, 2 * self.geometry.k_g)), tau0)
        s0 = self.stats(hidden)
        eta = initial_params(self.data, self.geometry, self.hyper, self.config) \
            if eta0 is None else eta0.copy()
        return SaemState(hidden, s0, 0, 0, eta)

    def reinitialisation(self, tau: np.ndarray) -> tuple[SufficientStats, HiddenState]:
        hidden = HiddenState(np.zeros((self.n, 2 * self.geometry.k_g)), tau.copy())
        return self.stats(hidden), hidden

    def iterate(self, state: SaemState, delta: float | None = None) -> tuple[SaemState, dict]:
        k = state.k + 1
        cfg = self.config
        J = chain_length(k, cfg)
        delta = step_size(k, cfg) if delta is None else delta
        res = sample_hidden(self.data, state.eta, J, self.geometry, self.rng, iteration=k,
                            threads=cfg.threads, keep_chains=False)
        s_draw = self.stats(res.hidden)
        s_bar = sa_update(state.s, s_draw, delta)
        inside = (compact_set_contains(s_bar, state.kappa, cfg, self.scales)
                  and in_absorbing_set(s_bar, bounds=self.bounds))
        if inside:
            s_new, hidden, kappa = s_bar, res.hidden, state.kappa
        else:
            s_new, hidden = self.reinitialisation(res.hidden.tau)
            kappa = state.kappa + 1
            log.warning("iteration %d: statistics left compact set %d; reprojecting", k,
                        state.kappa)
            if kappa > cfg.kappa_max:
                raise ChainDiverged(f"truncation counter exceeded {cfg.kappa_max}")
        eta = m_step(s_new, self.hyper, state.eta, self.n, self.geometry.n_pixels)
        new_state = SaemState(hidden, s_new, kappa, k, eta)

        diff = s_new - state.s
        tau_m = self.hyper.tau_m
        row = {
            "k": k, "delta": delta, "J": J, "kappa": kappa, "truncated": not inside,
            "in_absorbing": in_absorbing_set(s_new, bounds=self.bounds),
            "log_posterior": expected_objective(self.stats(hidden), eta, self.hyper,
                                                self.geometry.n_pixels),
            "step_norm": math.sqrt(sum(float((b * b).sum()) for b in diff.blocks())),
        }
        for t in range(tau_m):
            row[f"sigma2_{t + 1}"] = eta.components[t].sigma2
            row[f"rho_{t + 1}"] = eta.rho[t]
            row[f"count_{t + 1}"] = int((hidden.tau == t).sum())
            row[f"accept_{t + 1}"] = float(res.aux_acceptance[:, t].mean())
        return new_state, row


@dataclass
class TrainResult:
    eta: ModelParams
    trace: Trace
    state: SaemState
    hyper: Hyperparams


def train(data, geometry: Geometry, hyper: Hyperparams, config: SaemConfig,
          eta0: ModelParams | None = None,
          callback: Callable[[SaemState, dict], None] | None = None) -> TrainResult:
    """Run ``config.k_max`` iterations from the default (or given) initial parameters."""
    engine = SaemEngine(data, geometry, hyper, config)
    state = engine.initial_state(eta0)
    trace = Trace(engine.hyper.tau_m)
    for _ in range(config.k_max):
        state, row = engine.iterate(state)
        trace.append(row)
        if callback is not None:
            callback(state, row)
        log.debug("k=%d log_post=%.6g sigma2=%s", row["k"], row["log_posterior"],
                  state.eta.sigma2())
    return TrainResult(state.eta, trace, state, engine.hyper)


def saem_iteration(state: SaemState, data, geometry: Geometry, hyper: Hyperparams,
                   config: SaemConfig, delta: float | None = None) -> SaemState:
    """Single transition of the truncated chain; see :class:`SaemEngine`."""
    return SaemEngine(data, geometry, hyper, config).iterate(state, delta)[0]
