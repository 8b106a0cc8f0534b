"""Model parameters, hyperparameters, sufficient statistics and the M-step.

Statistics are stored as raw sums over images (not divided by the soft
count), so the maximisation formulas read

    rho_t    = (s0_t + a_rho) / (n + tau_m a_rho)
    Gamma_t  = (s3_t + a_g Sigma_g) / (s0_t + a_g)
    alpha_t  : (s2_t + sigma2_t P) alpha = s1_t + sigma2_t P mu_p,   P = Sigma_p^-1
    sigma2_t = (s4_t + a's2a - 2 a's1 + a_p sigma0^2) / (s0_t |Lambda| + a_p)

Component labels are 0-based throughout the library.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DimensionMismatch, InversionFailure, NonPositiveVariance, SingularCovariance
from .kernels import Geometry, build_gram, regularized_inverse, GRAM_RIDGE

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
FIXED_POINT_TOL = 1e-8
FIXED_POINT_MAXITER = 100
ABSORBING_SLACK = 1e-9


@dataclass
class ComponentParams:
    alpha: np.ndarray
    sigma2: float
    gamma_g: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.gamma_g = np.asarray(self.gamma_g, dtype=float)
        self.sigma2 = float(self.sigma2)
        if not self.sigma2 > 0:
            raise NonPositiveVariance(f"sigma2 must be positive, got {self.sigma2}")
        if self.gamma_g.ndim != 2 or self.gamma_g.shape[0] != self.gamma_g.shape[1]:
            raise DimensionMismatch("gamma_g must be a square matrix")

    def copy(self) -> "ComponentParams":
        return ComponentParams(self.alpha.copy(), self.sigma2, self.gamma_g.copy())


@dataclass
class ModelParams:
    components: list[ComponentParams]
    rho: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        if self.rho.shape != (len(self.components),):
            raise DimensionMismatch("rho must have one weight per component")
        if np.any(self.rho < 0) or abs(self.rho.sum() - 1.0) > 1e-12:
            raise ValueError(f"rho must be a probability vector, got {self.rho}")

    @property
    def tau_m(self) -> int:
        return len(self.components)

    def sigma2(self) -> np.ndarray:
        return np.array([c.sigma2 for c in self.components])

    def alphas(self) -> np.ndarray:
        return np.stack([c.alpha for c in self.components])

    def gammas(self) -> np.ndarray:
        return np.stack([c.gamma_g for c in self.components])

    def copy(self) -> "ModelParams":
        return ModelParams([c.copy() for c in self.components], self.rho.copy())

    def permuted(self, order) -> "ModelParams":
        order = list(order)
        return ModelParams([self.components[i].copy() for i in order], self.rho[order].copy())


@dataclass
class Hyperparams:
    mu_p: np.ndarray
    sigma_p_mat: np.ndarray
    a_p: float
    sigma0_2: float
    sigma_g_mat: np.ndarray
    a_g: float
    a_rho: float
    tau_m: int
    R: float = 1e6
    sigma_fixed: bool = False
    precision_p: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mu_p = np.asarray(self.mu_p, dtype=float)
        self.sigma_p_mat = np.asarray(self.sigma_p_mat, dtype=float)
        self.sigma_g_mat = np.asarray(self.sigma_g_mat, dtype=float)
        k_p = self.mu_p.shape[0]
        if self.sigma_p_mat.shape != (k_p, k_p):
            raise DimensionMismatch("sigma_p_mat must be k_p x k_p")
        two_kg = self.sigma_g_mat.shape[0]
        if self.sigma_g_mat.shape != (two_kg, two_kg) or two_kg % 2:
            raise DimensionMismatch("sigma_g_mat must be 2k_g x 2k_g")
        if self.a_p < 3:
            raise ValueError(f"a_p must be >= 3, got {self.a_p}")
        if self.a_g < 2 * two_kg + 1:
            raise ValueError(f"a_g must be >= 4 k_g + 1 = {2 * two_kg + 1}, got {self.a_g}")
        if not (self.a_rho > 0 and self.sigma0_2 > 0 and self.tau_m >= 1 and self.R > 0):
            raise ValueError("a_rho, sigma0_2, tau_m and R must be positive")
        if self.precision_p is None:
            try:
                self.precision_p = np.linalg.inv(self.sigma_p_mat)
            except np.linalg.LinAlgError as exc:
                raise InversionFailure("sigma_p_mat is singular") from exc
        self.precision_p = np.asarray(self.precision_p, dtype=float)

    @property
    def k_p(self) -> int:
        return self.mu_p.shape[0]

    @property
    def k_g(self) -> int:
        return self.sigma_g_mat.shape[0] // 2

    @classmethod
    def from_geometry(cls, geometry: Geometry, tau_m: int, *, a_p: float = 3.0,
                      sigma0_2: float = 1.0, a_g: float | None = None, a_rho: float = 1.0,
                      sigma_g_scale: float = 1.0, sigma_fixed: bool = False,
                      R: float = 1e6) -> "Hyperparams":
        """Kernel-induced priors: ``Sigma_p = M_p^-1`` and ``Sigma_g = scale * M_g^-1``.

        ``M_g^-1`` acts on each coordinate block of beta separately.
        """
        cfg = geometry.config
        m_p = build_gram(geometry.p_landmarks, cfg.sigma_p)
        m_g = build_gram(geometry.g_landmarks, cfg.sigma_g)
        k_g = geometry.k_g
        sigma_g = sigma_g_scale * np.kron(np.eye(2), regularized_inverse(m_g))
        return cls(
            mu_p=np.zeros(geometry.k_p),
            sigma_p_mat=regularized_inverse(m_p),
            precision_p=m_p + GRAM_RIDGE * np.eye(geometry.k_p),
            a_p=a_p,
            sigma0_2=sigma0_2,
            sigma_g_mat=0.5 * (sigma_g + sigma_g.T),
            a_g=float(4 * k_g + 1) if a_g is None else a_g,
            a_rho=a_rho,
            tau_m=tau_m,
            R=R,
            sigma_fixed=sigma_fixed,
        )


@dataclass
class HiddenState:
    """Per-image deformation coefficients (n, 2k_g) and 0-based labels (n,)."""

    beta: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.tau = np.asarray(self.tau, dtype=np.int64)
        if self.beta.ndim != 2 or self.tau.shape != (self.beta.shape[0],):
            raise DimensionMismatch("beta must be (n, 2k_g) and tau (n,)")
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("beta entries must be finite")

    def copy(self) -> "HiddenState":
        return HiddenState(self.beta.copy(), self.tau.copy())


@dataclass
class SufficientStats:
    s0: np.ndarray  # (T,)
    s1: np.ndarray  # (T, k_p)
    s2: np.ndarray  # (T, k_p, k_p)
    s3: np.ndarray  # (T, 2k_g, 2k_g)
    s4: np.ndarray  # (T,)

    FIELDS = ("s0", "s1", "s2", "s3", "s4")

    @classmethod
    def zeros(cls, tau_m: int, k_p: int, k_g: int) -> "SufficientStats":
        return cls(np.zeros(tau_m), np.zeros((tau_m, k_p)), np.zeros((tau_m, k_p, k_p)),
                   np.zeros((tau_m, 2 * k_g, 2 * k_g)), np.zeros(tau_m))

    @property
    def tau_m(self) -> int:
        return self.s0.shape[0]

    def blocks(self):
        return [getattr(self, f) for f in self.FIELDS]

    def copy(self) -> "SufficientStats":
        return SufficientStats(*(b.copy() for b in self.blocks()))

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(*(a + b for a, b in zip(self.blocks(), other.blocks())))

    def __sub__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(*(a - b for a, b in zip(self.blocks(), other.blocks())))

    def scaled(self, c: float) -> "SufficientStats":
        return SufficientStats(*(c * b for b in self.blocks()))

    def equals(self, other: "SufficientStats") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.blocks(), other.blocks()))


def _check_dims(y: np.ndarray, beta: np.ndarray, comp: ComponentParams, geometry: Geometry):
    if y.shape[-1] != geometry.n_pixels:
        raise DimensionMismatch(f"image has {y.shape[-1]} pixels, grid has {geometry.n_pixels}")
    if beta.shape[-1] != 2 * geometry.k_g:
        raise DimensionMismatch("beta length does not match 2 k_g")
    if comp.alpha.shape != (geometry.k_p,):
        raise DimensionMismatch("alpha length does not match k_p")


def image_loglik(y, beta, comp: ComponentParams, geometry: Geometry) -> float:
    """Gaussian log-density of one image given its deformation and component."""
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    _check_dims(y, beta, comp, geometry)
    resid = y - geometry.design(beta) @ comp.alpha
    return float(-0.5 * y.size * math.log(2 * math.pi * comp.sigma2)
                 - (resid @ resid) / (2.0 * comp.sigma2))


def _chol(gamma: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(gamma)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("deformation covariance is not positive definite") from exc


def gaussian_logpdf(beta: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Centred Gaussian log-density; ``beta`` may carry a leading batch axis."""
    c = _chol(gamma)
    w = linalg.solve_triangular(c, np.atleast_2d(beta).T, lower=True)
    logdet = 2.0 * np.log(np.diag(c)).sum()
    out = -0.5 * gamma.shape[0] * LOG_2PI - 0.5 * logdet - 0.5 * (w * w).sum(0)
    return out if np.ndim(beta) > 1 else float(out[0])


def complete_loglik(data, hidden: HiddenState, eta: ModelParams, geometry: Geometry) -> float:
    data = np.asarray(data, dtype=float)
    if not np.all((hidden.tau >= 0) & (hidden.tau < eta.tau_m)):
        raise ValueError("labels out of range")
    total = 0.0
    for y, b, t in zip(data, hidden.beta, hidden.tau):
        comp = eta.components[t]
        total += (image_loglik(y, b, comp, geometry) + gaussian_logpdf(b, comp.gamma_g)
                  + math.log(eta.rho[t]))
    return total


def sufficient_stats(data, hidden: HiddenState, geometry: Geometry, tau_m: int) -> SufficientStats:
    data = np.asarray(data, dtype=float)
    if data.shape != (hidden.beta.shape[0], geometry.n_pixels):
        raise DimensionMismatch("data must be (n, |Lambda|) and match the hidden state")
    s = SufficientStats.zeros(tau_m, geometry.k_p, geometry.k_g)
    if data.shape[0] == 0:
        return s
    designs = geometry.design(hidden.beta)
    for y, k, b, t in zip(data, designs, hidden.beta, hidden.tau):
        s.s0[t] += 1.0
        s.s1[t] += k.T @ y
        s.s2[t] += k.T @ k
        s.s3[t] += np.outer(b, b)
        s.s4[t] += y @ y
    return s


def sa_update(s: SufficientStats, s_new: SufficientStats, delta: float) -> SufficientStats:
    """``s + delta (s_new - s)``; returns ``s_new`` itself (a copy) when delta == 1."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"step size must lie in [0, 1], got {delta}")
    if delta == 1.0:
        return s_new.copy()
    return SufficientStats(*(a + delta * (b - a) for a, b in zip(s.blocks(), s_new.blocks())))


def _solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return linalg.solve(a, b, assume_a="pos")
    except (np.linalg.LinAlgError, linalg.LinAlgError) as exc:
        raise InversionFailure("photometric system is singular") from exc


def _alpha_given_sigma(s1, s2, sigma2, hyper: Hyperparams) -> np.ndarray:
    p = hyper.precision_p
    lhs = s2 + sigma2 * p
    return _solve_spd(0.5 * (lhs + lhs.T), s1 + sigma2 * (p @ hyper.mu_p))


def _sigma_given_alpha(s0, s1, s2, s4, alpha, hyper: Hyperparams, n_pixels: int) -> float:
    rss = s4 + alpha @ s2 @ alpha - 2.0 * alpha @ s1
    return float((rss + hyper.a_p * hyper.sigma0_2) / (s0 * n_pixels + hyper.a_p))


def m_step(s: SufficientStats, hyper: Hyperparams, prev: ModelParams, n_images: int,
           n_pixels: int) -> ModelParams:
    """Closed-form maximiser of the penalised complete-data objective given ``s``."""
    tau_m = s.tau_m
    rho = (s.s0 + hyper.a_rho) / (n_images + tau_m * hyper.a_rho)
    rho = rho / rho.sum()
    comps = []
    for t in range(tau_m):
        gamma = (s.s3[t] + hyper.a_g * hyper.sigma_g_mat) / (s.s0[t] + hyper.a_g)
        gamma = 0.5 * (gamma + gamma.T)
        sigma2 = prev.components[t].sigma2
        alpha = _alpha_given_sigma(s.s1[t], s.s2[t], sigma2, hyper)
        if not hyper.sigma_fixed:
            for _ in range(FIXED_POINT_MAXITER):
                new_sigma2 = _sigma_given_alpha(s.s0[t], s.s1[t], s.s2[t], s.s4[t], alpha,
                                                hyper, n_pixels)
                if not (np.isfinite(new_sigma2) and new_sigma2 > 0):
                    raise NonPositiveVariance(f"component {t}: sigma2 update gave {new_sigma2}")
                new_alpha = _alpha_given_sigma(s.s1[t], s.s2[t], new_sigma2, hyper)
                d_sig = abs(new_sigma2 - sigma2) / sigma2
                d_alpha = np.linalg.norm(new_alpha - alpha) / max(np.linalg.norm(alpha), 1e-300)
                sigma2, alpha = new_sigma2, new_alpha
                if d_sig < FIXED_POINT_TOL and d_alpha < FIXED_POINT_TOL:
                    break
        if np.linalg.norm(alpha) >= hyper.R:
            log.warning("component %d: |alpha| = %.3g exceeds R = %.3g", t,
                        np.linalg.norm(alpha), hyper.R)
        comps.append(ComponentParams(alpha, sigma2, gamma))
    return ModelParams(comps, rho)


def log_posterior_penalty(eta: ModelParams, hyper: Hyperparams) -> float:
    """Sum of the log prior densities of every parameter, up to one constant."""
    total = 0.0
    for comp in eta.components:
        d = comp.alpha - hyper.mu_p
        total += -0.5 * d @ hyper.precision_p @ d
        total += -hyper.a_p * (hyper.sigma0_2 / (2.0 * comp.sigma2) + 0.5 * math.log(comp.sigma2))
        c = _chol(comp.gamma_g)
        gi_sg = linalg.cho_solve((c, True), hyper.sigma_g_mat)
        logdet = 2.0 * np.log(np.diag(c)).sum()
        total += -0.5 * hyper.a_g * (np.trace(gi_sg) + logdet)
    total += hyper.a_rho * float(np.log(eta.rho).sum())
    return float(total)


def expected_objective(s: SufficientStats, eta: ModelParams, hyper: Hyperparams,
                       n_pixels: int) -> float:
    """``L(s; eta)`` plus the log priors: the quantity the M-step maximises.

    Equals ``complete_loglik + log_posterior_penalty`` when ``s`` is the
    statistic of a single hidden configuration.
    """
    total = 0.0
    k_g = hyper.k_g
    for t, comp in enumerate(eta.components):
        a = comp.alpha
        rss = s.s4[t] - 2.0 * a @ s.s1[t] + a @ s.s2[t] @ a
        total += -0.5 * s.s0[t] * n_pixels * math.log(2 * math.pi * comp.sigma2)
        total += -rss / (2.0 * comp.sigma2)
        c = _chol(comp.gamma_g)
        logdet = 2.0 * np.log(np.diag(c)).sum()
        total += -s.s0[t] * (k_g * LOG_2PI + 0.5 * logdet)
        total += -0.5 * np.trace(linalg.cho_solve((c, True), s.s3[t]))
        total += s.s0[t] * math.log(eta.rho[t])
    return float(total + log_posterior_penalty(eta, hyper))


@dataclass(frozen=True)
class AbsorbingBounds:
    n: float
    s1: float
    s2: float
    s4: float


def absorbing_bounds(data, k_p: int) -> AbsorbingBounds:
    """Upper bounds of the convex set the statistics can never leave.

    Every entry of a design matrix lies in (0, 1], so its Frobenius norm is at
    most ``sqrt(|Lambda| k_p)``; the bounds on s1 and s2 carry that factor.
    """
    data = np.asarray(data, dtype=float)
    n, n_pix = data.shape
    y_norm2 = float((data * data).sum())
    c = n_pix * k_p
    return AbsorbingBounds(n=float(n), s1=math.sqrt(c * n * y_norm2), s2=float(n * c),
                           s4=y_norm2)


def in_absorbing_set(s: SufficientStats, data=None, bounds: AbsorbingBounds | None = None) -> bool:
    if bounds is None:
        bounds = absorbing_bounds(data, s.s1.shape[1])

    def ok(v, hi):
        return v <= hi + ABSORBING_SLACK * (1.0 + hi)

    for t in range(s.tau_m):
        if not (s.s0[t] >= -ABSORBING_SLACK and ok(s.s0[t], bounds.n)):
            return False
        if not ok(np.linalg.norm(s.s1[t]), bounds.s1):
            return False
        if not ok(np.linalg.norm(s.s2[t]), bounds.s2):
            return False
        if not (s.s4[t] >= -ABSORBING_SLACK and ok(s.s4[t], bounds.s4)):
            return False
        s3 = s.s3[t]
        if not np.allclose(s3, s3.T, rtol=0, atol=ABSORBING_SLACK * (1 + np.abs(s3).max())):
            return False
        if np.linalg.eigvalsh(0.5 * (s3 + s3.T)).min() < -ABSORBING_SLACK * (1 + np.abs(s3).max()):
            return False
    return True


def validate(eta: ModelParams, hyper: Hyperparams) -> None:
    """Raise on parameters outside the model's parameter space."""
    if eta.tau_m != hyper.tau_m:
        raise DimensionMismatch("component count differs from hyperparameters")
    for comp in eta.components:
        if comp.alpha.shape != (hyper.k_p,) or comp.gamma_g.shape != hyper.sigma_g_mat.shape:
            raise DimensionMismatch("component dimensions differ from hyperparameters")
        _chol(comp.gamma_g)

