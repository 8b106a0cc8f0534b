"""Hybrid Gibbs sampler for the hidden deformations and labels.

Each coordinate of a deformation vector is refreshed by a Metropolis-Hastings
step whose proposal is the Gaussian prior conditional of that coordinate, so
the acceptance ratio reduces to an image-likelihood ratio.  Labels are drawn
from Monte-Carlo weights computed on one auxiliary chain per component.

Internally all chains of a batch advance in lock-step; every operation is
either elementwise or a reduction along the last axis of a chain's own data,
so a chain's trajectory does not depend on how chains are grouped.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .errors import DegenerateWeights, DimensionMismatch, SingularCovariance
from .kernels import Geometry
from .params import ComponentParams, HiddenState, ModelParams, gaussian_logpdf
from .rng import AUX, BETA, LABEL, CounterRNG

__all__ = [
    "HiddenState", "AuxChains", "SampleResult", "conditional_prior", "mh_coordinate_step",
    "gibbs_sweep", "label_weights", "sample_hidden", "drift", "window_means",
]


def precision_of(gamma: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cholesky(gamma, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCovariance("deformation covariance is not positive definite") from exc
    p = linalg.cho_solve((c, True), np.eye(gamma.shape[0]))
    return 0.5 * (p + p.T)


def conditional_prior(xi, j: int, gamma) -> tuple[float, float]:
    """Mean and variance of coordinate ``j`` of N(0, gamma) given the others."""
    xi = np.asarray(xi, dtype=float)
    if not 0 <= j < xi.shape[0]:
        raise IndexError(f"coordinate {j} out of range")
    prec = precision_of(np.asarray(gamma, dtype=float))
    return _conditional_from_precision(prec, xi, j)


def _conditional_from_precision(prec, xi, j):
    row = prec[..., j, :]
    pjj = row[..., j]
    off = (row * xi).sum(-1) - pjj * xi[..., j]
    return -off / pjj, 1.0 / pjj


class _ChainBatch:
    """B chains, each with its own image and component parameters.

    When the photometric landmarks form a tensor grid the Gaussian kernel
    factorises over x and y; a move of an x-coordinate of beta then only
    touches the x-factor, and similarly for y.
    """

    def __init__(self, geometry: Geometry, images, alpha, sigma2, precision, xi):
        self.geometry = geometry
        self.y = images
        self.alpha = alpha
        self.sigma2 = sigma2
        self.prec = precision
        self.xi = np.array(xi, dtype=float)
        self.kg = geometry.k_g
        self._norm = -0.5 * geometry.n_pixels * np.log(2.0 * math.pi * sigma2)
        self.n_accept = np.zeros(len(self.xi))
        self.n_steps = 0
        self.separable = geometry.p_axes is not None
        if self.separable:
            k = self.kg
            xs, ys = geometry.p_axes
            self._centres = (xs[:, None], ys[:, None])
            self._c = 1.0 / (2.0 * geometry.config.sigma_p ** 2)
            self._a = alpha.reshape(len(alpha), len(ys), len(xs))
            # displacements along x and y at every pixel, (B, |Lambda|)
            self.z = [np.einsum("pk,bk->bp", geometry.kg_pix, self.xi[:, :k]),
                      np.einsum("pk,bk->bp", geometry.kg_pix, self.xi[:, k:])]
            # kernel factors laid out (B, n_axis, |Lambda|)
            self.f = [self._factor(0, self.z[0]), self._factor(1, self.z[1])]
            self._phase = None
            self._cache = None
            self.ll = self._ll(self._refresh(0))
        else:
            self.ll = self.loglik(self.xi)

    def loglik(self, xi: np.ndarray) -> np.ndarray:
        return self._ll(self.geometry.render(self.alpha, xi))

    def _ll(self, pred):
        r = self.y - pred
        return self._norm - np.einsum("bp,bp->b", r, r) / (2.0 * self.sigma2)

    def _factor(self, axis, z):
        d = (self.geometry.coords[:, axis] - z)[:, None, :] - self._centres[axis]
        return np.exp(-(d * d) * self._c)

    def _refresh(self, axis):
        """Contract alpha with the factor of the other axis; returns the current prediction."""
        if axis == 0:
            self._cache = np.einsum("bya,byp->bap", self._a, self.f[1])
        else:
            self._cache = np.einsum("bya,bap->byp", self._a, self.f[0])
        self._phase = axis
        return np.einsum("bap,bap->bp", self._cache, self.f[axis])

    def step(self, j: int, eps: np.ndarray, log_u: np.ndarray) -> None:
        mean, var = _conditional_from_precision(self.prec, self.xi, j)
        b = mean + np.sqrt(var) * eps
        if self.separable:
            axis, col = divmod(j, self.kg)
            if self._phase != axis:
                self._refresh(axis)
            z = self.z[axis] + (b - self.xi[:, j])[:, None] * self.geometry.kg_pix[:, col]
            f = self._factor(axis, z)
            ll_prop = self._ll(np.einsum("bap,bap->bp", self._cache, f))
        else:
            prop = self.xi.copy()
            prop[:, j] = b
            ll_prop = self.loglik(prop)
        acc = log_u < ll_prop - self.ll
        self.xi[acc, j] = b[acc]
        self.ll[acc] = ll_prop[acc]
        if self.separable:
            self.z[axis][acc] = z[acc]
            self.f[axis][acc] = f[acc]
        self.n_accept += acc
        self.n_steps += 1

    def sweep(self, eps: np.ndarray, log_u: np.ndarray) -> None:
        for j in range(self.xi.shape[1]):
            self.step(j, eps[:, j], log_u[:, j])

    @property
    def acceptance(self) -> np.ndarray:
        return self.n_accept / max(self.n_steps, 1)


def _single(geometry, y, comp: ComponentParams, xi):
    y = np.asarray(y, dtype=float)
    if y.shape != (geometry.n_pixels,):
        raise DimensionMismatch("image does not match the pixel grid")
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (2 * geometry.k_g,):
        raise DimensionMismatch("state length does not match 2 k_g")
    return _ChainBatch(geometry, y[None], comp.alpha[None], np.array([comp.sigma2]),
                       precision_of(comp.gamma_g)[None], xi[None])


def _metropolis_coordinate(xi, j, b, log_u, y, comp, geometry) -> np.ndarray:
    """One MH update of coordinate ``j`` with an explicit proposal ``b``."""
    chain = _single(geometry, y, comp, xi)
    prop = chain.xi.copy()
    prop[0, j] = b
    ll_prop = chain.loglik(prop)
    if log_u < ll_prop[0] - chain.ll[0]:
        return prop[0]
    return chain.xi[0]


def mh_coordinate_step(xi, j: int, y, comp: ComponentParams, geometry: Geometry,
                       rng: np.random.Generator) -> np.ndarray:
    """Propose coordinate ``j`` from its prior conditional and accept/reject."""
    chain = _single(geometry, y, comp, xi)
    eps = rng.standard_normal(1)
    log_u = np.log(rng.random(1))
    chain.step(j, eps, log_u)
    return chain.xi[0]


def gibbs_sweep(xi, y, comp: ComponentParams, geometry: Geometry,
                rng: np.random.Generator) -> np.ndarray:
    """Apply the coordinate updates for j = 0 .. 2k_g - 1 in order."""
    chain = _single(geometry, y, comp, xi)
    n = chain.xi.shape[1]
    eps = rng.standard_normal((1, n))
    log_u = np.log(rng.random((1, n)))
    chain.sweep(eps, log_u)
    return chain.xi[0]


@dataclass
class AuxChains:
    """Auxiliary states ``xi[i, t, l]`` (l = 1..J) and their image log-likelihoods."""

    states: np.ndarray  # (n, T, J, 2k_g)
    loglik: np.ndarray  # (n, T, J)


def normalized_weights(log_terms: np.ndarray) -> np.ndarray:
    """Normalise ``[(1/J) sum_l exp(log_terms[t, l])]^-1`` over t, in log space."""
    log_terms = np.asarray(log_terms, dtype=float)
    j = log_terms.shape[-1]
    log_w = -(logsumexp(log_terms, axis=-1) - math.log(j))
    with np.errstate(invalid="ignore"):
        w = np.exp(log_w - log_w.max(-1, keepdims=True))
        w = w / w.sum(-1, keepdims=True)
    if not np.all(np.isfinite(w)):
        raise DegenerateWeights("label weights underflowed for every component")
    return w


def label_weights(states, y, eta: ModelParams, geometry: Geometry) -> np.ndarray:
    """Monte-Carlo label probabilities for one image.

    ``states`` has shape (T, J, 2k_g): the J auxiliary states of every
    component.  Uses the deformation prior of each component as the
    importance density, so each term is ``f_t(xi) / q(y, xi, t | eta)``.
    """
    states = np.asarray(states, dtype=float)
    tau_m = eta.tau_m
    if states.ndim != 3 or states.shape[0] != tau_m:
        raise DimensionMismatch("states must be (tau_m, J, 2k_g)")
    if tau_m == 1:
        return np.ones(1)
    terms = np.empty(states.shape[:2])
    for t, comp in enumerate(eta.components):
        chain = _ChainBatch(geometry, np.asarray(y, dtype=float)[None], comp.alpha[None],
                            np.array([comp.sigma2]), precision_of(comp.gamma_g)[None],
                            states[t])
        log_f = gaussian_logpdf(states[t], comp.gamma_g)
        log_joint = chain.ll + log_f + math.log(eta.rho[t])
        terms[t] = log_f - log_joint
    return normalized_weights(terms)


@dataclass
class SampleResult:
    hidden: HiddenState
    chains: AuxChains | None
    weights: np.ndarray  # (n, T)
    aux_acceptance: np.ndarray  # (n, T)
    beta_acceptance: np.ndarray  # (n,)


def _draws(gen: np.random.Generator, J: int, dim: int):
    eps = gen.standard_normal((J, dim))
    log_u = np.log(gen.random((J, dim)))
    return eps, log_u


def _sample_block(idx, data, eta, J, geometry, rng, iteration, xi0, beta0, precisions,
                  keep_chains):
    tau_m = eta.tau_m
    dim = 2 * geometry.k_g
    m = len(idx)
    alphas = eta.alphas()
    sig = eta.sigma2()
    log_rho = np.log(eta.rho)

    # auxiliary chains: one per (image, component); row = a * tau_m + t
    comp_of = np.tile(np.arange(tau_m), m)
    img_of = np.repeat(idx, tau_m)
    eps = np.empty((m * tau_m, J, dim))
    log_u = np.empty_like(eps)
    for r, (i, t) in enumerate(zip(img_of, comp_of)):
        eps[r], log_u[r] = _draws(rng.generator(iteration, i, AUX, t), J, dim)
    aux = _ChainBatch(geometry, data[img_of], alphas[comp_of], sig[comp_of],
                      precisions[comp_of], np.broadcast_to(xi0, (m * tau_m, dim)))
    states = np.empty((m * tau_m, J, dim)) if keep_chains else None
    lls = np.empty((m * tau_m, J))
    for l in range(J):
        aux.sweep(eps[:, l], log_u[:, l])
        lls[:, l] = aux.ll
        if keep_chains:
            states[:, l] = aux.xi

    lls = lls.reshape(m, tau_m, J)
    if tau_m == 1:
        weights = np.ones((m, 1))
    else:
        weights = np.empty((m, tau_m))
        for a in range(m):
            try:
                weights[a] = normalized_weights(-lls[a] - log_rho[:, None])
            except DegenerateWeights as exc:
                raise DegenerateWeights(f"image {idx[a]}: {exc}") from exc

    labels = np.empty(m, dtype=np.int64)
    for a, i in enumerate(idx):
        u = rng.generator(iteration, i, LABEL).random()
        cdf = np.cumsum(weights[a])
        labels[a] = min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), tau_m - 1)

    eps = np.empty((m, J, dim))
    log_u = np.empty_like(eps)
    for a, i in enumerate(idx):
        eps[a], log_u[a] = _draws(rng.generator(iteration, i, BETA), J, dim)
    fin = _ChainBatch(geometry, data[idx], alphas[labels], sig[labels], precisions[labels],
                      np.broadcast_to(beta0, (m, dim)))
    for l in range(J):
        fin.sweep(eps[:, l], log_u[:, l])

    return (fin.xi, labels, weights,
            None if states is None else states.reshape(m, tau_m, J, dim),
            lls, aux.acceptance.reshape(m, tau_m), fin.acceptance)


def sample_hidden(data, eta: ModelParams, J: int, geometry: Geometry, rng: CounterRNG,
                  iteration: int = 0, xi0=None, beta0=None, threads: int = 1,
                  keep_chains: bool = True) -> SampleResult:
    """One transition of the hidden variables at fixed parameters ``eta``.

    For each image: run ``tau_m`` auxiliary chains of J sweeps from ``xi0``,
    draw the label from the Monte-Carlo weights, then run J sweeps of the
    chosen component's sampler from ``beta0``.
    """
    if J < 1:
        raise ValueError("J must be a positive integer")
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    dim = 2 * geometry.k_g
    xi0 = np.zeros(dim) if xi0 is None else np.asarray(xi0, dtype=float)
    beta0 = np.zeros(dim) if beta0 is None else np.asarray(beta0, dtype=float)
    if xi0.shape != (dim,) or beta0.shape != (dim,):
        raise DimensionMismatch("initial states must have length 2 k_g")
    precisions = np.stack([precision_of(c.gamma_g) for c in eta.components])

    threads = max(1, threads)
    blocks = [b for b in np.array_split(np.arange(n), min(threads, n)) if len(b)]

    def run(block):
        return _sample_block(block, data, eta, J, geometry, rng, iteration, xi0, beta0,
                             precisions, keep_chains)

    if len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]

    beta = np.concatenate([p[0] for p in parts])
    tau = np.concatenate([p[1] for p in parts])
    weights = np.concatenate([p[2] for p in parts])
    chains = None
    if keep_chains:
        chains = AuxChains(np.concatenate([p[3] for p in parts]),
                           np.concatenate([p[4] for p in parts]))
    return SampleResult(HiddenState(beta, tau), chains, weights,
                        np.concatenate([p[5] for p in parts]),
                        np.concatenate([p[6] for p in parts]))


def drift(beta) -> np.ndarray:
    """Drift function ``V(beta) = 1 + |beta|^2`` (last axis)."""
    beta = np.asarray(beta, dtype=float)
    return 1.0 + (beta * beta).sum(-1)


def window_means(values, n_windows: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    usable = len(values) - len(values) % n_windows
    return values[:usable].reshape(n_windows, -1).mean(1)
