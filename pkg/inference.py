"""
Priors and posterior sampling for evaluation models

Two samplers share one parameterization:
- sample_conjugate: Gibbs for homoscedastic fixed-effects models
  (beta | sigma is Gaussian; the half-t prior on sigma is written as an
  inverse-gamma scale mixture so sigma | beta is conjugate too)
- sample_mcmc: NUTS (numpyro) on a flat unconstrained vector for anything,
  with non-centered random intercepts u = tau * z and log-scale parameters

The response is centered on its mean when the mean model has an intercept
(and the log-sigma intercept on log sd(s)); draws are reported uncentered.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import jax
import jax.numpy as jnp
import numpy as np
import numpyro
import pandas as pd
from jax.scipy.stats import norm as jnorm
from jax.scipy.stats import t as jstudent_t
from numpyro.diagnostics import effective_sample_size, split_gelman_rubin
from numpyro.infer import MCMC, NUTS
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

from config import SamplerSettings
from dataset import EvalDataset
from errors import DataError, ShapeError
from formula import DesignMatrix, ModelSpec, PriorConfig, build_design

numpyro.enable_x64()

logger = logging.getLogger(__name__)

__all__ = [
    "PriorConfig",
    "ParamRecord",
    "PosteriorDraws",
    "SamplerDiagnostics",
    "log_likelihood",
    "log_posterior",
    "log_posterior_grad",
    "sample_conjugate",
    "sample_mcmc",
    "merge_chains",
    "fit_posterior",
    "posterior_predictive_logpdf",
    "draw_moments",
    "posterior_hash",
]

_LOG_2PI = math.log(2.0 * math.pi)
_CHUNK = 256

# ==================== PARAMETER RECORDS ====================

@dataclass(frozen=True)
class ParamRecord:
    """One lambda: fixed coefficients, random intercepts, scales"""
    beta: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    sigma: Optional[float] = None
    gamma: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    tau_sigma: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SamplerDiagnostics:
    method: str
    divergence_count: int = 0
    accept_rate: float = 1.0
    split_rhat: Dict[str, float] = field(default_factory=dict)
    min_ess: float = float("nan")
    warnings: Tuple[str, ...] = ()

    @property
    def max_rhat(self) -> float:
        values = [v for v in self.split_rhat.values() if not math.isnan(v)]
        return max(values, default=float("nan"))

    def to_dict(self) -> Dict:
        return {
            "method": self.method,
            "divergence_count": self.divergence_count,
            "accept_rate": self.accept_rate,
            "max_rhat": None if math.isnan(self.max_rhat) else self.max_rhat,
            "split_rhat": {k: (None if math.isnan(v) else v) for k, v in self.split_rhat.items()},
            "min_ess": None if math.isnan(self.min_ess) else self.min_ess,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SamplerDiagnostics":
        nan = float("nan")
        return cls(
            method=data["method"],
            divergence_count=int(data.get("divergence_count", 0)),
            accept_rate=float(data.get("accept_rate", 1.0)),
            split_rhat={k: (nan if v is None else float(v)) for k, v in data.get("split_rhat", {}).items()},
            min_ess=nan if data.get("min_ess") is None else float(data["min_ess"]),
            warnings=tuple(data.get("warnings", ())),
        )


_BLOCKS = ("beta", "u", "tau", "sigma", "gamma", "v", "tau_sigma")


@dataclass(frozen=True)
class PosteriorDraws:
    """
    R posterior draws, one row per draw in every block.
    loglik_cache[r, n] = log N(s_n | mu_n(lambda_r), sigma_n(lambda_r)^2) on the fitted dataset.
    names maps each block to its column names (design column or group id).
    """
    beta: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    loglik_cache: np.ndarray
    spec_hash: str
    names: Dict[str, Tuple[str, ...]]
    sigma: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    tau_sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        cache = np.asarray(self.loglik_cache, dtype=float)
        if cache.ndim != 2 or cache.shape[0] < 1:
            raise DataError("posterior draws need R >= 1 rows of log-likelihoods")
        if not np.all(np.isfinite(cache)):
            raise DataError("log-likelihood cache contains non-finite values")
        if not np.all(np.isfinite(cache.sum(axis=1))):
            raise DataError("log-likelihood totals are not finite")
        for block in _BLOCKS:
            value = getattr(self, block)
            if value is None:
                continue
            value = np.array(value, dtype=float, copy=True)
            if value.shape[0] != cache.shape[0]:
                raise ShapeError(f"block {block} has {value.shape[0]} draws, cache has {cache.shape[0]}")
            value.setflags(write=False)
            object.__setattr__(self, block, value)
        cache = np.array(cache, copy=True)
        cache.setflags(write=False)
        object.__setattr__(self, "loglik_cache", cache)

    @property
    def R(self) -> int:
        return self.loglik_cache.shape[0]

    @property
    def is_heteroscedastic(self) -> bool:
        return self.gamma is not None

    def draw(self, r: int) -> ParamRecord:
        def row(block):
            value = getattr(self, block)
            return None if value is None else value[r]

        sigma = row("sigma")
        return ParamRecord(
            beta=row("beta"), u=row("u"), tau=row("tau"),
            sigma=None if sigma is None else float(sigma),
            gamma=row("gamma"), v=row("v"), tau_sigma=row("tau_sigma"),
        )

    def take(self, indices) -> "PosteriorDraws":
        """Draws at indices (with replacement allowed); cache rows travel with them"""
        idx = np.asarray(indices, dtype=np.int64)
        blocks = {b: (None if getattr(self, b) is None else getattr(self, b)[idx]) for b in _BLOCKS}
        return PosteriorDraws(loglik_cache=self.loglik_cache[idx], spec_hash=self.spec_hash, names=self.names, **blocks)

    def column_names(self) -> Tuple[str, ...]:
        prefixes = {"beta": "b_", "u": "u_", "tau": "sd_", "gamma": "b_sigma_", "v": "u_sigma_", "tau_sigma": "sd_sigma_"}
        columns = []
        for block in _BLOCKS:
            if getattr(self, block) is None:
                continue
            if block == "sigma":
                columns.append("sigma")
            else:
                columns += [prefixes[block] + name for name in self.names[block]]
        return tuple(columns)

    def to_frame(self) -> pd.DataFrame:
        """One row per draw, header = parameter names (the cache is not included)"""
        parts = []
        for block in _BLOCKS:
            value = getattr(self, block)
            if value is not None:
                parts.append(value.reshape(self.R, -1))
        return pd.DataFrame(np.hstack(parts), columns=list(self.column_names()))

    def save_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {b: getattr(self, b) for b in _BLOCKS if getattr(self, b) is not None}
        out["loglik_cache"] = self.loglik_cache
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], spec_hash: str, names: Dict[str, Tuple[str, ...]]) -> "PosteriorDraws":
        blocks = {b: arrays.get(b) for b in _BLOCKS}
        return cls(loglik_cache=arrays["loglik_cache"], spec_hash=spec_hash,
                   names={k: tuple(v) for k, v in names.items()}, **blocks)


def posterior_hash(spec: ModelSpec, d: EvalDataset) -> str:
    return hashlib.sha256((spec.fingerprint() + d.fingerprint()).encode("utf-8")).hexdigest()[:16]


# ==================== MODEL ARRAYS ====================

class _ParamLayout:
    """Slices of the flat unconstrained vector used by NUTS"""

    def __init__(self):
        self.slices: Dict[str, slice] = {}
        self.names = []
        self.size = 0

    def add(self, block: str, names):
        names = list(names)
        self.slices[block] = slice(self.size, self.size + len(names))
        self.names += names
        self.size += len(names)

    def get(self, theta, block):
        return theta[..., self.slices[block]]


class _ModelArrays:
    """Design pieces and offsets of one (spec, dataset) pair"""

    def __init__(self, spec: ModelSpec, d: EvalDataset, need_scores: bool = True):
        self.spec = spec
        mean, sigma = build_design(spec, d)
        self.mean: DesignMatrix = mean
        self.sigma_design: Optional[DesignMatrix] = sigma
        self.Xf = mean.fixed
        self.Z = mean.random
        self.u_group = mean.random_group_of_column
        self.groups = mean.groups
        self.intercept_index = mean.fixed_names.index("Intercept") if "Intercept" in mean.fixed_names else None

        self.hetero = sigma is not None
        if self.hetero:
            self.Sf = sigma.fixed
            self.Zs = sigma.random
            self.v_group = sigma.random_group_of_column
            self.sigma_groups = sigma.groups
            self.sigma_intercept_index = sigma.fixed_names.index("Intercept") if "Intercept" in sigma.fixed_names else None

        self.s = d.require_scores() if need_scores else None

    def names(self) -> Dict[str, Tuple[str, ...]]:
        names = {"beta": self.mean.fixed_names, "u": self.mean.random_names, "tau": self.groups}
        if self.hetero:
            names.update(gamma=self.sigma_design.fixed_names, v=self.sigma_design.random_names, tau_sigma=self.sigma_groups)
        return names

    def check(self, draws: PosteriorDraws):
        """Draw blocks must line up with this design"""
        for block, expected in self.names().items():
            if tuple(draws.names.get(block, ())) != tuple(expected):
                raise ShapeError(f"posterior block {block!r} does not match the design columns")
        if self.hetero != draws.is_heteroscedastic:
            raise ShapeError("posterior and design disagree about the sigma model")


class _Fit:
    """Centering offsets and the unconstrained layout for a fit on a scored dataset"""

    def __init__(self, m: _ModelArrays, prior: PriorConfig):
        self.m = m
        self.prior = prior
        s = m.s
        self.offset = float(s.mean()) if m.intercept_index is not None else 0.0
        self.s_c = s - self.offset
        sd = float(s.std())
        self.sigma_offset = math.log(sd) if (m.hetero and m.sigma_intercept_index is not None and sd > 0) else 0.0

        self.beta_sd = np.full(m.Xf.shape[1], prior.fixed_coef_sd)
        if m.intercept_index is not None:
            self.beta_sd[m.intercept_index] = prior.intercept_sd

        layout = _ParamLayout()
        layout.add("beta", [f"b_{n}" for n in m.mean.fixed_names])
        layout.add("log_tau", [f"log_sd_{g}" for g in m.groups])
        layout.add("z", [f"z_{n}" for n in m.mean.random_names])
        if m.hetero:
            layout.add("gamma", [f"b_sigma_{n}" for n in m.sigma_design.fixed_names])
            layout.add("log_tau_sigma", [f"log_sd_sigma_{g}" for g in m.sigma_groups])
            layout.add("z_sigma", [f"z_sigma_{n}" for n in m.sigma_design.random_names])
        else:
            layout.add("log_sigma", ["log_sigma"])
        self.layout = layout

    def initial_points(self, chains: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng([seed, 7])
        theta = rng.uniform(-0.5, 0.5, size=(chains, self.layout.size)) * 0.2
        if not self.m.hetero:
            sd = float(self.s_c.std())
            theta[:, self.layout.slices["log_sigma"]] += math.log(sd) if sd > 0 else 0.0
        return theta

    def constrain(self, theta: np.ndarray, centered: bool = False) -> Dict[str, np.ndarray]:
        """Unconstrained (R, D) -> reported blocks, uncentered"""
        L, m = self.layout, self.m
        beta = np.array(L.get(theta, "beta"), dtype=float)
        if m.intercept_index is not None:
            beta[:, m.intercept_index] += self.offset
        tau = np.exp(L.get(theta, "log_tau"))
        z = L.get(theta, "z")
        u = z if centered else tau[:, m.u_group] * z
        out = {"beta": beta, "u": np.asarray(u, dtype=float), "tau": tau}
        if m.hetero:
            gamma = np.array(L.get(theta, "gamma"), dtype=float)
            if m.sigma_intercept_index is not None:
                gamma[:, m.sigma_intercept_index] += self.sigma_offset
            tau_sigma = np.exp(L.get(theta, "log_tau_sigma"))
            z_sigma = L.get(theta, "z_sigma")
            out.update(gamma=gamma, tau_sigma=tau_sigma, v=tau_sigma[:, m.v_group] * z_sigma)
        else:
            out["sigma"] = np.exp(L.get(theta, "log_sigma")[:, 0])
        return out


def _half_t_logpdf(x, df, scale):
    return jnp.log(2.0) + jstudent_t.logpdf(x, df, loc=0.0, scale=scale)


def _make_log_posterior(fit: _Fit, centered: bool = False) -> Callable:
    """jax-traceable log p(theta | D) up to a constant, Jacobians included"""
    m, prior, L = fit.m, fit.prior, fit.layout
    Xf = jnp.asarray(m.Xf)
    Z = jnp.asarray(m.Z)
    u_group = jnp.asarray(m.u_group)
    s = jnp.asarray(fit.s_c)
    beta_sd = jnp.asarray(fit.beta_sd)
    has_u = m.Z.shape[1] > 0
    if m.hetero:
        Sf = jnp.asarray(m.Sf)
        Zs = jnp.asarray(m.Zs)
        v_group = jnp.asarray(m.v_group)
        has_v = m.Zs.shape[1] > 0

    def log_post(theta):
        beta = L.get(theta, "beta")
        lp = jnp.sum(jnorm.logpdf(beta, 0.0, beta_sd))
        mu = Xf @ beta

        if has_u:
            log_tau = L.get(theta, "log_tau")
            tau = jnp.exp(log_tau)
            lp += jnp.sum(_half_t_logpdf(tau, prior.df, prior.group_sd_scale) + log_tau)
            raw = L.get(theta, "z")
            if centered:
                lp += jnp.sum(jnorm.logpdf(raw, 0.0, tau[u_group]))
                u = raw
            else:
                lp += jnp.sum(jnorm.logpdf(raw))
                u = tau[u_group] * raw
            mu = mu + Z @ u

        if m.hetero:
            gamma = L.get(theta, "gamma")
            lp += jnp.sum(jnorm.logpdf(gamma, 0.0, prior.sigma_coef_sd))
            log_sigma = Sf @ gamma + fit.sigma_offset
            if has_v:
                log_tau_sigma = L.get(theta, "log_tau_sigma")
                tau_sigma = jnp.exp(log_tau_sigma)
                lp += jnp.sum(_half_t_logpdf(tau_sigma, prior.df, prior.group_sd_scale) + log_tau_sigma)
                z_sigma = L.get(theta, "z_sigma")
                lp += jnp.sum(jnorm.logpdf(z_sigma))
                log_sigma = log_sigma + Zs @ (tau_sigma[v_group] * z_sigma)
        else:
            log_sigma = L.get(theta, "log_sigma")[0]
            lp += _half_t_logpdf(jnp.exp(log_sigma), prior.df, prior.resid_sd_scale) + log_sigma

        resid = (s - mu) * jnp.exp(-log_sigma)
        lp += jnp.sum(-0.5 * resid ** 2 - log_sigma) - 0.5 * _LOG_2PI * s.shape[0]
        return lp

    return log_post


def log_posterior(spec: ModelSpec, d: EvalDataset, theta, centered: bool = False) -> float:
    """Log posterior density (up to a constant) at an unconstrained parameter vector"""
    fit = _Fit(_ModelArrays(spec, d), spec.prior)
    theta = jnp.asarray(theta, dtype=jnp.float64)
    if theta.shape != (fit.layout.size,):
        raise ShapeError(f"expected a parameter vector of length {fit.layout.size}")
    return float(_make_log_posterior(fit, centered)(theta))


def log_posterior_grad(spec: ModelSpec, d: EvalDataset, theta, centered: bool = False) -> np.ndarray:
    fit = _Fit(_ModelArrays(spec, d), spec.prior)
    theta = jnp.asarray(theta, dtype=jnp.float64)
    if theta.shape != (fit.layout.size,):
        raise ShapeError(f"expected a parameter vector of length {fit.layout.size}")
    return np.asarray(jax.grad(_make_log_posterior(fit, centered))(theta))


def parameter_names(spec: ModelSpec, d: EvalDataset) -> Tuple[str, ...]:
    """Names of the unconstrained coordinates, in vector order"""
    return tuple(_Fit(_ModelArrays(spec, d), spec.prior).layout.names)


# ==================== LIKELIHOOD ====================

def _moments(m: _ModelArrays, blocks: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """mu and sigma, each (r, N) (sigma is (r, 1) when homoscedastic)"""
    mu = blocks["beta"] @ m.Xf.T
    if m.Z.shape[1]:
        mu = mu + blocks["u"] @ m.Z.T
    if m.hetero:
        log_sigma = blocks["gamma"] @ m.Sf.T
        if m.Zs.shape[1]:
            log_sigma = log_sigma + blocks["v"] @ m.Zs.T
        sigma = np.exp(log_sigma)
    else:
        sigma = np.asarray(blocks["sigma"], dtype=float).reshape(-1, 1)
    return mu, sigma


def _gauss_logpdf(s: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    z = (s - mu) / sigma
    return -0.5 * z * z - np.log(sigma) - 0.5 * _LOG_2PI


def log_likelihood(spec: ModelSpec, params: ParamRecord, d: EvalDataset) -> np.ndarray:
    """Per-record log N(s_n | mu_n, sigma_n^2)"""
    m = _ModelArrays(spec, d)
    expected = {"beta": m.Xf.shape[1], "u": m.Z.shape[1], "tau": len(m.groups)}
    if m.hetero:
        expected.update(gamma=m.Sf.shape[1], v=m.Zs.shape[1], tau_sigma=len(m.sigma_groups))
    for block, size in expected.items():
        value = getattr(params, block)
        if value is None or np.asarray(value).reshape(-1).shape[0] != size:
            raise ShapeError(f"parameter block {block!r} should have {size} entries")
    if not m.hetero and (params.sigma is None or not params.sigma > 0):
        raise ShapeError("homoscedastic parameters need a positive sigma")
    blocks = {b: np.asarray(getattr(params, b), dtype=float).reshape(1, -1) for b in expected}
    if not m.hetero:
        blocks["sigma"] = np.array([params.sigma], dtype=float)
    mu, sigma = _moments(m, blocks)
    return _gauss_logpdf(m.s, mu, sigma)[0]


def _loglik_cache(m: _ModelArrays, blocks: Dict[str, np.ndarray]) -> np.ndarray:
    R = blocks["beta"].shape[0]
    cache = np.empty((R, len(m.s)))
    for start in range(0, R, _CHUNK):
        part = {k: v[start:start + _CHUNK] for k, v in blocks.items()}
        mu, sigma = _moments(m, part)
        cache[start:start + _CHUNK] = _gauss_logpdf(m.s, mu, sigma)
    return cache


def draw_moments(spec: ModelSpec, draws: PosteriorDraws, d: EvalDataset, rows: slice = slice(None)) -> Tuple[np.ndarray, np.ndarray]:
    """Predictive mean and sd for every record of d under draws[rows] (scores of d are not needed)"""
    m = _ModelArrays(spec, d, need_scores=False)
    m.check(draws)
    blocks = {b: v[rows] for b, v in draws.arrays().items() if b != "loglik_cache"}
    return _moments(m, blocks)


def posterior_predictive_logpdf(spec: ModelSpec, draws: PosteriorDraws, d: EvalDataset) -> np.ndarray:
    """log (1/R) sum_r N(s_n | lambda_r) for each record of d (typically held out)"""
    m = _ModelArrays(spec, d)
    m.check(draws)
    blocks = {b: v for b, v in draws.arrays().items() if b != "loglik_cache"}
    return logsumexp(_loglik_cache(m, blocks), axis=0) - math.log(draws.R)


def _assemble(fit: _Fit, blocks: Dict[str, np.ndarray], spec: ModelSpec, d: EvalDataset) -> PosteriorDraws:
    return PosteriorDraws(
        loglik_cache=_loglik_cache(fit.m, blocks),
        spec_hash=posterior_hash(spec, d),
        names=fit.m.names(),
        **blocks,
    )


# ==================== SAMPLERS ====================

def _chain_diagnostics(method: str, chains: np.ndarray, names, divergences: int = 0, accept: float = 1.0) -> SamplerDiagnostics:
    """chains is (C, S, D)"""
    rhat: Dict[str, float] = {}
    min_ess = float("nan")
    if chains.shape[1] >= 4 and chains.shape[2]:
        rhat_values = np.asarray(split_gelman_rubin(chains))
        ess_values = np.asarray(effective_sample_size(chains))
        rhat = {name: float(v) for name, v in zip(names, rhat_values)}
        min_ess = float(np.nanmin(ess_values)) if np.any(np.isfinite(ess_values)) else float("nan")

    total = chains.shape[0] * chains.shape[1]
    warnings = []
    if divergences > 0.01 * total:
        warnings.append(f"{divergences} divergent transitions out of {total}")
    max_rhat = max((v for v in rhat.values() if not math.isnan(v)), default=float("nan"))
    if max_rhat > 1.05:
        warnings.append(f"split R-hat up to {max_rhat:.3f} (> 1.05)")
    for message in warnings:
        logger.warning(f"{method} sampler: {message}")
    return SamplerDiagnostics(method, int(divergences), float(accept), rhat, min_ess, tuple(warnings))


def sample_conjugate(spec: ModelSpec, d: EvalDataset, R: int, seed: int, warmup: int = 1000) -> Tuple[PosteriorDraws, SamplerDiagnostics]:
    """
    Gibbs sampler for fixed-effects homoscedastic models.
    beta | sigma ~ N(A^-1 X's / sigma^2, A^-1), A = X'X / sigma^2 + diag(1 / prior_sd^2)
    sigma^2 | beta, a ~ IG((nu + N) / 2, nu / a + RSS / 2)
    a | sigma^2 ~ IG((nu + 1) / 2, nu / sigma^2 + 1 / scale^2)
    which leaves sigma marginally half-t(nu, scale).
    """
    if spec.is_random_effects or spec.is_heteroscedastic:
        raise ValueError("the conjugate sampler only handles fixed-effects homoscedastic models")
    if R < 1:
        raise ValueError("R must be at least 1")
    fit = _Fit(_ModelArrays(spec, d), spec.prior)
    X, s = fit.m.Xf, fit.s_c
    n, p = X.shape
    nu, scale = spec.prior.df, spec.prior.resid_sd_scale
    XtX = X.T @ X
    Xts = X.T @ s
    prior_precision = np.diag(1.0 / fit.beta_sd ** 2)

    rng = np.random.default_rng(seed)
    sigma2 = max(float(s.var()), 1e-8)
    aux = 1.0
    beta = np.zeros(p)
    kept_beta = np.empty((R, p))
    kept_sigma = np.empty(R)

    for it in range(warmup + R):
        if p:
            chol, lower = cho_factor(XtX / sigma2 + prior_precision, lower=True)
            mean = cho_solve((chol, lower), Xts / sigma2)
            beta = mean + solve_triangular(chol, rng.standard_normal(p), lower=True, trans="T")
        resid = s - X @ beta
        rss = float(resid @ resid)
        sigma2 = 1.0 / rng.gamma(0.5 * (nu + n), 1.0 / (nu / aux + 0.5 * rss))
        aux = 1.0 / rng.gamma(0.5 * (nu + 1.0), 1.0 / (nu / sigma2 + 1.0 / scale ** 2))
        if it >= warmup:
            kept_beta[it - warmup] = beta
            kept_sigma[it - warmup] = math.sqrt(sigma2)

    theta = np.zeros((R, fit.layout.size))
    theta[:, fit.layout.slices["beta"]] = kept_beta
    theta[:, fit.layout.slices["log_sigma"]] = np.log(kept_sigma)[:, None]
    draws = _assemble(fit, fit.constrain(theta), spec, d)
    diagnostics = _chain_diagnostics("gibbs", theta[None, :, :], fit.layout.names)
    logger.info(f"Gibbs: {R} draws after {warmup} warmup sweeps ({p} coefficients, N={n})")
    return draws, diagnostics


def merge_chains(samples: np.ndarray, R: int) -> np.ndarray:
    """(C, S, D) chains -> the first R rows of chain 0, then chain 1, ..."""
    samples = np.asarray(samples)
    if samples.ndim != 3:
        raise ShapeError("chain samples must be (chains, draws, dimension)")
    if R > samples.shape[0] * samples.shape[1]:
        raise ShapeError(f"only {samples.shape[0] * samples.shape[1]} draws available, {R} requested")
    return samples.reshape(-1, samples.shape[2])[:R]


def sample_mcmc(spec: ModelSpec, d: EvalDataset, R: int, chains: int, seed: int,
                settings: Optional[SamplerSettings] = None, centered: bool = False) -> Tuple[PosteriorDraws, SamplerDiagnostics]:
    """NUTS with diagonal mass adaptation; chains advance together and merge in chain-index order"""
    settings = settings or SamplerSettings()
    if R < 1 or chains < 1:
        raise ValueError("R and chains must be at least 1")
    fit = _Fit(_ModelArrays(spec, d), spec.prior)
    log_post = _make_log_posterior(fit, centered)

    def potential(theta):
        return -log_post(theta)

    kernel = NUTS(
        potential_fn=potential,
        target_accept_prob=settings.target_accept,
        max_tree_depth=settings.max_tree_depth,
        dense_mass=False,
    )
    per_chain = -(-R // chains)
    mcmc = MCMC(
        kernel,
        num_warmup=settings.warmup,
        num_samples=per_chain,
        num_chains=chains,
        chain_method="vectorized",
        progress_bar=False,
    )
    init = fit.initial_points(chains, seed)
    mcmc.run(
        jax.random.PRNGKey(seed),
        init_params=jnp.asarray(init if chains > 1 else init[0]),
        extra_fields=("diverging", "accept_prob"),
    )
    samples = np.asarray(mcmc.get_samples(group_by_chain=True)).reshape(chains, per_chain, fit.layout.size)
    extra = mcmc.get_extra_fields(group_by_chain=True)
    divergences = int(np.asarray(extra["diverging"]).sum())
    accept = float(np.asarray(extra["accept_prob"]).mean())

    theta = merge_chains(samples, R)
    draws = _assemble(fit, fit.constrain(theta, centered), spec, d)
    diagnostics = _chain_diagnostics("nuts", samples, fit.layout.names, divergences, accept)
    logger.info(
        f"NUTS: {R} draws from {chains} chains, accept {accept:.2f}, {divergences} divergences, "
        f"max R-hat {diagnostics.max_rhat:.3f}"
    )
    return draws, diagnostics


def fit_posterior(spec: ModelSpec, d: EvalDataset, R: int, seed: int, sampler: str = "auto",
                  settings: Optional[SamplerSettings] = None) -> Tuple[PosteriorDraws, SamplerDiagnostics]:
    """Conjugate Gibbs where it applies (sampler='auto'), NUTS otherwise"""
    settings = settings or SamplerSettings()
    conjugate_ok = not (spec.is_random_effects or spec.is_heteroscedastic)
    if sampler == "conjugate" and not conjugate_ok:
        raise ValueError("sampler=conjugate needs a fixed-effects homoscedastic model")
    if sampler == "conjugate" or (sampler == "auto" and conjugate_ok):
        return sample_conjugate(spec, d, R, seed, warmup=settings.warmup)
    return sample_mcmc(spec, d, R, settings.chains, seed, settings)
