"""Simulation engine for zero-inflated multivariate outcomes at irregular visits.

Regions draw intervention paths from a logistic model in a lockdown
indicator and its elapsed duration. Subjects visit according to a
history-dependent hazard, and at each visit two latent Gaussian chains
produce the outcome: ``Z^y`` (log positive spend) and ``Z^p`` (log
probability of positive spend). Both chains are correlated within a visit
and between consecutive visits, with covariances chosen so that the
*exponentiated* variables hit a target correlation matrix.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .exceptions import CalibrationError, ConfigError
from .panel import Panel

log = logging.getLogger(__name__)

TARGET_WITHIN_CORR = (
    (1.0, 0.05, -0.05, 0.1),
    (0.05, 1.0, 0.3, 0.45),
    (-0.05, 0.3, 1.0, 0.5),
    (0.1, 0.45, 0.5, 1.0),
)

PSI_SETTINGS = {
    "P1": {
        "psi_p": (0.5, 0.5, -0.5, -0.5, 0.15, 0.15, -0.15, -0.15, 0.0, 0.0),
        "psi_y": (-0.15, -0.15, 0.15, 0.15, -0.5, -0.5, 0.5, 0.5, 0.35, 0.35),
    },
    "P2": {
        "psi_p": (0.15, 0.15, -0.1, -0.1, 0.05, 0.05, -0.2, -0.2, 0.0, 0.0),
        "psi_y": (0.2, 0.2, -0.25, -0.25, 0.3, 0.3, -0.15, -0.15, 0.35, 0.35),
    },
}

CLAMP_CEILING = 1.0 - 1e-12


@dataclass(frozen=True)
class DgpConfig:
    n: int = 200
    T: int = 100
    K: int = 4
    region_count: int = 10
    theta: tuple[float, ...] = (-0.5, 0.25, 1.0)
    base_rate: float = 0.075
    lockdown_log_rate: float = 0.125
    # log-hazard coefficients on (E_Short, A, A * D_LkDn)
    intensity_coef: tuple[float, ...] = (0.5, -0.2, -0.2)
    mu_y0: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    mu_p0: tuple[float, ...] = tuple(float(np.log(v)) for v in (0.3, 0.5, 0.7, 0.9))
    beta_y0: tuple[float, ...] = (-0.25, -0.25, -0.25, -0.25)
    beta_p0: tuple[float, ...] = (-0.05, 0.05, -0.05, 0.02)
    within_corr: tuple[tuple[float, ...], ...] = TARGET_WITHIN_CORR
    rho_y: float = 0.9
    rho_p: float = 0.9
    psi_p: tuple[float, ...] = PSI_SETTINGS["P1"]["psi_p"]
    psi_y: tuple[float, ...] = PSI_SETTINGS["P1"]["psi_y"]
    seed: int = 0
    # None disables the failure; the clamp count is always reported
    max_clamp_rate: float | None = None

    def __post_init__(self):
        tuples = ("theta", "intensity_coef", "mu_y0", "mu_p0", "beta_y0", "beta_p0", "psi_p", "psi_y")
        for name in tuples:
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "within_corr", tuple(tuple(float(v) for v in row) for row in self.within_corr))
        K = self.K
        if self.n < 1 or self.T < 2 or K < 1 or self.region_count < 1:
            raise ConfigError("n >= 1, T >= 2, K >= 1 and region_count >= 1 are required")
        if len(self.theta) != 3:
            raise ConfigError("theta must have 3 entries")
        if len(self.intensity_coef) != 3:
            raise ConfigError("intensity_coef must have 3 entries (E_Short, A, A:D_LkDn)")
        for name in ("mu_y0", "mu_p0", "beta_y0", "beta_p0"):
            if len(getattr(self, name)) != K:
                raise ConfigError(f"{name} must have K={K} entries")
        if any(m >= 0 for m in self.mu_p0):
            raise ConfigError("mu_p0 entries must be negative")
        p = 2 * K + 2
        if len(self.psi_p) != p or len(self.psi_y) != p:
            raise ConfigError(f"psi_p and psi_y must have {p} entries")
        corr = np.asarray(self.within_corr)
        if corr.shape != (K, K) or not np.allclose(corr, corr.T) or not np.allclose(np.diag(corr), 1.0):
            raise ConfigError("within_corr must be a symmetric KxK matrix with unit diagonal")
        if np.linalg.eigvalsh(corr).min() <= 0:
            raise ConfigError("within_corr must be positive definite")
        if not (0 <= self.rho_y < 1 and 0 <= self.rho_p < 1):
            raise ConfigError("temporal correlations must lie in [0, 1)")

    @classmethod
    def preset(cls, setting: str = "P1", **overrides) -> "DgpConfig":
        if setting not in PSI_SETTINGS:
            raise ConfigError(f"unknown setting {setting!r}; choose from {sorted(PSI_SETTINGS)}")
        return cls(**{**PSI_SETTINGS[setting], **overrides})

    @property
    def psi(self) -> np.ndarray:
        return np.asarray(self.psi_p) + np.asarray(self.psi_y)

    @property
    def diag_y(self) -> np.ndarray:
        return np.abs(np.asarray(self.mu_y0)) / 4

    @property
    def diag_p(self) -> np.ndarray:
        return np.abs(np.asarray(self.mu_p0)) / 8

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["within_corr"] = [list(r) for r in self.within_corr]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DgpConfig":
        d = dict(d)
        setting = d.pop("setting", None)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown dgp config key(s): {', '.join(unknown)}")
        if setting is not None:
            if setting not in PSI_SETTINGS:
                raise ConfigError(f"unknown setting {setting!r}")
            d = {**PSI_SETTINGS[setting], **d}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "DgpConfig":
        return cls.from_dict(json.loads(text))

    def with_seed(self, seed: int) -> "DgpConfig":
        return replace(self, seed=int(seed))


# -- regional covariates and intervention -------------------------------------------


def lockdown_covariates(T: int) -> tuple[np.ndarray, np.ndarray]:
    """Lockdown indicator (t > T/2) and elapsed lockdown share in [0, 1]."""
    t = np.arange(1, T + 1, dtype=float)
    half = T / 2
    i_lkdn = (t > half).astype(float)
    d_lkdn = np.maximum(0.0, t - half) / half
    return i_lkdn, d_lkdn


def propensity(theta, i_lkdn, d_lkdn) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return expit(theta[0] + theta[1] * np.asarray(i_lkdn) + theta[2] * np.asarray(d_lkdn))


def gen_intervention(config: DgpConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw ``(region_count, T)`` independent binary intervention paths."""
    i_lkdn, d_lkdn = lockdown_covariates(config.T)
    prob = propensity(config.theta, i_lkdn, d_lkdn)
    return (rng.random((config.region_count, config.T)) < prob).astype(np.int8)


# -- visits ------------------------------------------------------------------------------


def intensity_features(e_short, a, d_lkdn) -> np.ndarray:
    """Columns (E_Short, A, A * D_LkDn) of the simulated proportional hazard."""
    e_short, a, d_lkdn = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (e_short, a, d_lkdn)))
    return np.stack([e_short, a, a * d_lkdn], axis=-1)


def visit_hazard(config: DgpConfig, e_short, a, i_lkdn, d_lkdn) -> np.ndarray:
    lp = intensity_features(e_short, a, d_lkdn) @ np.asarray(config.intensity_coef)
    return config.base_rate * np.exp(config.lockdown_log_rate * np.asarray(i_lkdn, dtype=float) + lp)


def gen_visits(config: DgpConfig, rng: np.random.Generator, e_short, a, i_lkdn, d_lkdn) -> np.ndarray:
    """One Bernoulli(min(hazard, 1)) visit draw per subject."""
    hazard = np.minimum(visit_hazard(config, e_short, a, i_lkdn, d_lkdn), 1.0)
    return (rng.random(hazard.shape) < hazard).astype(np.int8)


# -- outcome covariance calibration -------------------------------------------------------


def covariance_map(target_corr, diag, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian covariances whose exponentials have a target correlation.

    Returns the within-visit covariance and the cross-covariance between
    consecutive visits. The cross-covariance uses ``rho * target_corr``, so
    the log-normal correlation between consecutive visits is ``rho`` times
    the within-visit target.
    """
    corr = np.asarray(target_corr, dtype=float)
    diag = np.asarray(diag, dtype=float)
    if (diag <= 0).any():
        raise CalibrationError("diagonal variances must be positive")
    scale = np.sqrt(np.expm1(diag))
    outer = np.outer(scale, scale)
    sigma = np.log(corr * outer + 1.0)
    np.fill_diagonal(sigma, diag)
    cross = np.log(rho * corr * outer + 1.0)
    eig = np.linalg.eigvalsh(sigma)
    if eig.min() < -1e-12:
        raise CalibrationError(f"within-visit covariance is not PSD (smallest eigenvalue {eig.min():.3g})")
    joint = np.block([[sigma, cross], [cross, sigma]])
    jeig = np.linalg.eigvalsh(joint)
    if jeig.min() < -1e-12:
        raise CalibrationError(f"between-visit covariance is not PSD (smallest eigenvalue {jeig.min():.3g})")
    return sigma, cross


def lognormal_mean(mu, sigma) -> np.ndarray:
    return np.exp(np.asarray(mu) + np.diag(np.asarray(sigma)) / 2)


def lognormal_cov(mu, sigma) -> np.ndarray:
    m = lognormal_mean(mu, sigma)
    return np.outer(m, m) * np.expm1(np.asarray(sigma))


def _capped_lognormal_mean(m, s2):
    """E[min(exp(Z), 1)] for Z ~ N(m, s2)."""
    s = np.sqrt(s2)
    return np.exp(m + s2 / 2) * norm.cdf((-m - s2) / s) + norm.cdf(m / s)


class _Chain:
    """Conditional Gaussian step for one latent chain (Z^y or Z^p)."""

    def __init__(self, sigma, cross):
        self.sigma = sigma
        self.gain = np.linalg.solve(sigma, cross).T  # cross @ inv(sigma)
        self.cond = sigma - self.gain @ cross.T
        self.cond = (self.cond + self.cond.T) / 2
        self.chol_marg = np.linalg.cholesky(sigma)
        self.chol_cond = np.linalg.cholesky(self.cond + 1e-15 * np.eye(len(sigma)))
        self.cond_var = np.diag(self.cond).copy()

    def start(self, rng, mu):
        return mu + rng.standard_normal(mu.shape) @ self.chol_marg.T

    def shift(self, z_prev, mu_prev):
        return (z_prev - mu_prev) @ self.gain.T

    def step(self, rng, z_prev, mu_prev, mu):
        return mu + self.shift(z_prev, mu_prev) + rng.standard_normal(mu.shape) @ self.chol_cond.T


def causal_basis(d_lkdn, i_lkdn, e_short, K: int) -> np.ndarray:
    """Simulation effect-modifier basis, shape ``(..., K, 2K + 2)``.

    Category k gets an intercept and a D_LkDn slope in its own slots; the
    last two slots (I_LkDn, E_Short) are shared by all categories.
    """
    d, i, e = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (d_lkdn, i_lkdn, e_short)))
    out = np.zeros(d.shape + (K, 2 * K + 2))
    for k in range(K):
        out[..., k, 2 * k] = 1.0
        out[..., k, 2 * k + 1] = d
        out[..., k, 2 * K] = i
        out[..., k, 2 * K + 1] = e
    return out


@dataclass
class _OutcomeModel:
    config: DgpConfig
    chain_y: _Chain = field(init=False)
    chain_p: _Chain = field(init=False)

    def __post_init__(self):
        c = self.config
        corr = np.asarray(c.within_corr)
        self.chain_y = _Chain(*covariance_map(corr, c.diag_y, c.rho_y))
        self.chain_p = _Chain(*covariance_map(corr, c.diag_p, c.rho_p))
        self.mu_y0 = np.asarray(c.mu_y0)
        self.mu_p0 = np.asarray(c.mu_p0)
        self.beta_y = np.asarray(c.beta_y0)
        self.beta_p = np.asarray(c.beta_p0)
        self.psi_y = np.asarray(c.psi_y)
        self.psi_p = np.asarray(c.psi_p)

    def means(self, i_lkdn, d_lkdn, e_short, a):
        """Marginal means of (Z^y, Z^p), each ``(m, K)``, plus the a=0 versions."""
        i_lkdn, d_lkdn, e_short, a = (np.asarray(v, dtype=float) for v in (i_lkdn, d_lkdn, e_short, a))
        m0y = (1 + d_lkdn) / (i_lkdn * e_short + 1)
        m0p = (i_lkdn * e_short) / (1 + d_lkdn)
        base_y = self.mu_y0 + m0y[:, None] * self.beta_y
        base_p = self.mu_p0 + m0p[:, None] * self.beta_p
        b = causal_basis(d_lkdn, i_lkdn, e_short, self.config.K)
        eff_y = (b @ self.psi_y) * a[:, None]
        eff_p = (b @ self.psi_p) * a[:, None]
        return base_y + eff_y, base_p + eff_p, base_y, base_p

    def initial(self, rng, m):
        K = self.config.K
        mu_y, mu_p, _, _ = self.means(np.zeros(m), np.zeros(m), np.zeros(m), np.zeros(m))
        zy = self.chain_y.start(rng, mu_y)
        zp = self.chain_p.start(rng, mu_p)
        assert zy.shape == (m, K)
        return zy, zp, mu_y, mu_p

    def draw(self, rng, state, i_lkdn, d_lkdn, e_short, a):
        """Advance the chains for visiting subjects; returns outcomes and bookkeeping."""
        zy_prev, zp_prev, muy_prev, mup_prev = state
        mu_y, mu_p, base_y, base_p = self.means(i_lkdn, d_lkdn, e_short, a)
        shift_y = self.chain_y.shift(zy_prev, muy_prev)
        shift_p = self.chain_p.shift(zp_prev, mup_prev)
        zy = mu_y + shift_y + rng.standard_normal(mu_y.shape) @ self.chain_y.chol_cond.T
        zp = mu_p + shift_p + rng.standard_normal(mu_p.shape) @ self.chain_p.chol_cond.T
        prob = np.exp(zp)
        clamped = prob >= 1.0
        prob = np.where(clamped, CLAMP_CEILING, prob)
        positive = rng.random(prob.shape) < prob
        y = np.where(positive, np.exp(zy), 0.0)
        # E[Y | latent past, history, a = 0]
        oracle = _capped_lognormal_mean(base_p + shift_p, self.chain_p.cond_var) * np.exp(
            base_y + shift_y + self.chain_y.cond_var / 2
        )
        return y, (zy, zp, mu_y, mu_p), int(clamped.sum()), oracle


@dataclass(frozen=True)
class Simulation:
    """A simulated panel plus the ground truth used to generate it."""

    panel: Panel
    config: DgpConfig
    psi: np.ndarray
    propensity: np.ndarray  # (R, T) true P(A_t = 1 | G_t)
    intensity_lp: np.ndarray  # (n, T) true (E_Short, A, A:D) @ gamma
    h_oracle: np.ndarray  # (n, T, K) E[Y | latent past, history, A=0] at visits, NaN elsewhere
    clamp_count: int
    clamp_rate: float


def simulate(config: DgpConfig, rng: np.random.Generator | None = None) -> Simulation:
    """Run the full generator: interventions, then visits and outcomes in time order."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n, T, K, R = config.n, config.T, config.K, config.region_count
    i_lkdn, d_lkdn = lockdown_covariates(T)
    a = gen_intervention(config, rng)
    region_of = np.arange(n) % R
    a_subj = a[region_of].astype(float)

    model = _OutcomeModel(config)
    zy, zp, muy, mup = model.initial(rng, n)
    y0 = np.exp(zy)

    visits = np.zeros((n, T), dtype=np.int8)
    outcomes = np.full((n, T, K), np.nan)
    h_oracle = np.full((n, T, K), np.nan)
    lp = np.zeros((n, T))
    e_short = np.zeros(n)
    clamps = 0
    draws = 0
    gamma = np.asarray(config.intensity_coef)
    for t in range(T):
        at = a_subj[:, t]
        lp[:, t] = intensity_features(e_short, at, d_lkdn[t]) @ gamma
        v = gen_visits(config, rng, e_short, at, i_lkdn[t], d_lkdn[t]).astype(bool)
        visits[:, t] = v
        idx = np.flatnonzero(v)
        if idx.size == 0:
            continue
        m = idx.size
        state = (zy[idx], zp[idx], muy[idx], mup[idx])
        y, new_state, c, oracle = model.draw(
            rng, state, np.full(m, i_lkdn[t]), np.full(m, d_lkdn[t]), e_short[idx], at[idx]
        )
        zy[idx], zp[idx], muy[idx], mup[idx] = new_state
        outcomes[idx, t] = y
        h_oracle[idx, t] = oracle
        e_short[idx] = (y == 0).mean(axis=1)
        clamps += c
        draws += y.size

    clamp_rate = clamps / draws if draws else 0.0
    if config.max_clamp_rate is not None and clamp_rate > config.max_clamp_rate:
        raise CalibrationError(
            f"{clamp_rate:.4%} of zero-inflation probabilities were clamped at 1 "
            f"(limit {config.max_clamp_rate:.4%})"
        )
    if clamps:
        log.debug("clamped %d of %d positive-spend probabilities (%.3f%%)", clamps, draws, 100 * clamp_rate)

    panel = Panel.from_arrays(
        a,
        visits,
        outcomes,
        y0,
        region_of,
        region_covariates={"I_LkDn": np.tile(i_lkdn, (R, 1)), "D_LkDn": np.tile(d_lkdn, (R, 1))},
    )
    return Simulation(
        panel=panel,
        config=config,
        psi=config.psi,
        propensity=np.tile(propensity(config.theta, i_lkdn, d_lkdn), (R, 1)),
        intensity_lp=lp,
        h_oracle=h_oracle,
        clamp_count=clamps,
        clamp_rate=clamp_rate,
    )


def simulate_panel(config: DgpConfig, rng: np.random.Generator | None = None) -> Panel:
    return simulate(config, rng).panel


def gen_outcomes(config: DgpConfig, rng: np.random.Generator, visits, a) -> tuple[np.ndarray, np.ndarray]:
    """Outcomes for fixed visit patterns.

    ``visits`` and ``a`` are ``(m, T)`` arrays (one row per subject). Returns
    the ``(m, T, K)`` outcome array (NaN where no visit) and ``y0``. The
    E_Short feedback into the baseline means is tracked internally; visit
    times themselves are taken as given.
    """
    visits = np.atleast_2d(np.asarray(visits)).astype(bool)
    a = np.broadcast_to(np.atleast_2d(np.asarray(a, dtype=float)), visits.shape)
    m, T = visits.shape
    i_lkdn, d_lkdn = lockdown_covariates(T)
    model = _OutcomeModel(config)
    zy, zp, muy, mup = model.initial(rng, m)
    y0 = np.exp(zy)
    out = np.full((m, T, config.K), np.nan)
    e_short = np.zeros(m)
    for t in range(T):
        idx = np.flatnonzero(visits[:, t])
        if idx.size == 0:
            continue
        k = idx.size
        y, new_state, _, _ = model.draw(
            rng, (zy[idx], zp[idx], muy[idx], mup[idx]), np.full(k, i_lkdn[t]), np.full(k, d_lkdn[t]),
            e_short[idx], a[idx, t],
        )
        zy[idx], zp[idx], muy[idx], mup[idx] = new_state
        out[idx, t] = y
        e_short[idx] = (y == 0).mean(axis=1)
    return out, y0


def replication_rng(master_seed: int, replication: int) -> np.random.Generator:
    """Independent counter-based stream for one replication."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(replication),))
    return np.random.Generator(np.random.Philox(ss))
