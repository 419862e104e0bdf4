"""Nuisance models: visit intensity, intervention propensity and the
treatment-free conditional mean outcome.

All three follow the same shape: a ``fit_*`` function returning an immutable
model object whose ``predict`` is a pure function of the model and the rows.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import (
    ConvergenceError,
    InsufficientDataError,
    NumericalError,
    PositivityError,
    StructuralError,
)
from .panel import CovariateFrame, Panel, restriction_ratio
from .smoothing import AdditiveDesign, PenalizedFit, fit_gaussian, fit_logistic_guarded

log = logging.getLogger(__name__)

EXP_GUARD = 700.0
PROPENSITY_EPS = 1e-6
MIN_OUTCOME_ROWS = 50

# Simulation specifications, correct (C) and wrong (W).
INTENSITY_C = ("E_Short", "A", "A:D_LkDn")
INTENSITY_W = ("E_Short", "A")
PROPENSITY_C = ("I_LkDn", "s(D_LkDn)")
PROPENSITY_W = ()
OUTCOME_W = ("s(E_Short, k=5)",)


def outcome_terms_c(K: int) -> tuple[str, ...]:
    """Flexible outcome specification used as the "correct" simulation model."""
    lags = []
    for k in range(1, K + 1):
        lags += [f"log_ypos_{k}", f"zero_prev_{k}"]
    return tuple(lags) + ("I_LkDn", "s(D_LkDn)", "s(E_Short, k=5)", "s(E_Short, by=I_LkDn, k=5)")


def safe_exp(x: np.ndarray, what: str = "linear predictor") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size and np.nanmax(x) > EXP_GUARD:
        raise NumericalError(f"{what} reaches {np.nanmax(x):.4g} > {EXP_GUARD:g}; exp would overflow")
    return np.exp(x)


# ---------------------------------------------------------------- intensity


@dataclass(frozen=True)
class IntensityModel:
    """Proportional-intensity coefficients for the visit process.

    Only the relative intensity ``exp(m_v' gamma)`` is modelled; the baseline
    rate is never estimated.
    """

    features: tuple[str, ...]
    coef: np.ndarray
    loglik: float
    grad_norm: float
    n_iter: int
    information: np.ndarray
    ridge: float = 0.0

    def linear_predictor(self, frame: CovariateFrame) -> np.ndarray:
        lp = np.zeros((frame.n, frame.T))
        for name, g in zip(self.features, self.coef):
            lp = lp + g * frame.column(name)
        return lp

    def predict_weight(self, frame: CovariateFrame) -> np.ndarray:
        return safe_exp(self.linear_predictor(frame), "intensity linear predictor")

    def summary(self) -> dict[str, Any]:
        return {
            "features": list(self.features),
            "coef": self.coef.tolist(),
            "loglik": self.loglik,
            "grad_norm": self.grad_norm,
            "n_iter": self.n_iter,
            "ridge": self.ridge,
        }


def predict_weight(model: IntensityModel, row: dict[str, float]) -> float:
    """Relative intensity ``exp(m_v' gamma)`` for one row of named features."""
    lp = 0.0
    for name, g in zip(model.features, model.coef):
        value = 1.0
        for part in name.split(":"):
            if part not in row:
                raise StructuralError(f"feature {part!r} missing from row")
            value *= float(row[part])
        lp += g * value
    return float(safe_exp(np.array(lp), "intensity linear predictor"))


def _cox_pieces(X, events, gamma):
    """Breslow partial log-likelihood, score and information.

    ``X`` is ``(n, T, p)``, ``events`` ``(n, T)``; everyone is at risk at every t.
    """
    eta = X @ gamma
    shift = eta.max(axis=0)
    w = np.exp(eta - shift)
    s0 = w.sum(axis=0)
    d = events.sum(axis=0)
    s1 = np.einsum("it,itp->tp", w, X)
    xbar = s1 / s0[:, None]
    loglik = float(np.sum(events * eta) - np.sum(d * (np.log(s0) + shift)))
    score = np.einsum("it,itp->p", events, X) - d @ xbar
    s2 = np.einsum("it,itp,itq->tpq", w, X, X) / s0[:, None, None]
    var = s2 - xbar[:, :, None] * xbar[:, None, :]
    info = np.einsum("t,tpq->pq", d, var)
    return loglik, score, info


def fit_cox_arrays(
    X: np.ndarray, events: np.ndarray, features: Sequence[str] = (), tol: float = 1e-8, max_iter: int = 100
) -> IntensityModel:
    """Newton-Raphson on the discrete-time Breslow partial likelihood."""
    X = np.asarray(X, dtype=float)
    events = np.asarray(events, dtype=float)
    if X.ndim != 3:
        raise ValueError("X must be (n, T, p)")
    n, T, p = X.shape
    if not features:
        features = tuple(f"x{j}" for j in range(p))
    if events.sum() < 1:
        raise InsufficientDataError("intensity model needs at least one visit")
    if p == 0:
        return IntensityModel(tuple(features), np.zeros(0), 0.0, 0.0, 0, np.zeros((0, 0)))

    gamma = np.zeros(p)
    ridge = 0.0
    loglik, score, info = _cox_pieces(X, events, gamma)
    if np.linalg.cond(info) > 1e12:
        ridge = 1e-8
        warnings.warn("collinear intensity features; adding a 1e-8 ridge to the information", stacklevel=2)
    it = 0
    for it in range(1, max_iter + 1):
        step = np.linalg.solve(info + ridge * np.eye(p), score - ridge * gamma)
        obj = loglik - 0.5 * ridge * gamma @ gamma
        for _ in range(30):
            cand = gamma + step
            ll_c, sc_c, in_c = _cox_pieces(X, events, cand)
            if ll_c - 0.5 * ridge * cand @ cand >= obj - 1e-12 * abs(obj):
                break
            step = step / 2
        gamma, loglik, score, info = cand, ll_c, sc_c, in_c
        gnorm = float(np.linalg.norm(score - ridge * gamma))
        if gnorm < tol:
            break
    else:
        raise ConvergenceError(f"Cox fit did not converge in {max_iter} iterations; last gradient norm {gnorm:.3e}")
    return IntensityModel(tuple(features), gamma, loglik, gnorm, it, info, ridge)


def fit_cox(frame: CovariateFrame, features: Sequence[str]) -> IntensityModel:
    """Fit the visit intensity with every subject at risk at every t."""
    features = tuple(features)
    if features:
        X = np.stack([frame.column(f) for f in features], axis=-1)
    else:
        X = np.zeros((frame.n, frame.T, 0))
    return fit_cox_arrays(X, frame.visit, features)


# ---------------------------------------------------------------- propensity


def region_rows(panel: Panel) -> dict[str, np.ndarray]:
    """Flattened ``(R * T,)`` regional features used by the propensity model."""
    R, T = panel.region_a.shape
    cols = {name: panel.region_covariate(name).ravel() for name in panel.regions[0].covariates}
    if "R_A" not in cols:
        cols["R_A"] = restriction_ratio(panel.region_a).ravel()
    cols["t"] = np.tile(np.arange(1, T + 1, dtype=float), R)
    return cols


@dataclass(frozen=True)
class PropensityModel:
    terms: tuple[str, ...]
    design: AdditiveDesign
    fit: PenalizedFit
    eps: float = PROPENSITY_EPS

    def predict_with_clips(self, data, n_rows: int) -> tuple[np.ndarray, int]:
        X = self.design.transform(data, n_rows)
        p = expit(X @ self.fit.coef)
        clipped = int(np.sum((p < self.eps) | (p > 1 - self.eps)))
        return np.clip(p, self.eps, 1 - self.eps), clipped

    def predict(self, data, n_rows: int) -> np.ndarray:
        return self.predict_with_clips(data, n_rows)[0]

    def predict_regions(self, panel: Panel) -> np.ndarray:
        R, T = panel.region_a.shape
        return self.predict(region_rows(panel), R * T).reshape(R, T)

    def summary(self) -> dict[str, Any]:
        return {
            "terms": list(self.terms),
            "coef": self.fit.coef.tolist(),
            "columns": self.design.names,
            "lambdas": np.asarray(self.fit.lambdas).tolist(),
            "edf": self.fit.edf,
            "iterations": self.fit.n_iter,
            "converged": self.fit.converged,
            "separation": self.fit.separation,
        }


def fit_propensity(panel: Panel, terms: Sequence[str]) -> PropensityModel:
    """Additive logistic model of the intervention on regional history."""
    a = panel.region_a.ravel().astype(float)
    if a.min() == a.max():
        raise PositivityError(f"intervention is constant ({int(a[0])}) in every region and period")
    data = region_rows(panel)
    design = AdditiveDesign.from_terms(terms, data)
    X = design.transform(data, a.size)
    fit = fit_logistic_guarded(X, a, design.penalties)
    return PropensityModel(tuple(terms), design, fit)


# ---------------------------------------------------------------- outcome


@dataclass(frozen=True)
class _CategoryFit:
    kind: str  # "zero" | "direct" | "two_part"
    design: AdditiveDesign | None = None
    mean_fit: PenalizedFit | None = None
    prob_fit: PenalizedFit | None = None
    resid_var: float = 0.0

    def predict(self, data, n_rows: int) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(n_rows)
        X = self.design.transform(data, n_rows)
        if self.kind == "direct":
            return np.maximum(X @ self.mean_fit.coef, 0.0)
        prob = expit(X @ self.prob_fit.coef) if self.prob_fit is not None else np.ones(n_rows)
        return prob * safe_exp(X @ self.mean_fit.coef + self.resid_var / 2, "log-outcome prediction")


@dataclass(frozen=True)
class OutcomeModel:
    """Per-category models of ``E(Y_k | history, A = 0)``."""

    terms: tuple[str, ...]
    mode: str
    categories: tuple[_CategoryFit, ...]
    n_rows: int

    @property
    def K(self) -> int:
        return len(self.categories)

    def predict(self, data, n_rows: int) -> np.ndarray:
        return np.column_stack([c.predict(data, n_rows) for c in self.categories])

    def predict_frame(self, frame: CovariateFrame, mask: np.ndarray | None = None) -> np.ndarray:
        """Predictions on the frame rows selected by ``mask`` (all rows if None)."""
        if mask is None:
            mask = np.ones((frame.n, frame.T), dtype=bool)
        m = int(mask.sum())
        return self.predict(lambda name: frame.column(name)[mask], m)

    def summary(self) -> dict[str, Any]:
        cats = []
        for c in self.categories:
            entry: dict[str, Any] = {"kind": c.kind}
            if c.design is not None:
                entry["columns"] = c.design.names
            if c.mean_fit is not None:
                entry["mean_coef"] = c.mean_fit.coef.tolist()
                entry["mean_lambdas"] = np.asarray(c.mean_fit.lambdas).tolist()
            if c.prob_fit is not None:
                entry["prob_coef"] = c.prob_fit.coef.tolist()
                entry["prob_lambdas"] = np.asarray(c.prob_fit.lambdas).tolist()
            if c.kind == "two_part":
                entry["resid_var"] = c.resid_var
            cats.append(entry)
        return {"terms": list(self.terms), "mode": self.mode, "n_rows": self.n_rows, "categories": cats}


def fit_outcome(frame: CovariateFrame, terms: Sequence[str], mode: str = "direct") -> OutcomeModel:
    """Fit ``h_k`` on visit rows with no intervention.

    ``mode="direct"`` regresses Y on the terms; ``mode="two_part"`` multiplies
    a logistic model for ``P(Y > 0)`` by a log-normal back-transformed
    regression of ``log Y`` on the positive rows.
    """
    if mode not in ("direct", "two_part"):
        raise ValueError(f"unknown outcome mode {mode!r}")
    terms = tuple(terms)
    mask = (frame.visit == 1) & (frame.column("A") == 0)
    m = int(mask.sum())
    if m < MIN_OUTCOME_ROWS:
        raise InsufficientDataError(f"only {m} visit rows without intervention; need {MIN_OUTCOME_ROWS}")
    Y = frame.outcomes[mask]

    def rows(sub=None):
        if sub is None:
            return lambda name: frame.column(name)[mask]
        return lambda name: frame.column(name)[mask][sub]

    design = AdditiveDesign.from_terms(terms, rows())
    X = design.transform(rows(), m)
    fits = []
    for k in range(Y.shape[1]):
        y = Y[:, k]
        pos = y > 0
        if not pos.any():
            warnings.warn(f"outcome category {k + 1} is zero on every fitting row; predicting 0", stacklevel=2)
            fits.append(_CategoryFit("zero"))
            continue
        if mode == "direct":
            fits.append(_CategoryFit("direct", design, fit_gaussian(X, y, design.penalties)))
            continue
        prob_fit = None if pos.all() else fit_logistic_guarded(X, pos.astype(float), design.penalties)
        if pos.sum() <= design.n_coef:
            raise InsufficientDataError(f"category {k + 1} has too few positive rows ({int(pos.sum())})")
        mean_fit = fit_gaussian(X[pos], np.log(y[pos]), design.penalties)
        fits.append(_CategoryFit("two_part", design, mean_fit, prob_fit, float(mean_fit.scale)))
    return OutcomeModel(terms, mode, tuple(fits), m)


# ---------------------------------------------------------------- bundles


@dataclass(frozen=True)
class NuisanceSpec:
    """Feature lists for the three nuisance models."""

    intensity: tuple[str, ...] = INTENSITY_C
    propensity: tuple[str, ...] = PROPENSITY_C
    outcome: tuple[str, ...] | None = None
    outcome_mode: str = "direct"

    def outcome_terms(self, K: int) -> tuple[str, ...]:
        return outcome_terms_c(K) if self.outcome is None else tuple(self.outcome)

    @classmethod
    def simulation(cls, pi: str = "C", gamma: str = "C", h: str = "C", **kw) -> "NuisanceSpec":
        """Specification for one cell of the correct/wrong design."""
        for name, flag in (("pi", pi), ("gamma", gamma), ("h", h)):
            if flag not in ("C", "W"):
                raise ValueError(f"{name} flag must be 'C' or 'W', got {flag!r}")
        return cls(
            intensity=INTENSITY_C if gamma == "C" else INTENSITY_W,
            propensity=PROPENSITY_C if pi == "C" else PROPENSITY_W,
            outcome=None if h == "C" else OUTCOME_W,
            **kw,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "intensity": list(self.intensity),
            "propensity": list(self.propensity),
            "outcome": None if self.outcome is None else list(self.outcome),
            "outcome_mode": self.outcome_mode,
        }


@dataclass(frozen=True)
class NuisancePredictions:
    """Nuisance values on every (subject, t) cell.

    ``intensity_lp`` is ``m_v' gamma``; ``propensity`` and ``outcome`` may be
    None when the chosen estimating function does not use them. ``outcome``
    only needs to be finite on visit rows.
    """

    intensity_lp: np.ndarray
    propensity: np.ndarray | None = None
    outcome: np.ndarray | None = None


@dataclass(frozen=True)
class NuisanceSet:
    intensity: IntensityModel
    propensity: PropensityModel | None = None
    outcome: OutcomeModel | None = None
    spec: NuisanceSpec | None = None

    def predict(self, panel: Panel, frame: CovariateFrame) -> NuisancePredictions:
        lp = self.intensity.linear_predictor(frame)
        safe_exp(lp, "intensity linear predictor")
        pi = None
        if self.propensity is not None:
            pi = self.propensity.predict_regions(panel)[frame.region_index]
        h = None
        if self.outcome is not None:
            h = np.full((frame.n, frame.T, frame.K), np.nan)
            mask = frame.visit == 1
            h[mask] = self.outcome.predict_frame(frame, mask)
        return NuisancePredictions(lp, pi, h)

    def summary(self) -> dict[str, Any]:
        return {
            "spec": None if self.spec is None else self.spec.to_dict(),
            "intensity": self.intensity.summary(),
            "propensity": None if self.propensity is None else self.propensity.summary(),
            "outcome": None if self.outcome is None else self.outcome.summary(),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)
