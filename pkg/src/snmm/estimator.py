"""G-estimation of a multiplicative structural nested mean model.

For category k the blip is ``exp(b_k(L)' psi * a)`` with ``b_k`` a basis
vector built by :class:`CausalSpec`. Visits are inverse-intensity weighted
and the estimating function is

    Psi(psi) = (nT)^-1 sum_{i,t} sum_k b_k (H_k(psi) - h_k) w ΔN,
    H_k = Y_k exp(-b_k' psi a),  w = (A - pi) / exp(m_v' gamma).

Three variants are supported: ``"pg"`` drops ``h``, ``"h"`` replaces
``A - pi`` with ``A``, and ``"pgh"`` is the doubly robust full form.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.stats import norm

from .exceptions import ConfigError, ConvergenceError, NumericalError, PositivityError, SNMMError, StructuralError
from .nuisance import (
    NuisancePredictions,
    NuisanceSet,
    NuisanceSpec,
    fit_cox,
    fit_outcome,
    fit_propensity,
    safe_exp,
)
from .panel import CovariateFrame, Panel, build_features

log = logging.getLogger(__name__)

KINDS = ("pg", "h", "pgh")
KIND_LABELS = {"pg": "Psi_pi,gamma", "h": "Psi_h", "pgh": "Psi_pi,gamma,h"}
SOLVER_TOL = 1e-8
MAX_COND = 1e12


def check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ConfigError(f"unknown estimator kind {kind!r}; choose from {', '.join(KINDS)}")
    return kind


@dataclass(frozen=True)
class CausalSpec:
    """Layout of psi.

    Each category owns one coefficient per entry of ``category_terms``; the
    ``shared_terms`` coefficients are common to all categories. With the
    defaults and K = 4 this gives the 10-vector
    ``(psi_10, psi_11, ..., psi_40, psi_41, psi_(1), psi_(2))``.
    """

    K: int = 4
    category_terms: tuple[str, ...] = ("1", "D_LkDn")
    shared_terms: tuple[str, ...] = ("I_LkDn", "E_Short")

    @property
    def p(self) -> int:
        return self.K * len(self.category_terms) + len(self.shared_terms)

    @property
    def names(self) -> list[str]:
        out = [f"psi_{k + 1}{j}" for k in range(self.K) for j in range(len(self.category_terms))]
        return out + [f"psi_({j + 1})" for j in range(len(self.shared_terms))]

    def basis(self, frame: CovariateFrame, mask: np.ndarray) -> np.ndarray:
        """Stacked ``b_k`` vectors on the masked rows, shape ``(m, K, p)``."""
        m = int(mask.sum())
        c = len(self.category_terms)
        out = np.zeros((m, self.K, self.p))
        cat = [frame.column(e)[mask] for e in self.category_terms]
        shared = [frame.column(e)[mask] for e in self.shared_terms]
        for k in range(self.K):
            for j, col in enumerate(cat):
                out[:, k, k * c + j] = col
            for j, col in enumerate(shared):
                out[:, k, self.K * c + j] = col
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"K": self.K, "category_terms": list(self.category_terms), "shared_terms": list(self.shared_terms)}


def transform_H(y, b, a, psi) -> np.ndarray:
    """Treatment-free transform ``H_k = y_k exp(-b_k' psi a)``.

    ``y`` is ``(..., K)``, ``b`` ``(..., K, p)`` and ``a`` broadcastable to ``(...)``.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("outcomes must be nonnegative")
    expo = -(np.asarray(b) @ np.asarray(psi, dtype=float)) * np.asarray(a, dtype=float)[..., None]
    return y * safe_exp(expo, "blip exponent")


@dataclass
class EstimatingProblem:
    """Visit-row arrays needed to evaluate Psi and its derivative."""

    b: np.ndarray  # (m, K, p)
    y: np.ndarray  # (m, K)
    a: np.ndarray  # (m,)
    w: np.ndarray  # (m,)
    h: np.ndarray  # (m, K)
    subject: np.ndarray
    time: np.ndarray
    region: np.ndarray
    n: int
    T: int
    kind: str

    @classmethod
    def build(
        cls,
        frame: CovariateFrame,
        predictions: NuisancePredictions,
        spec: CausalSpec,
        kind: str,
    ) -> "EstimatingProblem":
        check_kind(kind)
        if spec.K != frame.K:
            raise StructuralError(f"causal spec has K={spec.K} but the panel has K={frame.K}")
        mask = frame.visit == 1
        a = frame.column("A")[mask]
        inv_w = 1.0 / safe_exp(predictions.intensity_lp[mask], "intensity linear predictor")
        if kind == "h":
            w = a * inv_w
        else:
            if predictions.propensity is None:
                raise StructuralError("propensity predictions are required for this estimating function")
            w = (a - predictions.propensity[mask]) * inv_w
        if kind == "pg":
            h = np.zeros((int(mask.sum()), frame.K))
        else:
            if predictions.outcome is None:
                raise StructuralError("outcome predictions are required for this estimating function")
            h = predictions.outcome[mask]
            if not np.all(np.isfinite(h)):
                raise StructuralError("outcome predictions missing on some visit rows")
        subj, time = np.nonzero(mask)
        return cls(
            b=spec.basis(frame, mask),
            y=frame.outcomes[mask],
            a=a,
            w=w,
            h=h,
            subject=subj,
            time=time,
            region=frame.region_index[subj],
            n=frame.n,
            T=frame.T,
            kind=kind,
        )

    @property
    def p(self) -> int:
        return self.b.shape[2]

    def H(self, psi) -> np.ndarray:
        return transform_H(self.y, self.b, self.a, psi)

    def contributions(self, psi) -> np.ndarray:
        """Per-visit Psi_it, shape ``(m, p)``."""
        r = (self.H(psi) - self.h) * self.w[:, None]
        return np.einsum("mk,mkp->mp", r, self.b)

    def equation(self, psi) -> np.ndarray:
        return self.contributions(psi).sum(axis=0) / (self.n * self.T)

    def jacobian_sum(self, psi) -> np.ndarray:
        """Unnormalised ``sum_it dPsi_it / dpsi``."""
        coef = -(self.w * self.a)[:, None] * self.H(psi)
        return np.einsum("mk,mkp,mkq->pq", coef, self.b, self.b)

    def jacobian(self, psi) -> np.ndarray:
        return self.jacobian_sum(psi) / (self.n * self.T)


def psi_equation(frame, predictions, psi, kind, spec: CausalSpec | None = None) -> np.ndarray:
    spec = spec or CausalSpec(K=frame.K)
    return EstimatingProblem.build(frame, predictions, spec, kind).equation(psi)


def psi_jacobian(frame, predictions, psi, kind, spec: CausalSpec | None = None) -> np.ndarray:
    spec = spec or CausalSpec(K=frame.K)
    return EstimatingProblem.build(frame, predictions, spec, kind).jacobian(psi)


@dataclass
class SolverTrace:
    iterations: int
    residual_norm: float
    restarted: bool
    converged: bool


def _newton(problem: EstimatingProblem, psi0, max_iter: int, tol: float):
    psi = np.array(psi0, dtype=float)
    f = problem.equation(psi)
    fnorm = float(np.linalg.norm(f))
    for it in range(max_iter + 1):
        if fnorm < tol:
            return psi, it, fnorm, True
        if it == max_iter:
            break
        J = problem.jacobian(psi)
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > MAX_COND:
            raise NumericalError(f"estimating-function Jacobian is singular (condition number {cond:.3e})")
        step = -np.linalg.solve(J, f)
        for _ in range(31):
            cand = psi + step
            try:
                f_c = problem.equation(cand)
                n_c = float(np.linalg.norm(f_c))
            except NumericalError:
                n_c = np.inf
            if n_c < fnorm:
                break
            step = step / 2
        else:
            return psi, it, fnorm, False
        psi, f, fnorm = cand, f_c, n_c
    return psi, max_iter, fnorm, False


def solve_equation(
    problem: EstimatingProblem,
    init=None,
    max_iter: int = 100,
    tol: float = SOLVER_TOL,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, SolverTrace]:
    """Damped Newton with a single perturbed restart."""
    if problem.a.size == 0:
        raise PositivityError("no visits at all; psi is not identified")
    if problem.a.min() == problem.a.max():
        raise PositivityError("intervention is constant over all visit rows; psi is not identified")
    psi0 = np.zeros(problem.p) if init is None else np.asarray(init, dtype=float)
    psi, it, fnorm, ok = _newton(problem, psi0, max_iter, tol)
    if ok:
        return psi, SolverTrace(it, fnorm, False, True)
    rng = rng if rng is not None else np.random.default_rng(0)
    start = psi0 + rng.uniform(-0.1, 0.1, problem.p)
    psi2, it2, fnorm2, ok2 = _newton(problem, start, max_iter, tol)
    if ok2:
        return psi2, SolverTrace(it + it2, fnorm2, True, True)
    raise ConvergenceError(
        f"Newton solver failed after a restart; residual norm {min(fnorm, fnorm2):.3e} (tolerance {tol:g})"
    )


def sandwich(problem: EstimatingProblem, psi, cluster: str = "time"):
    """Cluster-robust sandwich ``A^-1 B A^-T``.

    ``cluster="time"`` sums contributions over subjects within each t before
    squaring; ``"region_time"`` clusters on (region, t) cells instead.
    Returns ``(A, B, cov, se)`` with A and B unnormalised.
    """
    contrib = problem.contributions(psi)
    A = problem.jacobian_sum(psi)
    if cluster == "time":
        key = problem.time
    elif cluster == "region_time":
        key = problem.region * problem.T + problem.time
    else:
        raise ConfigError(f"unknown cluster {cluster!r}; use 'time' or 'region_time'")
    _, inv = np.unique(key, return_inverse=True)
    sums = np.zeros((inv.max() + 1 if inv.size else 0, problem.p))
    np.add.at(sums, inv, contrib)
    B = sums.T @ sums
    if np.linalg.cond(A) > MAX_COND:
        raise NumericalError("sandwich bread matrix is singular")
    Ainv = np.linalg.inv(A)
    cov = Ainv @ B @ Ainv.T
    cov = (cov + cov.T) / 2
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return A, B, cov, se


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    if p < 0.1:
        return "."
    return ""


@dataclass
class GEstimate:
    psi: np.ndarray
    names: list[str]
    sigma1: np.ndarray
    sigma2: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    kind: str
    trace: SolverTrace
    cluster: str = "time"
    nuisance: dict[str, Any] | None = field(default=None, repr=False)

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.psi / self.se

    @property
    def pvalues(self) -> np.ndarray:
        return 2 * norm.sf(np.abs(self.z))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "names": self.names,
            "psi": self.psi.tolist(),
            "se": self.se.tolist(),
            "pvalue": self.pvalues.tolist(),
            "cov": self.cov.tolist(),
            "sigma1": self.sigma1.tolist(),
            "sigma2": self.sigma2.tolist(),
            "cluster": self.cluster,
            "solver": {
                "iterations": self.trace.iterations,
                "residual_norm": self.trace.residual_norm,
                "restarted": self.trace.restarted,
            },
            "nuisance": self.nuisance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [f"{'parameter':<10} {'estimate':>10} {'SE':>9} {'p-value':>9}", "-" * 44]
        for name, est, se, p in zip(self.names, self.psi, self.se, self.pvalues):
            lines.append(f"{name:<10} {est:>10.4f} {se:>9.4f} {p:>9.4f} {stars(p)}")
        lines.append("-" * 44)
        lines.append("*** p<0.001  ** p<0.01  * p<0.05  . p<0.1")
        return "\n".join(lines)


def solve_psi(
    frame: CovariateFrame,
    predictions: NuisancePredictions,
    kind: str,
    spec: CausalSpec | None = None,
    init=None,
    cluster: str = "time",
) -> GEstimate:
    """Solve the estimating equation and attach the sandwich variance."""
    spec = spec or CausalSpec(K=frame.K)
    problem = EstimatingProblem.build(frame, predictions, spec, kind)
    return estimate_from_problem(problem, spec, init=init, cluster=cluster)


def estimate_from_problem(problem: EstimatingProblem, spec: CausalSpec, init=None, cluster: str = "time") -> GEstimate:
    psi, trace = solve_equation(problem, init=init)
    A, B, cov, se = sandwich(problem, psi, cluster)
    nT = problem.n * problem.T
    return GEstimate(psi, spec.names, A / nT, B / nT, cov, se, problem.kind, trace, cluster)


def _step(label: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SNMMError as err:
        raise type(err)(f"{label}: {err}") from err


def fit_nuisances(panel: Panel, frame: CovariateFrame, nspec: NuisanceSpec, kind: str) -> NuisanceSet:
    """Fit only the nuisance models the chosen estimating function uses."""
    check_kind(kind)
    intensity = _step("intensity model", fit_cox, frame, nspec.intensity)
    propensity = None
    if kind != "h":
        propensity = _step("propensity model", fit_propensity, panel, nspec.propensity)
    outcome = None
    if kind != "pg":
        outcome = _step("outcome model", fit_outcome, frame, nspec.outcome_terms(frame.K), nspec.outcome_mode)
    return NuisanceSet(intensity, propensity, outcome, nspec)


def fit_pipeline(
    panel: Panel,
    nspec: NuisanceSpec | None = None,
    kind: str = "pgh",
    spec: CausalSpec | None = None,
    cluster: str = "time",
    frame: CovariateFrame | None = None,
) -> GEstimate:
    """Fit nuisances, predict them on every row, plug in and solve."""
    check_kind(kind)
    nspec = nspec or NuisanceSpec()
    spec = spec or CausalSpec(K=panel.K)
    a = panel.region_a
    if a.min() == a.max():
        raise PositivityError(f"intervention is constant ({int(a.flat[0])}); psi is not identified")
    frame = frame if frame is not None else build_features(panel)
    nuisances = fit_nuisances(panel, frame, nspec, kind)
    predictions = _step("prediction", nuisances.predict, panel, frame)
    est = _step("estimation", solve_psi, frame, predictions, kind, spec, None, cluster)
    est.nuisance = nuisances.summary()
    return est


def estimates_table(estimates: Sequence[GEstimate]) -> str:
    return "\n\n".join(f"[{KIND_LABELS[e.kind]}]\n{e.table()}" for e in estimates)
