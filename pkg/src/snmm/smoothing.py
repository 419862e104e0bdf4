"""Penalised cubic B-spline additive models (Gaussian and logistic).

Model terms are written as short strings:

``"x"``              linear term
``"x:z"``            product of columns, entered linearly
``"s(x)"``           cubic B-spline smooth with a second-difference penalty
``"s(x, k=5)"``      smooth with basis dimension 5
``"s(x, by=z)"``     smooth multiplied row-wise by column z

An intercept is always present. Smooths are centred (sum-to-zero over the
training rows) so they are identifiable next to the intercept. Smoothing
parameters are chosen per term by generalised cross-validation over a fixed
log-spaced grid, using coordinate sweeps. Logistic models select them on
the IRLS working model at every iteration (performance iteration).
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline
from scipy.special import expit

from .exceptions import ConfigError, StructuralError

log = logging.getLogger(__name__)

N_INTERIOR_KNOTS = 10
LAMBDA_GRID = np.logspace(-5, 4, 20)
GCV_SWEEPS = 2
_SMOOTH_RE = re.compile(r"^s\(\s*([^,\s)]+)\s*((?:,\s*\w+\s*=\s*[^,)]+\s*)*)\)$")


@dataclass(frozen=True)
class Term:
    kind: str  # "linear" | "smooth"
    var: str
    by: str | None = None
    k: int | None = None

    @property
    def label(self) -> str:
        if self.kind == "linear":
            return self.var
        extra = "".join(f", {n}={v}" for n, v in (("k", self.k), ("by", self.by)) if v is not None)
        return f"s({self.var}{extra})"


def parse_term(text: str) -> Term:
    text = text.strip()
    m = _SMOOTH_RE.match(text)
    if m:
        var, rest = m.group(1), m.group(2)
        opts = dict(re.findall(r"(\w+)\s*=\s*([^,)\s]+)", rest))
        bad = set(opts) - {"k", "by"}
        if bad:
            raise ConfigError(f"unknown smooth option(s) {sorted(bad)} in {text!r}")
        k = int(opts["k"]) if "k" in opts else None
        if k is not None and k < 4:
            raise ConfigError(f"basis dimension must be >= 4 in {text!r}")
        return Term("smooth", var, by=opts.get("by"), k=k)
    if not text or "(" in text or ")" in text or text in ("1", "0"):
        raise ConfigError(f"cannot parse model term {text!r}")
    return Term("linear", text)


def parse_terms(terms: Sequence[str]) -> list[Term]:
    return [parse_term(t) for t in terms]


def evaluate(data: Mapping[str, np.ndarray] | Callable[[str], np.ndarray], expr: str) -> np.ndarray:
    """Look up a column, multiplying the factors of ``a:b`` products."""
    get = data if callable(data) else None
    out = None
    for part in expr.split(":"):
        part = part.strip()
        if get is not None:
            col = get(part)
        else:
            if part not in data:
                raise StructuralError(f"missing feature {part!r}")
            col = data[part]
        col = np.asarray(col, dtype=float)
        out = col if out is None else out * col
    return out


@dataclass
class _SmoothBasis:
    var: str
    by: str | None
    knots: np.ndarray
    lo: float
    hi: float
    Z: np.ndarray  # centring reparameterisation, nb x (nb - 1)
    S: np.ndarray  # penalty in centred coordinates

    def raw(self, x: np.ndarray) -> np.ndarray:
        x = np.clip(x, self.lo, self.hi)
        return BSpline.design_matrix(x, self.knots, 3).toarray()

    def design(self, data) -> np.ndarray:
        B = self.raw(evaluate(data, self.var))
        if self.by is not None:
            B = B * evaluate(data, self.by)[:, None]
        return B @ self.Z


def _make_smooth(term: Term, data) -> _SmoothBasis | None:
    x = evaluate(data, term.var)
    u = np.unique(x)
    if u.size < 4:
        return None
    n_int = N_INTERIOR_KNOTS if term.k is None else term.k - 4
    n_int = max(0, min(n_int, u.size - 2))
    probs = np.arange(1, n_int + 1) / (n_int + 1)
    interior = np.unique(np.quantile(u, probs)) if n_int else np.array([])
    lo, hi = float(u[0]), float(u[-1])
    interior = interior[(interior > lo) & (interior < hi)]
    knots = np.concatenate([[lo] * 4, interior, [hi] * 4])
    nb = knots.size - 4
    B = BSpline.design_matrix(np.clip(x, lo, hi), knots, 3).toarray()
    if term.by is not None:
        B = B * evaluate(data, term.by)[:, None]
    D = np.diff(np.eye(nb), 2, axis=0)
    S = D.T @ D
    c = B.mean(axis=0)
    if not np.any(c):
        Z = np.eye(nb)
    else:
        q, _ = np.linalg.qr(c.reshape(-1, 1), mode="complete")
        Z = q[:, 1:]
    return _SmoothBasis(term.var, term.by, knots, lo, hi, Z, Z.T @ S @ Z)


@dataclass
class AdditiveDesign:
    """Design-matrix builder learned from training rows."""

    terms: list[Term]
    names: list[str] = field(default_factory=list)
    _blocks: list = field(default_factory=list, repr=False)
    penalties: list[tuple[slice, np.ndarray]] = field(default_factory=list, repr=False)

    @classmethod
    def from_terms(cls, terms: Sequence[str], data) -> "AdditiveDesign":
        parsed = parse_terms(terms)
        design = cls(parsed)
        names = ["(Intercept)"]
        blocks: list = [("intercept", None)]
        penalties = []
        col = 1
        for term in parsed:
            if term.kind == "smooth":
                basis = _make_smooth(term, data)
                if basis is None:
                    # too few distinct values to smooth; enter linearly
                    expr = term.var if term.by is None else f"{term.var}:{term.by}"
                    blocks.append(("linear", expr))
                    names.append(expr)
                    col += 1
                    continue
                width = basis.Z.shape[1]
                blocks.append(("smooth", basis))
                names.extend(f"{term.label}.{j}" for j in range(width))
                penalties.append((slice(col, col + width), basis.S))
                col += width
            else:
                blocks.append(("linear", term.var))
                names.append(term.var)
                col += 1
        design.names = names
        design._blocks = blocks
        design.penalties = penalties
        return design

    @property
    def n_coef(self) -> int:
        return len(self.names)

    def transform(self, data, n_rows: int | None = None) -> np.ndarray:
        cols = []
        for kind, obj in self._blocks:
            if kind == "intercept":
                continue
            if kind == "linear":
                cols.append(evaluate(data, obj)[:, None])
            else:
                cols.append(obj.design(data))
        if n_rows is None:
            n_rows = cols[0].shape[0] if cols else _infer_rows(data)
        return np.hstack([np.ones((n_rows, 1))] + cols)


def _infer_rows(data) -> int:
    if callable(data):
        raise ValueError("row count required for intercept-only designs with callable data")
    for v in data.values():
        return np.asarray(v).shape[0]
    raise ValueError("cannot infer the number of rows")


@dataclass
class PenalizedFit:
    coef: np.ndarray
    lambdas: np.ndarray
    edf: float
    gcv: float
    scale: float
    n_obs: int
    n_iter: int = 1
    converged: bool = True
    separation: bool = False


def _embed(penalties, p):
    mats = []
    for sl, S in penalties:
        M = np.zeros((p, p))
        M[sl, sl] = S
        mats.append(M)
    return mats


def _penalty_scales(G, penalties):
    scales = []
    for sl, S in penalties:
        tr_s = np.trace(S)
        tr_g = np.trace(G[sl, sl])
        scales.append(tr_g / tr_s if tr_s > 0 and tr_g > 0 else 1.0)
    return np.asarray(scales)


class _GcvProblem:
    """Weighted least-squares pieces needed to score many penalties cheaply."""

    def __init__(self, G, g, zWz, n, mats, ridge):
        self.G, self.g, self.zWz, self.n = G, g, zWz, n
        self.mats = mats
        self.ridge = ridge * np.eye(G.shape[0])

    def solve(self, lambdas):
        A = self.G + self.ridge
        for lam, M in zip(lambdas, self.mats):
            A = A + lam * M
        try:
            cf = linalg.cho_factor(A, check_finite=False)
            beta = linalg.cho_solve(cf, self.g, check_finite=False)
            edf = np.trace(linalg.cho_solve(cf, self.G, check_finite=False))
        except linalg.LinAlgError:
            beta = linalg.lstsq(A, self.g)[0]
            edf = np.trace(linalg.lstsq(A, self.G)[0])
        rss = self.zWz - 2 * beta @ self.g + beta @ self.G @ beta
        rss = max(rss, 0.0)
        denom = max(self.n - edf, 1e-8)
        return beta, edf, rss, self.n * rss / denom**2

    def select(self, grid, start=None):
        m = len(self.mats)
        if m == 0:
            beta, edf, rss, gcv = self.solve([])
            return np.zeros(0), beta, edf, rss, gcv
        lam = np.full(m, grid[len(grid) // 2]) if start is None else np.array(start, dtype=float)
        best = self.solve(lam)
        for _ in range(GCV_SWEEPS):
            for j in range(m):
                scores = []
                for value in grid:
                    trial = lam.copy()
                    trial[j] = value
                    scores.append((self.solve(trial), value))
                idx = int(np.argmin([s[0][3] for s in scores]))
                lam[j] = scores[idx][1]
                best = scores[idx][0]
        beta, edf, rss, gcv = best
        return lam, beta, edf, rss, gcv


def fit_gaussian(X, y, penalties, grid=LAMBDA_GRID, weights=None) -> PenalizedFit:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    Xw = X * w[:, None]
    G = X.T @ Xw
    g = Xw.T @ y
    scales = _penalty_scales(G, penalties)
    mats = [s * M for s, M in zip(scales, _embed(penalties, p))]
    ridge = 1e-8 * max(np.trace(G) / p, 1e-12)
    prob = _GcvProblem(G, g, float(y @ (w * y)), n, mats, ridge)
    lam, beta, edf, rss, gcv = prob.select(np.asarray(grid))
    scale = rss / max(n - edf, 1.0)
    return PenalizedFit(beta, lam * scales if len(scales) else lam, edf, gcv, scale, n)


def _binomial_deviance(y, mu):
    mu = np.clip(mu, 1e-15, 1 - 1e-15)
    return -2 * np.sum(y * np.log(mu) + (1 - y) * np.log1p(-mu))


def fit_logistic(
    X, y, penalties, grid=LAMBDA_GRID, max_iter: int = 60, tol: float = 1e-9, ridge: float = 1e-8
) -> PenalizedFit:
    """Penalised IRLS with per-iteration GCV selection of the smoothing parameters."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    grid = np.asarray(grid)
    mats0 = _embed(penalties, p)
    mu = (y + 0.5) / 2
    eta = np.log(mu / (1 - mu))
    scales = None
    lam = None
    dev_old = np.inf
    converged = False
    freeze_after = 25
    it = 0
    for it in range(1, max_iter + 1):
        w = np.maximum(mu * (1 - mu), 1e-10)
        z = eta + (y - mu) / w
        Xw = X * w[:, None]
        G = X.T @ Xw
        g = Xw.T @ z
        if scales is None:
            scales = _penalty_scales(G, penalties)
            mats = [s * M for s, M in zip(scales, mats0)]
        prob = _GcvProblem(G, g, float(z @ (w * z)), n, mats, ridge * max(np.trace(G) / p, 1e-12))
        if it <= freeze_after:
            lam, beta, edf, rss, gcv = prob.select(grid, start=lam)
        else:
            beta, edf, rss, gcv = prob.solve(lam)
        eta_new = X @ beta
        mu_new = expit(eta_new)
        dev = _binomial_deviance(y, mu_new)
        eta, mu = eta_new, mu_new
        if abs(dev - dev_old) < tol * (abs(dev) + 0.1):
            converged = True
            break
        dev_old = dev
    separation = bool(np.mean(np.abs(eta) > 30) > 0.05)
    fit = PenalizedFit(
        beta, lam * scales if len(scales) else lam, edf, gcv, 1.0, n, it, converged, separation
    )
    if not converged:
        log.warning("penalised logistic fit stopped after %d iterations without converging", it)
    return fit


def fit_logistic_guarded(X, y, penalties, grid=LAMBDA_GRID) -> PenalizedFit:
    """Logistic fit that retries with a heavier ridge when separation shows up."""
    fit = fit_logistic(X, y, penalties, grid)
    if fit.separation:
        warnings.warn("quasi-separation in logistic fit; refitting with a heavier ridge penalty", stacklevel=2)
        fit = fit_logistic(X, y, penalties, np.asarray(grid) * 1e3, ridge=1e-2)
        fit.separation = True
    return fit
