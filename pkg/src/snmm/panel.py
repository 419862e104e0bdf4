"""Panel data model: regional intervention histories and irregular subject visits.

Times run over the grid ``1..T``; index ``t`` is stored at array position
``t - 1``. ``t = 0`` is the initial state and only carries each subject's
positive initial outcome vector ``y0``.

Regional covariate names follow a small convention that drives validation:
names starting with ``I_`` are indicators, and ``D_LkDn`` / ``R_A`` are
proportions in ``[0, 1]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .exceptions import StructuralError, ValidationError

log = logging.getLogger(__name__)

PROPORTION_COLUMNS = ("D_LkDn", "R_A")


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TimeGrid:
    """Discrete follow-up grid ``{1, ..., T}``."""

    T: int

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 2:
            raise ValidationError(f"time horizon must be an integer >= 2, got {self.T!r}")

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.T + 1)


@dataclass(frozen=True)
class RegionSeries:
    region_id: str
    a: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        a = _frozen(self.a, dtype=np.int8)
        if a.ndim != 1:
            raise ValidationError(f"region {self.region_id}: intervention must be 1-D")
        if not np.isin(a, (0, 1)).all():
            raise ValidationError(f"region {self.region_id}: intervention must be binary")
        object.__setattr__(self, "a", a)
        covs = {}
        for name, values in self.covariates.items():
            v = _frozen(values)
            if v.shape != a.shape:
                raise ValidationError(
                    f"region {self.region_id}: covariate {name} has length {v.size}, expected {a.size}"
                )
            if np.isnan(v).any():
                raise ValidationError(f"region {self.region_id}: covariate {name} has missing values")
            if name.startswith("I_") and not np.isin(v, (0.0, 1.0)).all():
                raise ValidationError(f"region {self.region_id}: indicator {name} must be 0/1")
            if name in PROPORTION_COLUMNS and ((v < 0) | (v > 1)).any():
                raise ValidationError(f"region {self.region_id}: {name} must lie in [0, 1]")
            covs[name] = v
        object.__setattr__(self, "covariates", covs)


@dataclass(frozen=True)
class SubjectPanel:
    subject_id: str
    region_id: str
    visit: np.ndarray
    y: np.ndarray
    y0: np.ndarray
    x: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        visit = _frozen(self.visit, dtype=np.int8)
        y = np.array(self.y, dtype=float, copy=True)
        y0 = _frozen(self.y0)
        if visit.ndim != 1 or y.ndim != 2 or y.shape[0] != visit.size:
            raise ValidationError(f"subject {self.subject_id}: visit/outcome shapes disagree")
        if not np.isin(visit, (0, 1)).all():
            raise ValidationError(f"subject {self.subject_id}: visit indicator must be 0/1")
        if y0.shape != (y.shape[1],) or not (y0 > 0).all():
            raise ValidationError(f"subject {self.subject_id}: y0 must be a positive K-vector")
        seen = y[visit == 1]
        if np.isnan(seen).any():
            raise ValidationError(f"subject {self.subject_id}: missing outcome at a visit")
        if (seen < 0).any():
            raise ValidationError(f"subject {self.subject_id}: negative outcome")
        # outcomes are only defined at visits; anything else is forced to missing
        y[visit == 0] = np.nan
        y.setflags(write=False)
        object.__setattr__(self, "visit", visit)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "x", {k: float(v) for k, v in self.x.items()})


@dataclass(frozen=True)
class Panel:
    """Regions plus subjects on a common grid.

    The stacked-array views (``visits``, ``outcomes``, ...) are what the
    numerical code consumes; the per-entity records are the validated source.
    """

    grid: TimeGrid
    regions: tuple[RegionSeries, ...]
    subjects: tuple[SubjectPanel, ...]
    K: int

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if self.K < 1:
            raise ValidationError("K must be >= 1")
        if not self.regions:
            raise ValidationError("panel has no regions")
        T = self.grid.T
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate region ids")
        names = set(self.regions[0].covariates)
        for r in self.regions:
            if r.a.size != T:
                raise ValidationError(f"region {r.region_id}: series length {r.a.size} != T={T}")
            if set(r.covariates) != names:
                raise ValidationError(f"region {r.region_id}: covariate columns differ across regions")
        known = set(ids)
        xnames = set(self.subjects[0].x) if self.subjects else set()
        for s in self.subjects:
            if s.region_id not in known:
                raise StructuralError(f"subject {s.subject_id}: unknown region {s.region_id!r}")
            if s.visit.size != T:
                raise ValidationError(f"subject {s.subject_id}: series length {s.visit.size} != T={T}")
            if s.y.shape[1] != self.K:
                raise ValidationError(f"subject {s.subject_id}: expected {self.K} outcome categories")
            if set(s.x) != xnames:
                raise ValidationError(f"subject {s.subject_id}: baseline covariates differ across subjects")

    @classmethod
    def from_arrays(
        cls,
        a: np.ndarray,
        visits: np.ndarray,
        outcomes: np.ndarray,
        y0: np.ndarray,
        region_of: np.ndarray,
        region_covariates: Mapping[str, np.ndarray] | None = None,
        baseline: Mapping[str, np.ndarray] | None = None,
        region_ids: Sequence[str] | None = None,
        subject_ids: Sequence[str] | None = None,
    ) -> "Panel":
        """Build a panel from stacked arrays.

        ``a`` is ``(R, T)``, ``visits`` ``(n, T)``, ``outcomes`` ``(n, T, K)``,
        ``y0`` ``(n, K)`` and ``region_of`` holds each subject's region index.
        """
        a = np.asarray(a)
        R, T = a.shape
        n, _, K = np.shape(outcomes)
        region_covariates = region_covariates or {}
        baseline = baseline or {}
        region_ids = list(region_ids) if region_ids is not None else [f"r{j}" for j in range(R)]
        subject_ids = list(subject_ids) if subject_ids is not None else [f"s{i}" for i in range(n)]
        regions = [
            RegionSeries(region_ids[j], a[j], {k: np.asarray(v)[j] for k, v in region_covariates.items()})
            for j in range(R)
        ]
        subjects = [
            SubjectPanel(
                subject_ids[i],
                region_ids[int(region_of[i])],
                visits[i],
                outcomes[i],
                y0[i],
                {k: np.asarray(v)[i] for k, v in baseline.items()},
            )
            for i in range(n)
        ]
        return cls(TimeGrid(T), tuple(regions), tuple(subjects), K)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def T(self) -> int:
        return self.grid.T

    @cached_property
    def region_index(self) -> np.ndarray:
        lookup = {r.region_id: j for j, r in enumerate(self.regions)}
        return np.array([lookup[s.region_id] for s in self.subjects], dtype=int)

    @cached_property
    def region_a(self) -> np.ndarray:
        return np.stack([r.a for r in self.regions]).astype(float)

    @cached_property
    def visits(self) -> np.ndarray:
        if not self.subjects:
            return np.zeros((0, self.T))
        return np.stack([s.visit for s in self.subjects]).astype(float)

    @cached_property
    def outcomes(self) -> np.ndarray:
        if not self.subjects:
            return np.zeros((0, self.T, self.K))
        return np.stack([s.y for s in self.subjects])

    @cached_property
    def y0(self) -> np.ndarray:
        if not self.subjects:
            return np.zeros((0, self.K))
        return np.stack([s.y0 for s in self.subjects])

    def region_covariate(self, name: str) -> np.ndarray:
        if name not in self.regions[0].covariates:
            raise StructuralError(f"no regional covariate named {name!r}")
        return np.stack([r.covariates[name] for r in self.regions])


@dataclass(frozen=True)
class CovariateFrame:
    """Per-(subject, t) derived features, stored as ``(n, T)`` arrays.

    Besides the regional and baseline columns the frame always holds:

    ``A``          intervention at t (from the subject's region)
    ``E_Short``    share of zero categories at the most recent visit before t
    ``E_Long``     log of the mean total outcome over visits before t
    ``A_prev``     intervention at the most recent visit before t (0 if none)
    ``y_prev_k``   outcome of category k at the most recent visit (y0 if none)
    ``log_ypos_k`` log of the most recent positive outcome of category k
    ``zero_prev_k`` indicator that ``y_prev_k`` is zero
    """

    columns: Mapping[str, np.ndarray]
    visit: np.ndarray
    outcomes: np.ndarray
    region_index: np.ndarray

    @property
    def n(self) -> int:
        return self.visit.shape[0]

    @property
    def T(self) -> int:
        return self.visit.shape[1]

    @property
    def K(self) -> int:
        return self.outcomes.shape[2]

    def column(self, expr: str) -> np.ndarray:
        """Return a column; ``"1"`` is the constant and ``"a:b"`` a product."""
        if expr == "1":
            return np.ones(self.visit.shape)
        out = None
        for part in expr.split(":"):
            part = part.strip()
            if part not in self.columns:
                raise StructuralError(f"feature {part!r} not in covariate frame")
            out = self.columns[part] if out is None else out * self.columns[part]
        return out

    def to_dataframe(self) -> pd.DataFrame:
        n, T = self.visit.shape
        df = pd.DataFrame(
            {
                "subject": np.repeat(np.arange(n), T),
                "t": np.tile(np.arange(1, T + 1), n),
                "visit": self.visit.ravel(),
            }
        )
        for name, values in self.columns.items():
            df[name] = values.ravel()
        return df


def restriction_ratio(a: np.ndarray, window: int = 7) -> np.ndarray:
    """Share of the preceding ``window`` periods under intervention.

    Periods before ``t = 1`` count as untreated. Works row-wise on ``(R, T)``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    padded = np.concatenate([np.zeros((a.shape[0], window)), a], axis=1)
    csum = np.concatenate([np.zeros((a.shape[0], 1)), np.cumsum(padded, axis=1)], axis=1)
    T = a.shape[1]
    idx = np.arange(T) + window  # position of t in padded
    return (csum[:, idx] - csum[:, idx - window]) / window


def build_features(panel: Panel) -> CovariateFrame:
    """Derive the per-(subject, t) covariates used by every fitter.

    Features at t only use outcomes from visits strictly before t.
    """
    n, T, K = panel.n, panel.T, panel.K
    visits = panel.visits
    outcomes = panel.outcomes
    y0 = panel.y0
    ridx = panel.region_index

    e_short = np.empty((n, T))
    e_long = np.empty((n, T))
    y_prev = np.empty((n, T, K))
    y_pos = np.empty((n, T, K))
    a_prev = np.empty((n, T))
    a_subj = panel.region_a[ridx]

    last = y0.copy()
    last_pos = y0.copy()
    last_a = np.zeros(n)
    total = np.zeros(n)
    count = np.zeros(n)
    init_long = np.log(y0.sum(axis=1)) if n else np.zeros(0)
    for t in range(T):
        e_short[:, t] = (last == 0).mean(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            mean_total = np.where(count > 0, total / np.maximum(count, 1), np.nan)
            e_long[:, t] = np.where(count > 0, np.log(np.maximum(mean_total, 1e-12)), init_long)
        y_prev[:, t] = last
        y_pos[:, t] = last_pos
        a_prev[:, t] = last_a
        v = visits[:, t] == 1
        if v.any():
            yt = outcomes[v, t]
            last[v] = yt
            last_pos[v] = np.where(yt > 0, yt, last_pos[v])
            last_a[v] = a_subj[v, t]
            total[v] += yt.sum(axis=1)
            count[v] += 1

    cols: dict[str, np.ndarray] = {
        "A": a_subj.astype(float),
        "A_prev": a_prev,
        "E_Short": e_short,
        "E_Long": e_long,
        "t": np.broadcast_to(np.arange(1, T + 1, dtype=float), (n, T)).copy(),
    }
    for name in panel.regions[0].covariates:
        cols[name] = panel.region_covariate(name)[ridx]
    if "R_A" not in cols:
        cols["R_A"] = restriction_ratio(panel.region_a)[ridx]
    for name in panel.subjects[0].x if panel.subjects else ():
        xs = np.array([s.x[name] for s in panel.subjects])
        cols[name] = np.repeat(xs[:, None], T, axis=1)
    for k in range(K):
        cols[f"y_prev_{k + 1}"] = y_prev[:, :, k]
        cols[f"log_ypos_{k + 1}"] = np.log(y_pos[:, :, k])
        cols[f"zero_prev_{k + 1}"] = (y_prev[:, :, k] == 0).astype(float)
    for v in cols.values():
        v.setflags(write=False)
    return CovariateFrame(cols, visits, outcomes, ridx)


def binarize_intervention(relative_change, threshold: float = 45.0) -> np.ndarray:
    """Map relative mobility change (percent) to a binary intervention.

    A period counts as intervened when the reduction is at least
    ``threshold`` percent, i.e. ``relative_change <= -threshold``.
    """
    if not threshold > 0:
        raise ValidationError(f"threshold must be positive, got {threshold}")
    rc = np.asarray(relative_change, dtype=float)
    if np.isnan(rc).any():
        raise ValidationError("relative change contains NaN")
    return (rc <= -threshold).astype(np.int8)


# -- CSV ingestion ----------------------------------------------------------------


def write_panel_csv(panel: Panel, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``regions.csv`` and ``subjects.csv``.

    ``y0`` travels as baseline columns ``y0_1..y0_K`` repeated on every row.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    T = panel.T
    t = np.arange(1, T + 1)
    rframes = []
    for r in panel.regions:
        d = {"region_id": r.region_id, "t": t, "a": r.a.astype(int)}
        d.update({k: v for k, v in r.covariates.items()})
        rframes.append(pd.DataFrame(d))
    regions = pd.concat(rframes, ignore_index=True)

    sframes = []
    for s in panel.subjects:
        d = {"subject_id": s.subject_id, "region_id": s.region_id, "t": t, "visit": s.visit.astype(int)}
        for k in range(panel.K):
            d[f"y_{k + 1}"] = s.y[:, k]
        for name, val in s.x.items():
            d[name] = val
        for k in range(panel.K):
            d[f"y0_{k + 1}"] = s.y0[k]
        sframes.append(pd.DataFrame(d))
    subjects = pd.concat(sframes, ignore_index=True)

    rpath, spath = out_dir / "regions.csv", out_dir / "subjects.csv"
    regions.to_csv(rpath, index=False, float_format="%.17g", lineterminator="\n")
    subjects.to_csv(spath, index=False, float_format="%.17g", lineterminator="\n")
    return rpath, spath


def _require(df: pd.DataFrame, cols: Sequence[str], what: str):
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise ValidationError(f"{what}: missing required columns {missing}")


def read_panel_csv(regions_csv: str | Path, subjects_csv: str | Path) -> Panel:
    try:
        regions = pd.read_csv(regions_csv, dtype={"region_id": str}, encoding="utf-8", float_precision="round_trip")
        subjects = pd.read_csv(
            subjects_csv, dtype={"subject_id": str, "region_id": str}, encoding="utf-8", float_precision="round_trip"
        )
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise ValidationError(f"cannot read panel CSV: {exc}") from exc
    _require(regions, ["region_id", "t", "a"], "regions.csv")
    _require(subjects, ["subject_id", "region_id", "t", "visit"], "subjects.csv")

    ycols = sorted(
        (c for c in subjects.columns if c.startswith("y_") and c[2:].isdigit()), key=lambda c: int(c[2:])
    )
    K = len(ycols)
    if K == 0:
        raise ValidationError("subjects.csv: no outcome columns y_1..y_K")
    y0cols = [f"y0_{k + 1}" for k in range(K)]
    _require(subjects, y0cols, "subjects.csv")
    T = int(regions["t"].max())
    if regions["t"].min() < 1 or subjects["t"].min() < 1 or subjects["t"].max() > T:
        raise ValidationError("time indices must lie in 1..T")

    rcov = [c for c in regions.columns if c not in ("region_id", "t", "a")]
    region_list = []
    for rid, g in regions.groupby("region_id", sort=False):
        g = g.sort_values("t")
        if not np.array_equal(g["t"].to_numpy(), np.arange(1, T + 1)):
            raise ValidationError(f"regions.csv: region {rid} does not cover t=1..{T} exactly once")
        region_list.append(RegionSeries(str(rid), g["a"].to_numpy(), {c: g[c].to_numpy(float) for c in rcov}))

    base = [c for c in subjects.columns if c not in {"subject_id", "region_id", "t", "visit", *ycols, *y0cols}]
    subject_list = []
    for sid, g in subjects.groupby("subject_id", sort=False):
        g = g.sort_values("t")
        if not np.array_equal(g["t"].to_numpy(), np.arange(1, T + 1)):
            raise ValidationError(f"subjects.csv: subject {sid} does not cover t=1..{T} exactly once")
        rid = g["region_id"].iloc[0]
        x = {c: float(g[c].iloc[0]) for c in base}
        subject_list.append(
            SubjectPanel(
                str(sid), str(rid), g["visit"].to_numpy(), g[ycols].to_numpy(float), g[y0cols].iloc[0].to_numpy(float), x
            )
        )
    return Panel(TimeGrid(T), tuple(region_list), tuple(subject_list), K)
