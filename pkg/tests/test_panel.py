import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snmm.exceptions import StructuralError, ValidationError
from snmm.panel import (
    Panel,
    RegionSeries,
    SubjectPanel,
    TimeGrid,
    binarize_intervention,
    build_features,
    read_panel_csv,
    restriction_ratio,
    write_panel_csv,
)


def toy_panel(visits, outcomes, y0=None, a=None):
    visits = np.atleast_2d(visits)
    n, T = visits.shape
    outcomes = np.asarray(outcomes, dtype=float).reshape(n, T, -1)
    K = outcomes.shape[2]
    y0 = np.ones((n, K)) if y0 is None else np.atleast_2d(y0)
    a = np.tile([0, 1], T)[:T][None, :] if a is None else np.atleast_2d(a)
    return Panel.from_arrays(a, visits, outcomes, y0, np.zeros(n, dtype=int))


def brute_force_features(panel: Panel, i: int, t: int):
    """Recompute E_Short, E_Long and Y+ at (i, t) by scanning the raw history."""
    s = panel.subjects[i]
    prior = [u for u in range(t) if s.visit[u] == 1]
    if not prior:
        return 0.0, np.log(s.y0.sum()), s.y0.copy()
    last = s.y[prior[-1]]
    e_short = float(np.mean(last == 0))
    e_long = float(np.log(max(np.mean([s.y[u].sum() for u in prior]), 1e-12)))
    ypos = s.y0.copy()
    for u in prior:
        ypos = np.where(s.y[u] > 0, s.y[u], ypos)
    return e_short, e_long, ypos


class TestFeatureExamples:
    def test_e_short_counts_zero_categories(self):
        y = np.full((3, 4), np.nan)
        y[0] = (0, 2.5, 0, 1)
        panel = toy_panel([1, 0, 0], y[None])
        frame = build_features(panel)
        assert frame.columns["E_Short"][0, 1] == 0.5
        assert frame.columns["E_Short"][0, 2] == 0.5

    def test_no_prior_visit_uses_y0(self):
        y0 = np.array([[1.5, 2.0, 0.3, 4.0]])
        panel = toy_panel([0, 1], np.full((1, 2, 4), 1.0), y0=y0)
        frame = build_features(panel)
        assert frame.columns["E_Short"][0, 0] == 0.0
        for k in range(4):
            assert frame.columns[f"y_prev_{k + 1}"][0, 0] == y0[0, k]
            assert frame.columns[f"log_ypos_{k + 1}"][0, 0] == np.log(y0[0, k])

    def test_e_long_mean_of_totals(self):
        y = np.full((1, 3, 1), np.nan)
        y[0, 0, 0] = np.e
        y[0, 1, 0] = np.e**3
        panel = toy_panel([1, 1, 0], y)
        frame = build_features(panel)
        expected = np.log((np.e + np.e**3) / 2)
        assert frame.columns["E_Long"][0, 2] == pytest.approx(2.4338, abs=1e-4)
        assert frame.columns["E_Long"][0, 2] == pytest.approx(expected, rel=1e-14)
        assert brute_force_features(panel, 0, 2)[1] == pytest.approx(expected, rel=1e-14)

    def test_a_prev_tracks_last_visit(self):
        a = np.array([[1, 0, 0, 1, 1]])
        y = np.ones((1, 5, 2))
        panel = toy_panel([1, 0, 1, 0, 0], y, y0=[[1, 1]], a=a)
        frame = build_features(panel)
        np.testing.assert_array_equal(frame.columns["A_prev"][0], [0, 1, 1, 0, 0])
        np.testing.assert_array_equal(frame.columns["A"][0], a[0])

    def test_column_products(self, small_sim):
        frame = build_features(small_sim.panel)
        prod = frame.column("A:D_LkDn")
        np.testing.assert_array_equal(prod, frame.columns["A"] * frame.columns["D_LkDn"])
        np.testing.assert_array_equal(frame.column("1"), np.ones_like(prod))
        with pytest.raises(StructuralError):
            frame.column("nope")


class TestBinarize:
    def test_examples(self):
        np.testing.assert_array_equal(binarize_intervention([-47, -30, -45], 45), [1, 0, 1])

    def test_nan_rejected(self):
        with pytest.raises(ValidationError):
            binarize_intervention([np.nan, -50])

    @pytest.mark.parametrize("threshold", [0, -5])
    def test_threshold_positive(self, threshold):
        with pytest.raises(ValidationError):
            binarize_intervention([-50], threshold)


def test_restriction_ratio_window():
    a = np.array([[1, 1, 0, 0, 0, 0, 0, 0, 1]])
    r = restriction_ratio(a, window=7)
    np.testing.assert_allclose(r[0], np.array([0, 1, 2, 2, 2, 2, 2, 2, 1]) / 7)


class TestValidation:
    def test_time_grid(self):
        with pytest.raises(ValidationError):
            TimeGrid(1)

    def test_negative_outcome(self):
        with pytest.raises(ValidationError):
            SubjectPanel("s", "r", [1, 0], [[-1.0], [np.nan]], [1.0])

    def test_missing_outcome_at_visit(self):
        with pytest.raises(ValidationError):
            SubjectPanel("s", "r", [1, 0], [[np.nan], [np.nan]], [1.0])

    def test_nonpositive_y0(self):
        with pytest.raises(ValidationError):
            SubjectPanel("s", "r", [1, 0], [[1.0], [np.nan]], [0.0])

    def test_outcomes_between_visits_are_missing(self):
        s = SubjectPanel("s", "r", [1, 0], [[1.0], [5.0]], [1.0])
        assert np.isnan(s.y[1, 0])

    def test_unknown_region(self):
        region = RegionSeries("r0", [0, 1])
        subj = SubjectPanel("s", "elsewhere", [1, 0], [[1.0], [np.nan]], [1.0])
        with pytest.raises(StructuralError):
            Panel(TimeGrid(2), (region,), (subj,), 1)

    def test_binary_intervention(self):
        with pytest.raises(ValidationError):
            RegionSeries("r0", [0, 2])

    def test_indicator_and_proportion_ranges(self):
        with pytest.raises(ValidationError):
            RegionSeries("r0", [0, 1], {"I_LkDn": [0, 0.5]})
        with pytest.raises(ValidationError):
            RegionSeries("r0", [0, 1], {"D_LkDn": [0, 1.5]})

    def test_arrays_are_read_only(self, small_sim):
        with pytest.raises(ValueError):
            small_sim.panel.subjects[0].visit[0] = 1


class TestCsv:
    def test_round_trip(self, small_sim, tmp_path):
        panel = small_sim.panel
        write_panel_csv(panel, tmp_path)
        back = read_panel_csv(tmp_path / "regions.csv", tmp_path / "subjects.csv")
        np.testing.assert_array_equal(back.visits, panel.visits)
        np.testing.assert_array_equal(back.outcomes, panel.outcomes)
        np.testing.assert_array_equal(back.y0, panel.y0)
        np.testing.assert_array_equal(back.region_a, panel.region_a)
        np.testing.assert_array_equal(back.region_covariate("D_LkDn"), panel.region_covariate("D_LkDn"))

    def test_missing_column(self, small_sim, tmp_path):
        write_panel_csv(small_sim.panel, tmp_path)
        path = tmp_path / "subjects.csv"
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        drop = header.index("visit")
        path.write_text("\n".join(",".join(c for j, c in enumerate(l.split(",")) if j != drop) for l in lines))
        with pytest.raises(ValidationError, match="visit"):
            read_panel_csv(tmp_path / "regions.csv", path)


def test_features_match_brute_force(medium_sim):
    panel = medium_sim.panel
    frame = build_features(panel)
    rng = np.random.default_rng(0)
    for _ in range(300):
        i, t = int(rng.integers(panel.n)), int(rng.integers(panel.T))
        e_short, e_long, ypos = brute_force_features(panel, i, t)
        assert frame.columns["E_Short"][i, t] == pytest.approx(e_short, abs=1e-15)
        assert frame.columns["E_Long"][i, t] == pytest.approx(e_long, rel=1e-12)
        for k in range(panel.K):
            assert frame.columns[f"log_ypos_{k + 1}"][i, t] == pytest.approx(np.log(ypos[k]), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), cut=st.integers(1, 11))
def test_no_look_ahead(seed, cut):
    """Changing anything at or after t leaves the features at t untouched."""
    rng = np.random.default_rng(seed)
    n, T, K = 3, 12, 3
    visits = (rng.random((n, T)) < 0.5).astype(int)
    y = rng.exponential(size=(n, T, K)) * (rng.random((n, T, K)) < 0.7)
    a = rng.integers(0, 2, (1, T))
    base = build_features(toy_panel(visits, y, y0=np.ones((n, K)), a=a))

    visits2, y2 = visits.copy(), y.copy()
    visits2[:, cut:] = rng.integers(0, 2, (n, T - cut))
    y2[:, cut:] = rng.exponential(size=(n, T - cut, K))
    other = build_features(toy_panel(visits2, y2, y0=np.ones((n, K)), a=a))
    for name in ("E_Short", "E_Long", "A_prev", "y_prev_1", "log_ypos_2", "zero_prev_3"):
        np.testing.assert_array_equal(base.columns[name][:, : cut + 1], other.columns[name][:, : cut + 1])
