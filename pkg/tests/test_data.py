import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stgforecast.data import (
    SynthSpec,
    TimeSeriesPanel,
    apply_scale,
    fit_scale,
    invert_scale,
    load_csv,
    make_windows,
    split_rows,
    synth_panel,
)
from stgforecast.errors import (
    InvalidSpec,
    MalformedHeader,
    NegativeValue,
    NonMonotonicDates,
    RaggedRow,
    WindowTooLong,
)
from stgforecast.metrics import hurst


def write_csv(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


def daily(n, start="2019-01-01"):
    return [str(np.datetime64(start) + i) for i in range(n)]


# --- load_csv ---------------------------------------------------------------

def test_load_csv_daily_eleven_regions(tmp_path, rng):
    regions = [f"r{i}" for i in range(11)]
    rows = [[d, *rng.integers(0, 5000, 11)] for d in daily(880)]
    panel = load_csv(write_csv(tmp_path / "p.csv", ["date", *regions], rows))
    assert (panel.T, panel.N, panel.frequency) == (880, 11, "daily")
    assert panel.regions == tuple(regions)


def test_load_csv_minimal(tmp_path):
    panel = load_csv(write_csv(tmp_path / "p.csv", ["date", "a", "b"],
                               [["2020-01-01", 1, 2], ["2020-01-02", 3, 4]]))
    assert (panel.T, panel.N) == (2, 2)
    np.testing.assert_array_equal(panel.values, [[1, 2], [3, 4]])


def test_load_csv_monthly(tmp_path):
    dates = [f"2010-{m:02d}-01" for m in range(1, 13)]
    panel = load_csv(write_csv(tmp_path / "p.csv", ["date", "a", "b"], [[d, 1, 2] for d in dates]))
    assert panel.frequency == "monthly"


def test_load_csv_decreasing_date_names_row(tmp_path):
    dates = daily(8)
    dates[4] = "2018-12-01"
    with pytest.raises(NonMonotonicDates) as exc:
        load_csv(write_csv(tmp_path / "p.csv", ["date", "a", "b"], [[d, 1, 2] for d in dates]))
    assert exc.value.row == 5


def test_load_csv_errors(tmp_path):
    with pytest.raises(MalformedHeader):
        load_csv(write_csv(tmp_path / "h.csv", ["when", "a", "b"], [["2020-01-01", 1, 2]] * 2))
    with pytest.raises(NegativeValue) as exc:
        load_csv(write_csv(tmp_path / "n.csv", ["date", "a", "b"],
                           [["2020-01-01", 1, 2], ["2020-01-02", 1, -3]]))
    assert (exc.value.row, exc.value.column) == (2, "b")
    with pytest.raises(RaggedRow) as exc:
        load_csv(write_csv(tmp_path / "r.csv", ["date", "a", "b"],
                           [["2020-01-01", 1, 2], ["2020-01-02", 1]]))
    assert exc.value.row == 2


def test_csv_round_trip(tmp_path):
    panel = synth_panel(3, 60, seed=4)
    panel.to_csv(tmp_path / "p.csv")
    back = load_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.values, panel.values)
    np.testing.assert_array_equal(back.timestamps, panel.timestamps)
    assert back.regions == panel.regions


# --- synth_panel --------------------------------------------------------------

def test_synth_is_deterministic(tmp_path):
    a, b = synth_panel(4, 400, seed=7), synth_panel(4, 400, seed=7)
    assert a.values.tobytes() == b.values.tobytes()
    assert synth_panel(4, 400, seed=8).values.tobytes() != a.values.tobytes()


def test_synth_nonnegative_and_shaped():
    p = synth_panel(5, 100, seed=0, spec=SynthSpec(level=1.0, amplitude=5.0))
    assert p.values.shape == (100, 5) and p.values.min() >= 0


def test_synth_invalid_specs():
    with pytest.raises(InvalidSpec):
        synth_panel(3, 100, 0, SynthSpec(phi=1.0))
    with pytest.raises(InvalidSpec):
        synth_panel(3, 100, 0, SynthSpec(amplitude=[1.0, -1.0, 1.0]))
    with pytest.raises(InvalidSpec):
        synth_panel(3, 20, 0, SynthSpec(period=7))


def _sinusoid_corr_quadrature(dphi, n=200_001):
    x = np.linspace(0.0, 2 * np.pi, n)
    a, b = np.sin(x), np.sin(x + dphi)
    return np.trapezoid(a * b, x) / np.sqrt(np.trapezoid(a * a, x) * np.trapezoid(b * b, x))


def test_synth_noiseless_correlation_matches_closed_form():
    phases = [0.0, 0.7, 2.0]
    spec = SynthSpec(level=100.0, amplitude=[10.0, 20.0, 5.0], phases=phases, loadings=0.0,
                     noise_scale=0.0, period=12)
    v = synth_panel(3, 12 * 20, seed=0, spec=spec).values
    for i in range(3):
        for j in range(i + 1, 3):
            got = np.corrcoef(v[:, i], v[:, j])[0, 1]
            dphi = phases[j] - phases[i]
            assert got == pytest.approx(np.cos(dphi), abs=1e-9)
            assert got == pytest.approx(_sinusoid_corr_quadrature(dphi), abs=1e-6)


def test_synth_ar1_hurst_is_persistent():
    spec = SynthSpec(level=1000.0, amplitude=0.0, loadings=0.0, phi=0.8, noise_scale=1.0)
    series = synth_panel(2, 4096, seed=3, spec=spec).values[:, 0]
    assert 0.5 < hurst(series) < 1.0


# --- windows ------------------------------------------------------------------

def test_window_counts():
    assert len(make_windows(synth_panel(2, 100, 0), 90, 1)) == 10
    monthly = synth_panel(2, 144, 0, SynthSpec(period=12, frequency="monthly"))
    assert len(make_windows(monthly, 12, 12)) == 121
    with pytest.raises(WindowTooLong):
        make_windows(TimeSeriesPanel(np.ones((5, 2)), np.datetime64("2020-01-01") + np.arange(5),
                                     ("a", "b"), "daily"), 4, 2)


@given(T=st.integers(8, 60), q=st.integers(2, 20), p=st.integers(1, 8))
def test_window_layout(T, q, p):
    if q + p > T:
        return
    values = np.arange(T * 2, dtype=float).reshape(T, 2)
    panel = TimeSeriesPanel(values, np.datetime64("2020-01-01") + np.arange(T), ("a", "b"), "daily")
    w = make_windows(panel, q, p)
    assert len(w) == T - q - p + 1
    assert w.history.shape == (len(w), q, 2, 1) and w.horizon.shape == (len(w), p, 2)
    for k in (0, len(w) - 1):
        np.testing.assert_array_equal(w.history[k, :, :, 0], values[k:k + q])
        np.testing.assert_array_equal(w.horizon[k], values[k + q:k + q + p])
        assert w.anchors[k] == k + q - 1
    if len(w) > 1:
        both = np.concatenate([w.history[..., 0], w.horizon], axis=1)
        np.testing.assert_array_equal(both[0, 1:], both[1, :-1])


def test_split_rows_chronological():
    tr, va, te = split_rows(400)
    assert (tr.start, tr.stop, va.stop, te.stop) == (0, 280, 320, 400)
    with pytest.raises(InvalidSpec):
        split_rows(10, (0.5, 0.5, 0.5))


# --- scaling ------------------------------------------------------------------

def test_min_max_scaling():
    s = fit_scale(np.array([[0.0, 7.0], [50.0, 7.0], [100.0, 7.0]]))
    out = apply_scale(np.array([[0.0, 7.0], [50.0, 7.0], [100.0, 7.0]]), s)
    np.testing.assert_allclose(out[:, 0], [0, 0.5, 1])
    assert s.constant.tolist() == [False, True]
    np.testing.assert_array_equal(out[:, 1], 0.0)
    assert s.scale[1] == 1.0 and s.shift[1] == 7.0


# magnitudes up to 1e5: float64 spacing there is ~1e-11, so 1e-10 absolute is attainable
@given(arrays(np.float64, (6, 3), elements=st.floats(0, 1e5)),
       arrays(np.float64, (4, 3), elements=st.floats(-1e5, 1e5)))
def test_scale_round_trip(train, x):
    s = fit_scale(train)
    assert np.max(np.abs(invert_scale(apply_scale(x, s), s) - x)) < 1e-10


def test_scale_round_trip_on_window_batch():
    panel = synth_panel(3, 80, seed=1)
    s = fit_scale(panel.values[:50])
    w = make_windows(panel, 10, 2)
    back = invert_scale(apply_scale(w, s), s)
    assert np.abs(back.history - w.history).max() < 1e-10
    assert np.abs(back.horizon - w.horizon).max() < 1e-10


def test_fit_scale_ignores_rows_it_is_not_given():
    panel = synth_panel(3, 200, seed=2)
    tr = split_rows(panel.T)[0]
    mutated = panel.values.copy()
    mutated[tr.stop:] *= 10
    assert fit_scale(panel.values[tr]) == fit_scale(mutated[tr])
