import json
import math
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sigpca.data import (DataError, GriddedField, StationSeries, SyntheticSpec, aggregate_subhourly,
                         bias_surface, generate_synthetic, load_field, load_stations,
                         nearest_gridpoints, read_station_csv, reshape_windows, save_field,
                         save_stations)


def _field(S=2, T=4, D=3, seed=0):
    rng = np.random.default_rng(seed)
    coords = np.column_stack([rng.uniform(-80, 80, D), rng.uniform(-170, 170, D)])
    return GriddedField(rng.normal(size=(S, T, D)), coords, [f"2010-01-{i + 1:02d}" for i in range(S)],
                        "t2m", "degC")


def test_load_field_shape_and_blob_size(tmp_path):
    save_field(_field(), tmp_path / "f")
    assert (tmp_path / "f" / "data.bin").stat().st_size == 192
    manifest = json.loads((tmp_path / "f" / "manifest.json").read_text())
    for key in ("schema_version", "variable", "units", "shape", "coords", "sample_labels",
                "byte_order", "dtype"):
        assert key in manifest
    assert manifest["byte_order"] == "LE" and manifest["dtype"] == "f64"
    assert load_field(tmp_path / "f").shape == (2, 4, 3)


def test_load_field_blob_size_mismatch(tmp_path):
    save_field(_field(), tmp_path / "f")
    blob = tmp_path / "f" / "data.bin"
    blob.write_bytes(blob.read_bytes()[:190])
    with pytest.raises(DataError, match="size mismatch"):
        load_field(tmp_path / "f")


def test_load_field_missing_manifest(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError, match="missing manifest"):
        load_field(tmp_path / "empty")


def test_load_field_rejects_nan_and_bad_coords(tmp_path):
    f = _field()
    save_field(f, tmp_path / "f")
    raw = np.frombuffer((tmp_path / "f" / "data.bin").read_bytes(), "<f8").copy()
    raw[5] = np.nan
    (tmp_path / "f" / "data.bin").write_bytes(raw.tobytes())
    with pytest.raises(DataError, match="NaN"):
        load_field(tmp_path / "f")

    save_field(f, tmp_path / "g")
    m = json.loads((tmp_path / "g" / "manifest.json").read_text())
    m["coords"][0] = [95.0, 0.0]
    (tmp_path / "g" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DataError, match="out of range"):
        load_field(tmp_path / "g")


@settings(max_examples=25, deadline=None)
@given(S=st.integers(1, 4), T=st.integers(2, 6), D=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_field_round_trip_bit_exact(tmp_path_factory, S, T, D, seed):
    f = _field(S, T, D, seed)
    path = tmp_path_factory.mktemp("rt") / "f"
    save_field(f, path)
    g = load_field(path)
    assert g.values.tobytes() == f.values.tobytes()
    assert g.coords.tobytes() == f.coords.tobytes()
    assert g.sample_labels == f.sample_labels


def test_station_round_trip_bit_exact(tmp_path):
    _, stations, _ = generate_synthetic(SyntheticSpec(n_samples=3, n_lat=3, n_lon=3, n_stations=5,
                                                      station_missing=0.3))
    save_stations(stations, tmp_path / "s")
    back = load_stations(tmp_path / "s")
    assert back.values.tobytes() == stations.values.tobytes()
    assert np.array_equal(back.mask, stations.mask)
    assert back.station_ids == stations.station_ids
    assert np.array_equal(back.missing_fraction, 1.0 - stations.mask.mean(axis=(0, 1)))


# ------------------------------------------------------------------ aggregation

T0 = datetime(2010, 1, 1)


def test_aggregate_mean_of_two_and_empty_hour():
    raw = {"A": [(T0 + timedelta(minutes=5), 10.0), (T0 + timedelta(minutes=50), 12.0),
                 (T0 + timedelta(hours=2, minutes=1), 7.0)]}
    st_ = aggregate_subhourly(raw, [(40.0, -90.0)], T0, 1, 3)
    assert st_.values[0, 0, 0] == 11.0 and st_.mask[0, 0, 0]
    assert not st_.mask[0, 1, 0]
    assert st_.values[0, 2, 0] == 7.0
    assert st_.missing_fraction[0] == pytest.approx(1 / 3)


def test_aggregate_errors():
    with pytest.raises(DataError, match="not sorted"):
        aggregate_subhourly({"A": [(T0 + timedelta(hours=1), 1.0), (T0, 2.0)]}, [(0, 0)], T0, 1, 3)
    with pytest.raises(DataError, match="outside"):
        aggregate_subhourly({"A": [(T0 + timedelta(hours=5), 1.0)]}, [(0, 0)], T0, 1, 3)


def _random_streams(rng, n_st, hours):
    raw = {}
    for p in range(n_st):
        n = rng.integers(0, 6 * hours)
        secs = np.sort(rng.uniform(0, hours * 3600, n))
        raw[f"S{p}"] = [(T0 + timedelta(seconds=float(s)), float(v))
                        for s, v in zip(secs, rng.normal(10, 3, n))]
    return raw


def test_aggregate_matches_bruteforce_oracle():
    rng = np.random.default_rng(3)
    raw = _random_streams(rng, 3, 48)
    out = aggregate_subhourly(raw, [(0, 0)] * 3, T0, 2, 24)
    for p, sid in enumerate(raw):
        for hour in range(48):
            lo, hi = T0 + timedelta(hours=hour), T0 + timedelta(hours=hour + 1)
            vals = [v for t, v in raw[sid] if lo <= t < hi]
            s, h = divmod(hour, 24)
            if vals:
                assert out.mask[s, h, p]
                assert out.values[s, h, p] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
            else:
                assert not out.mask[s, h, p]


def test_aggregate_daily_mean_equals_raw_mean_when_fully_observed():
    rng = np.random.default_rng(4)
    raw = {"A": []}
    for h in range(24):
        for _ in range(4):
            raw["A"].append((T0 + timedelta(hours=h, minutes=int(rng.integers(0, 60))), float(rng.normal())))
    raw["A"].sort(key=lambda r: r[0])
    out = aggregate_subhourly(raw, [(0, 0)], T0, 1, 24)
    assert out.mask.all()
    assert out.values.mean() == pytest.approx(np.mean([v for _, v in raw["A"]]), abs=1e-12)


def test_station_csv_ingest(tmp_path):
    path = tmp_path / "obs.csv"
    path.write_text("station_id,lat,lon,timestamp,value\n"
                    "X,41.0,-88.0,2010-01-01T00:30:00,3.0\n"
                    "X,41.0,-88.0,2010-01-01T00:10:00,1.0\n"
                    "Y,42.0,-87.0,2010-01-01T01:00:00,5.0\n")
    raw, coords = read_station_csv(path)
    assert list(raw) == ["X", "Y"]
    assert coords.tolist() == [[41.0, -88.0], [42.0, -87.0]]
    st_ = aggregate_subhourly(raw, coords, T0, 1, 2)
    assert st_.values[0, 0, 0] == 2.0
    assert st_.values[0, 1, 1] == 5.0 and not st_.mask[0, 0, 1]


def test_reshape_windows_wind_case():
    flat = np.arange(695 * 2, dtype=float).reshape(695, 2)
    out = reshape_windows(flat, 15)
    assert out.shape == (46, 15, 2)
    assert np.array_equal(out[1, 0], flat[15])


# --------------------------------------------------------------------- nearest

def _haversine(a, b):
    la1, lo1, la2, lo2 = map(math.radians, (*a, *b))
    h = math.sin((la2 - la1) / 2) ** 2 + math.cos(la1) * math.cos(la2) * math.sin((lo2 - lo1) / 2) ** 2
    return 2 * 6371.0 * math.asin(math.sqrt(h))


def test_nearest_exact_and_tie():
    grid = np.array([[0.0, 3.0]] * 10)
    grid[7] = [10.0, 10.0]
    nm = nearest_gridpoints(np.array([[10.0, 10.0]]), grid)
    assert nm.pairs == [(0, 7, 0.0)]

    grid = np.array([[50.0, 50.0]] * 6)
    grid[2] = [0.0, 1.0]
    grid[5] = [0.0, -1.0]
    assert nearest_gridpoints(np.array([[0.0, 0.0]]), grid).gridpoint[0] == 2


def test_nearest_matches_exhaustive_oracle():
    rng = np.random.default_rng(7)
    grid = np.column_stack([rng.uniform(30, 50, 100), rng.uniform(-100, -80, 100)])
    sts = np.column_stack([rng.uniform(30, 50, 20), rng.uniform(-100, -80, 20)])
    nm = nearest_gridpoints(sts, grid)
    for p in range(20):
        d = [_haversine(sts[p], g) for g in grid]
        best = min(range(100), key=lambda g: (d[g], g))
        assert nm.gridpoint[p] == best
        assert nm.distance_km[p] == pytest.approx(d[best], rel=1e-12, abs=1e-9)


def test_nearest_permutation_invariant_and_idempotent():
    rng = np.random.default_rng(8)
    grid = np.column_stack([rng.uniform(30, 50, 50), rng.uniform(-100, -80, 50)])
    sts = np.column_stack([rng.uniform(30, 50, 12), rng.uniform(-100, -80, 12)])
    a = nearest_gridpoints(sts, grid)
    perm = rng.permutation(12)
    b = nearest_gridpoints(sts[perm], grid)
    assert np.array_equal(a.gridpoint[perm], b.gridpoint)
    assert np.array_equal(nearest_gridpoints(sts, grid).gridpoint, a.gridpoint)


def test_nearest_empty_inputs():
    with pytest.raises(DataError):
        nearest_gridpoints(np.zeros((0, 2)), np.zeros((3, 2)))


# ------------------------------------------------------------------- synthetic

def test_synthetic_zero_perturbation_equals_truth():
    model, _, truth = generate_synthetic(SyntheticSpec(n_samples=4, n_lat=4, n_lon=5, bias_amplitude=0.0,
                                                       noise_sigma=0.0))
    assert np.array_equal(model.values, truth.values)


def test_synthetic_deterministic():
    spec = SyntheticSpec(seed=11, n_samples=5, n_lat=4, n_lon=4, n_stations=6)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for x, y in zip(a, b):
        assert x.values.tobytes() == y.values.tobytes()
    assert a[1].mask.tobytes() == b[1].mask.tobytes()


def test_synthetic_bias_surface_is_analytic():
    spec = SyntheticSpec(n_samples=3, n_lat=5, n_lon=6, bias_amplitude=1.7, noise_sigma=0.0)
    model, _, truth = generate_synthetic(spec)
    lat0, lat1, lon0, lon1 = spec.bbox
    diff = (model.values - truth.values).mean(axis=(0, 1))
    for d, (lat, lon) in enumerate(model.coords):
        u, v = (lat - lat0) / (lat1 - lat0), (lon - lon0) / (lon1 - lon0)
        expected = 1.7 * (0.5 + 0.5 * math.cos(math.pi * u) * math.cos(math.pi * v))
        assert diff[d] == pytest.approx(expected, abs=1e-12)
    assert np.allclose(bias_surface(spec, model.coords[:, 0], model.coords[:, 1]), diff, atol=1e-12)


@pytest.mark.parametrize("kw", [{"n_lat": 1}, {"n_lon": 0}, {"bbox": (1.0, 1.0, 0.0, 2.0)}])
def test_synthetic_degenerate_dims(kw):
    with pytest.raises(DataError):
        generate_synthetic(SyntheticSpec(**kw))


def test_station_series_invariants():
    with pytest.raises(DataError):
        StationSeries(["a"], [(0, 0)], np.full((1, 2, 1), np.nan), np.ones((1, 2, 1), bool))
    s = StationSeries(["a", "b"], [(0, 0), (1, 1)], np.zeros((2, 2, 2)),
                      np.array([[[1, 0], [1, 0]], [[1, 1], [1, 0]]], bool))
    assert s.missing_fraction.tolist() == [0.0, 0.75]
    assert s.retained().tolist() == [0]
