"""Gridded model fields, station series, and the synthetic test dataset."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .container import ContainerError, read_artifact, write_artifact

EARTH_RADIUS_KM = 6371.0
DEFAULT_MAX_MISSING = 0.5


class DataError(ValueError):
    """Invalid or inconsistent input data."""


def _check_coords(coords: np.ndarray) -> None:
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DataError(f"coords must be (n, 2), got {coords.shape}")
    if np.any(np.abs(coords[:, 0]) > 90) or np.any(np.abs(coords[:, 1]) > 180):
        raise DataError("coordinate out of range (lat in [-90, 90], lon in [-180, 180])")


@dataclass
class GriddedField:
    """Model output arranged as ``values[sample, step, location]``."""

    values: np.ndarray
    coords: np.ndarray
    sample_labels: list[str]
    variable_name: str = "value"
    units: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.sample_labels = [str(s) for s in self.sample_labels]
        if self.values.ndim != 3:
            raise DataError(f"values must be 3-D [S, T_w, D], got shape {self.values.shape}")
        S, T, D = self.values.shape
        if S < 1 or T < 2 or D < 1:
            raise DataError(f"degenerate field shape {self.values.shape}")
        if self.coords.shape[0] != D:
            raise DataError(f"{self.coords.shape[0]} coords for {D} locations")
        if len(self.sample_labels) != S:
            raise DataError(f"{len(self.sample_labels)} sample labels for {S} samples")
        _check_coords(self.coords)
        if np.isnan(self.values).any():
            raise DataError("NaN in model field values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def n_locations(self) -> int:
        return self.values.shape[2]

    def with_values(self, values: np.ndarray, variable_name: str | None = None) -> "GriddedField":
        return GriddedField(values, self.coords.copy(), list(self.sample_labels),
                            variable_name or self.variable_name, self.units)

    def series(self, loc: int) -> np.ndarray:
        """Concatenated time series at one location."""
        return self.values[:, :, loc].reshape(-1)


@dataclass
class StationSeries:
    station_ids: list[str]
    coords: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    sample_labels: list[str] = field(default_factory=list)
    variable_name: str = "value"
    units: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.station_ids = [str(s) for s in self.station_ids]
        if self.values.ndim != 3 or self.mask.shape != self.values.shape:
            raise DataError("station values/mask must share a 3-D [S, T_w, P] shape")
        P = self.values.shape[2]
        if len(self.station_ids) != P or self.coords.shape[0] != P:
            raise DataError("station ids/coords do not match the station axis")
        if not self.sample_labels:
            self.sample_labels = [str(i) for i in range(self.values.shape[0])]
        _check_coords(self.coords)
        if not np.isfinite(self.values[self.mask]).all():
            raise DataError("non-finite station value where mask is true")

    @property
    def missing_fraction(self) -> np.ndarray:
        return 1.0 - self.mask.mean(axis=(0, 1))

    @property
    def n_stations(self) -> int:
        return self.values.shape[2]

    def retained(self, max_missing: float = DEFAULT_MAX_MISSING) -> np.ndarray:
        """Indices of stations whose missing fraction does not exceed ``max_missing``."""
        return np.flatnonzero(self.missing_fraction <= max_missing)


@dataclass
class NearestMap:
    station: np.ndarray
    gridpoint: np.ndarray
    distance_km: np.ndarray

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(p), int(g), float(d))
                for p, g, d in zip(self.station, self.gridpoint, self.distance_km)]

    def to_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs]}

    @classmethod
    def from_dict(cls, d: dict) -> "NearestMap":
        pairs = d["pairs"]
        return cls(np.array([p[0] for p in pairs], dtype=int),
                   np.array([p[1] for p in pairs], dtype=int),
                   np.array([p[2] for p in pairs], dtype=float))


# ---------------------------------------------------------------- persistence

def save_field(fld: GriddedField, path) -> Path:
    S, T, D = fld.shape
    meta = {
        "kind": "gridded_field",
        "variable": fld.variable_name,
        "units": fld.units,
        "shape": [S, T, D],
        "coords": fld.coords.tolist(),
        "sample_labels": fld.sample_labels,
    }
    return write_artifact(path, meta, {"values": fld.values})


def load_field(path) -> GriddedField:
    try:
        manifest, arrays = read_artifact(path)
    except ContainerError as exc:
        raise DataError(str(exc)) from exc
    shape = manifest.get("shape")
    values = arrays.get("values")
    if values is None or shape is None or list(values.shape) != list(shape):
        raise DataError(f"manifest shape {shape} does not match stored values in {path}")
    return GriddedField(values, np.array(manifest["coords"], dtype=float),
                        manifest.get("sample_labels", []), manifest.get("variable", "value"),
                        manifest.get("units", ""))


def save_stations(st: StationSeries, path) -> Path:
    meta = {
        "kind": "station_series",
        "variable": st.variable_name,
        "units": st.units,
        "shape": list(st.values.shape),
        "station_ids": st.station_ids,
        "coords": st.coords.tolist(),
        "sample_labels": st.sample_labels,
    }
    return write_artifact(path, meta, {"values": st.values, "mask": st.mask.astype(np.float64)})


def load_stations(path) -> StationSeries:
    try:
        manifest, arrays = read_artifact(path)
    except ContainerError as exc:
        raise DataError(str(exc)) from exc
    return StationSeries(manifest["station_ids"], np.array(manifest["coords"], dtype=float),
                         arrays["values"], arrays["mask"] != 0.0,
                         manifest.get("sample_labels", []), manifest.get("variable", "value"),
                         manifest.get("units", ""))


# ------------------------------------------------------------ station ingest

def aggregate_subhourly(raw: dict, coords, start: datetime, n_samples: int,
                        steps_per_sample: int, interval: timedelta = timedelta(hours=1),
                        variable_name: str = "value", units: str = "") -> StationSeries:
    """Average irregular station records into fixed intervals.

    ``raw`` maps station id to a time-sorted sequence of ``(timestamp, value)``.
    Each output cell is the mean of the records falling in
    ``[start + k*interval, start + (k+1)*interval)``; empty cells are masked.
    """
    ids = list(raw)
    n_cells = n_samples * steps_per_sample
    end = start + n_cells * interval
    step = interval.total_seconds()
    sums = np.zeros((n_cells, len(ids)))
    counts = np.zeros((n_cells, len(ids)), dtype=np.int64)
    for p, sid in enumerate(ids):
        prev = None
        for ts, val in raw[sid]:
            if prev is not None and ts < prev:
                raise DataError(f"timestamps not sorted for station {sid!r} at {ts.isoformat()}")
            prev = ts
            if ts < start or ts >= end:
                raise DataError(f"timestamp {ts.isoformat()} outside [{start.isoformat()}, {end.isoformat()})")
            k = int((ts - start).total_seconds() // step)
            sums[k, p] += val
            counts[k, p] += 1
    mask = counts > 0
    values = np.full(sums.shape, np.nan)
    values[mask] = sums[mask] / counts[mask]
    shape = (n_samples, steps_per_sample, len(ids))
    labels = [(start + s * steps_per_sample * interval).isoformat() for s in range(n_samples)]
    return StationSeries(ids, coords, values.reshape(shape), mask.reshape(shape), labels,
                         variable_name, units)


def read_station_csv(path) -> tuple[dict, np.ndarray]:
    """Read ``station_id, lat, lon, timestamp, value`` rows.

    Returns the raw record dict (sorted by time per station) and the station coords
    in first-appearance order.
    """
    raw: dict[str, list] = {}
    coords: dict[str, tuple[float, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row["station_id"]
            coords.setdefault(sid, (float(row["lat"]), float(row["lon"])))
            raw.setdefault(sid, []).append((datetime.fromisoformat(row["timestamp"]),
                                            float(row["value"])))
    for sid in raw:
        raw[sid].sort(key=lambda r: r[0])
    return raw, np.array([coords[s] for s in raw], dtype=float)


def reshape_windows(flat: np.ndarray, steps_per_sample: int) -> np.ndarray:
    """Cut a ``[time, location]`` array into consecutive samples, dropping the remainder."""
    flat = np.asarray(flat)
    n = flat.shape[0] // steps_per_sample
    if n < 1:
        raise DataError(f"{flat.shape[0]} time steps cannot fill one sample of {steps_per_sample}")
    return flat[:n * steps_per_sample].reshape(n, steps_per_sample, *flat.shape[1:])


# ------------------------------------------------------------------ geometry

def haversine_km(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(a, dtype=float)) for a in (lat1, lon1, lat2, lon2))
    a = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def nearest_gridpoints(stations: StationSeries | np.ndarray, fld: GriddedField | np.ndarray) -> NearestMap:
    """Closest gridpoint (haversine) for every station; ties go to the lowest index."""
    st = stations.coords if isinstance(stations, StationSeries) else np.asarray(stations, float).reshape(-1, 2)
    gc = fld.coords if isinstance(fld, GriddedField) else np.asarray(fld, float).reshape(-1, 2)
    if len(st) == 0 or len(gc) == 0:
        raise DataError("nearest_gridpoints needs non-empty station and grid coordinates")
    d = haversine_km(st[:, :1], st[:, 1:], gc[None, :, 0], gc[None, :, 1])
    g = np.argmin(d, axis=1)
    return NearestMap(np.arange(len(st)), g, d[np.arange(len(st)), g])


# ----------------------------------------------------------------- synthetic

@dataclass
class SyntheticSpec:
    seed: int = 0
    n_samples: int = 60
    steps_per_sample: int = 24
    n_lat: int = 20
    n_lon: int = 20
    bbox: tuple[float, float, float, float] = (41.0, 45.0, -90.0, -86.0)
    bias_amplitude: float = 2.0
    noise_sigma: float = 0.3
    ar_coef: float = 0.7
    n_stations: int = 40
    obs_noise_sigma: float = 0.1
    station_missing: float = 0.02
    start: str = "2010-03-01T00:00:00"
    step_hours: float = 1.0

    def validate(self) -> None:
        if self.n_lat < 2 or self.n_lon < 2:
            raise DataError(f"grid dims must be at least 2x2, got n_lat={self.n_lat}, n_lon={self.n_lon}")
        if self.n_samples < 1:
            raise DataError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.steps_per_sample < 2:
            raise DataError(f"steps_per_sample must be >= 2, got {self.steps_per_sample}")
        if self.n_stations < 1:
            raise DataError(f"n_stations must be >= 1, got {self.n_stations}")
        lat0, lat1, lon0, lon1 = self.bbox
        if not (lat1 > lat0 and lon1 > lon0):
            raise DataError(f"degenerate bbox {self.bbox}")
        if not 0.0 <= self.station_missing < 1.0:
            raise DataError(f"station_missing must lie in [0, 1), got {self.station_missing}")


def _unit(spec: SyntheticSpec, lat, lon):
    lat0, lat1, lon0, lon1 = spec.bbox
    return (np.asarray(lat) - lat0) / (lat1 - lat0), (np.asarray(lon) - lon0) / (lon1 - lon0)


def bias_surface(spec: SyntheticSpec, lat, lon) -> np.ndarray:
    """Static additive model bias at the given coordinates, ranging over [0, amplitude]."""
    u, v = _unit(spec, lat, lon)
    return spec.bias_amplitude * (0.5 + 0.5 * np.cos(np.pi * u) * np.cos(np.pi * v))


def _truth_params(spec: SyntheticSpec) -> dict:
    rng = np.random.default_rng([spec.seed, 1])
    return {
        "periods_h": rng.uniform(72.0, 216.0, size=2),
        "phases": rng.uniform(0, 2 * np.pi, size=2),
        "amps": rng.uniform(1.5, 2.5, size=2),
        "wave": rng.uniform(-1.0, 1.0, size=(2, 2)),
    }


def truth_at(spec: SyntheticSpec, lat, lon, hours) -> np.ndarray:
    """Noise-free signal, shape ``hours.shape + (n_points,)``."""
    p = _truth_params(spec)
    u, v = _unit(spec, np.atleast_1d(lat), np.atleast_1d(lon))
    h = np.asarray(hours, dtype=float)[..., None]
    out = 15.0 + 3.0 * np.sin(np.pi * u) * np.cos(0.5 * np.pi * v) - 2.0 * v
    diurnal = 4.0 * (1.0 + 0.3 * v)
    out = out + diurnal * np.sin(2 * np.pi * (h - 9.0) / 24.0 + 0.5 * u)
    for k in range(2):
        mod = 1.0 + 0.4 * np.cos(np.pi * (u + v))
        phase = p["phases"][k] + np.pi * (p["wave"][k, 0] * u + p["wave"][k, 1] * v)
        out = out + p["amps"][k] * mod * np.sin(2 * np.pi * h / p["periods_h"][k] + phase)
    return out


def generate_synthetic(spec: SyntheticSpec) -> tuple[GriddedField, StationSeries, GriddedField]:
    """Build ``(model, stations, truth)`` for desk-scale runs; deterministic in ``spec.seed``."""
    spec.validate()
    lat0, lat1, lon0, lon1 = spec.bbox
    lats = np.linspace(lat0, lat1, spec.n_lat)
    lons = np.linspace(lon0, lon1, spec.n_lon)
    glat, glon = np.meshgrid(lats, lons, indexing="ij")
    coords = np.column_stack([glat.ravel(), glon.ravel()])
    S, T = spec.n_samples, spec.steps_per_sample
    hours = (np.arange(S * T) * spec.step_hours).reshape(S, T)

    truth = truth_at(spec, coords[:, 0], coords[:, 1], hours)
    bias = bias_surface(spec, coords[:, 0], coords[:, 1])

    rng = np.random.default_rng([spec.seed, 2])
    D = coords.shape[0]
    noise = np.zeros((S * T, D))
    if spec.noise_sigma > 0:
        eps = rng.standard_normal((S * T, D))
        innov = spec.noise_sigma * math.sqrt(1.0 - spec.ar_coef ** 2)
        noise[0] = spec.noise_sigma * eps[0]
        for t in range(1, S * T):
            noise[t] = spec.ar_coef * noise[t - 1] + innov * eps[t]
    model = truth + bias + noise.reshape(S, T, D)

    srng = np.random.default_rng([spec.seed, 3])
    st_coords = np.column_stack([srng.uniform(lat0, lat1, spec.n_stations),
                                 srng.uniform(lon0, lon1, spec.n_stations)])
    obs = truth_at(spec, st_coords[:, 0], st_coords[:, 1], hours)
    if spec.obs_noise_sigma > 0:
        obs = obs + spec.obs_noise_sigma * srng.standard_normal(obs.shape)
    mask = srng.uniform(size=obs.shape) >= spec.station_missing
    obs = np.where(mask, obs, np.nan)

    t0 = datetime.fromisoformat(spec.start)
    labels = [(t0 + timedelta(hours=s * T * spec.step_hours)).isoformat() for s in range(S)]
    model_f = GriddedField(model, coords, labels, "synthetic", "degC")
    truth_f = GriddedField(truth, coords, labels, "synthetic_truth", "degC")
    stations = StationSeries([f"ST{p:03d}" for p in range(spec.n_stations)], st_coords, obs, mask,
                             labels, "synthetic_obs", "degC")
    return model_f, stations, truth_f
