"""Validation statistics for reconstructed and corrected fields."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from .data import GriddedField, NearestMap, StationSeries, haversine_km

SEASONS = {
    "winter": (1, 2),
    "spring": (3, 4, 5),
    "summer": (6, 7, 8),
    "fall": (9, 10, 11),
}


class EvalError(ValueError):
    pass


def _valid(pred, ref, mask):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise EvalError(f"shape mismatch {pred.shape} vs {ref.shape}")
    ok = np.isfinite(pred) & np.isfinite(ref)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    return pred[ok], ref[ok]


def rmse(pred, ref, mask=None) -> float:
    p, r = _valid(pred, ref, mask)
    if p.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean((p - r) ** 2)))


def pct_rmse(pred, ref, mask=None) -> float:
    """RMSE as a percentage of the reference mean, over unmasked finite entries."""
    p, r = _valid(pred, ref, mask)
    if p.size == 0:
        raise EvalError("no valid entries to compare")
    mu = r.mean()
    if mu == 0:
        raise EvalError("reference mean is zero; %RMSE undefined")
    return float(100.0 * np.sqrt(np.mean((p - r) ** 2)) / mu)


def pct_improvement(model_rmse: float, corrected_rmse: float) -> float:
    if not model_rmse > 0:
        raise EvalError("model RMSE must be positive")
    return 100.0 * (model_rmse - corrected_rmse) / model_rmse


def wasserstein1(a, b) -> float:
    """1-Wasserstein distance between two empirical distributions (quantile-function L1)."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise EvalError("wasserstein1 needs non-empty samples")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise EvalError("wasserstein1 needs finite samples")
    n, m = a.size, b.size
    if n == m:
        return float(np.mean(np.abs(a - b)))
    # both quantile functions are constant between consecutive breakpoints i/n, j/m
    u = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    u = u[u <= 1.0]
    lo = np.concatenate([[0.0], u[:-1]])
    mid = 0.5 * (lo + u)
    ia = np.minimum(np.floor(mid * n).astype(int), n - 1)
    ib = np.minimum(np.floor(mid * m).astype(int), m - 1)
    return float(np.sum((u - lo) * np.abs(a[ia] - b[ib])))


@dataclass
class CorrelationPoints:
    distance_km: np.ndarray
    r: np.ndarray
    skipped: int

    def binned(self, n_bins: int = 20) -> dict:
        if self.r.size == 0:
            return {"edges_km": [], "mean_r": [], "count": []}
        edges = np.linspace(0.0, float(self.distance_km.max()) + 1e-9, n_bins + 1)
        which = np.clip(np.digitize(self.distance_km, edges) - 1, 0, n_bins - 1)
        cnt = np.bincount(which, minlength=n_bins)
        tot = np.bincount(which, weights=self.r, minlength=n_bins)
        mean = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)
        return {"edges_km": edges.tolist(), "mean_r": [None if not np.isfinite(x) else float(x) for x in mean],
                "count": cnt.tolist()}


def _pair_index(k: np.ndarray, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices over the strict upper triangle (row-major) to (i, j)."""
    k = k.astype(np.int64)
    # row i starts at offset i*L - i*(i+1)/2
    i = (L - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * L * (L - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
    start = i * L - i * (i + 1) // 2
    # guard against floating error at row boundaries
    over = k >= start + (L - 1 - i)
    i[over] += 1
    start = i * L - i * (i + 1) // 2
    under = k < start
    i[under] -= 1
    start = i * L - i * (i + 1) // 2
    j = k - start + i + 1
    return i, j


def correlation_vs_distance(series: np.ndarray, coords, max_pairs: int = 50_000,
                            seed: int = 0) -> CorrelationPoints:
    """Pearson correlation vs haversine distance for (sampled) location pairs.

    ``series`` is ``[time, location]``; NaNs are dropped pairwise.  Pairs whose
    correlation is undefined (a constant series) are skipped and counted.
    """
    X = np.asarray(series, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    L = X.shape[1]
    if L < 2 or X.shape[0] < 3 or c.shape[0] != L:
        raise EvalError("need >= 2 locations with matching coords and >= 3 time points")
    total = L * (L - 1) // 2
    if total <= max_pairs:
        ii, jj = np.triu_indices(L, k=1)
    else:
        rng = np.random.default_rng(seed)
        k = np.sort(rng.choice(total, size=max_pairs, replace=False))
        ii, jj = _pair_index(k, L)
    r = np.full(ii.size, np.nan)
    if np.isfinite(X).all():
        Z = X - X.mean(axis=0)
        nrm = np.sqrt((Z * Z).sum(axis=0))
        num = np.empty(ii.size)
        chunk = max(1, 4_000_000 // X.shape[0])
        for s in range(0, ii.size, chunk):
            num[s:s + chunk] = np.einsum("ti,ti->i", Z[:, ii[s:s + chunk]], Z[:, jj[s:s + chunk]])
        den = nrm[ii] * nrm[jj]
        good = den > 0
        r[good] = num[good] / den[good]
    else:
        for n, (a, b) in enumerate(zip(ii, jj)):
            ok = np.isfinite(X[:, a]) & np.isfinite(X[:, b])
            if ok.sum() < 3:
                continue
            x, y = X[ok, a] - X[ok, a].mean(), X[ok, b] - X[ok, b].mean()
            den = np.sqrt((x * x).sum() * (y * y).sum())
            if den > 0:
                r[n] = (x * y).sum() / den
    good = np.isfinite(r)
    r = np.clip(r[good], -1.0, 1.0)
    d = haversine_km(c[ii[good], 0], c[ii[good], 1], c[jj[good], 0], c[jj[good], 1])
    return CorrelationPoints(d, r, int((~good).sum()))


def _fill_missing(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel().copy()
    ok = np.isfinite(x)
    if not ok.any():
        raise EvalError("series is entirely missing")
    if not ok.all():
        idx = np.arange(x.size)
        x[~ok] = np.interp(idx[~ok], idx[ok], x[ok])
    return x


def power_spectrum(series, sample_interval_hours: float = 1.0, welch_segment: int | None = None):
    """One-sided periodogram of the mean-removed series; frequency in cycles/day.

    Interior bins carry both the positive and negative frequency contributions so
    that the powers sum to ``sum((x - mean)**2)``.  With ``welch_segment`` the
    estimate averages Hann-windowed half-overlapping segments instead.
    """
    x = _fill_missing(series)
    if x.size < 8:
        raise EvalError("power spectrum needs at least 8 points")
    d_days = sample_interval_hours / 24.0
    if welch_segment:
        return _welch(x, welch_segment, d_days)
    x = x - x.mean()
    n = x.size
    X = np.fft.rfft(x)
    power = (np.abs(X) ** 2) / n
    power[1:] *= 2.0
    if n % 2 == 0:
        power[-1] /= 2.0
    return np.fft.rfftfreq(n, d=d_days), power


def _welch(x: np.ndarray, seg: int, d_days: float):
    seg = min(seg, x.size)
    step = max(seg // 2, 1)
    w = np.hanning(seg)
    acc = None
    count = 0
    for s in range(0, x.size - seg + 1, step):
        piece = x[s:s + seg]
        piece = (piece - piece.mean()) * w
        p = np.abs(np.fft.rfft(piece)) ** 2 / (w * w).sum()
        acc = p if acc is None else acc + p
        count += 1
    acc = acc / count
    acc[1:] *= 2.0
    if seg % 2 == 0:
        acc[-1] /= 2.0
    return np.fft.rfftfreq(seg, d=d_days), acc


def qq_pairs(a, b, n_quantiles: int = 99) -> np.ndarray:
    """Matched empirical quantiles at probabilities ``(i - 0.5) / n_quantiles``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a, b = a[np.isfinite(a)], b[np.isfinite(b)]
    if a.size == 0 or b.size == 0:
        raise EvalError("qq_pairs needs non-empty samples")
    p = (np.arange(1, n_quantiles + 1) - 0.5) / n_quantiles
    return np.column_stack([np.quantile(a, p), np.quantile(b, p)])


def seasonal_partition(sample_labels, seasons: dict | None = None) -> dict[str, list[int]]:
    """Group sample indices by calendar season; unmatched months go to ``unassigned``."""
    seasons = SEASONS if seasons is None else seasons
    month_to = {m: name for name, months in seasons.items() for m in months}
    out: dict[str, list[int]] = {name: [] for name in seasons}
    out["unassigned"] = []
    for i, lab in enumerate(sample_labels):
        try:
            month = datetime.fromisoformat(str(lab)).month
        except ValueError as exc:
            raise EvalError(f"cannot parse sample label {lab!r} as a date") from exc
        out[month_to.get(month, "unassigned")].append(i)
    return out


# -------------------------------------------------------------------- report

def _nearest_station(coord, stations: StationSeries, candidates) -> int:
    d = haversine_km(coord[0], coord[1], stations.coords[candidates, 0], stations.coords[candidates, 1])
    return int(candidates[int(np.argmin(d))])


def build_report(model: GriddedField, stations: StationSeries, nearest: NearestMap,
                 fields: dict[str, GriddedField], *, retained=None, truth: GriddedField | None = None,
                 locations=None, max_pairs: int = 50_000, seed: int = 0, n_quantiles: int = 99,
                 sample_interval_hours: float = 1.0) -> dict:
    """Assemble every validation statistic into a JSON-ready dict.

    ``fields`` maps a name (``recon``, ``corrected``, ``direct`` ...) to a field on
    the model grid.  Station comparisons use each station's nearest gridpoint and
    the same time steps.  Full correlation point sets are returned under
    ``_points`` for CSV export and stripped from the JSON by ``write_report``.
    """
    S, T, D = model.shape
    retained = np.arange(stations.n_stations) if retained is None else np.asarray(retained, int)
    seasons = seasonal_partition(model.sample_labels)
    seasons_all = {"all": list(range(S)), **{k: v for k, v in seasons.items() if v and k != "unassigned"}}
    all_fields = {"model": model, **fields}
    if locations is None:
        locations = nearest.gridpoint[retained][:5]
    locations = [int(l) for l in locations]

    # per-station comparisons
    st_rows = []
    obs = stations.values
    for p in range(stations.n_stations):
        g = int(nearest.gridpoint[p])
        m = stations.mask[:, :, p]
        row = {"station_id": stations.station_ids[p], "gridpoint": g,
               "distance_km": float(nearest.distance_km[p]),
               "missing_fraction": float(stations.missing_fraction[p]),
               "excluded": bool(p not in set(retained.tolist()))}
        o = obs[:, :, p]
        ok = m.any()
        for name, f in all_fields.items():
            x = f.values[:, :, g]
            row[f"rmse_{name}"] = rmse(x, o, m) if ok else None
            row[f"w1_{name}"] = wasserstein1(x[m], o[m]) if ok else None
            try:
                row[f"pct_rmse_{name}"] = pct_rmse(x, o, m) if ok else None
            except EvalError:
                row[f"pct_rmse_{name}"] = None
        for name in fields:
            rm, rc = row["rmse_model"], row[f"rmse_{name}"]
            row[f"pct_improvement_{name}"] = (pct_improvement(rm, rc)
                                              if ok and rm is not None and rm > 0 else None)
        st_rows.append(row)

    def _summ(key):
        vals = np.array([r[key] for r in st_rows if r[key] is not None and not r["excluded"]], float)
        if vals.size == 0:
            return None
        return {"mean": float(vals.mean()), "median": float(np.median(vals)),
                "min": float(vals.min()), "max": float(vals.max())}

    summary = {}
    for name in fields:
        summary[name] = {
            "pct_rmse_vs_model_field": pct_rmse(all_fields[name].values, model.values),
            "station_pct_improvement": _summ(f"pct_improvement_{name}"),
            "station_w1": _summ(f"w1_{name}"),
        }
    summary["model"] = {"station_w1": _summ("w1_model")}

    if truth is not None:
        station_cells = set(nearest.gridpoint[retained].tolist())
        held = np.array([g for g in range(D) if g not in station_cells], dtype=int)
        tv = truth.values[:, :, held]
        base = rmse(model.values[:, :, held], tv)
        summary["truth"] = {"n_heldout_gridpoints": int(held.size), "rmse_model": base}
        for name, f in fields.items():
            r = rmse(f.values[:, :, held], tv)
            summary["truth"][f"rmse_{name}"] = r
            summary["truth"][f"pct_improvement_{name}"] = pct_improvement(base, r) if base > 0 else None

    # correlation vs distance
    corr, points = {}, {}
    obs_idx = retained
    for season, idx in seasons_all.items():
        corr[season] = {}
        for name, f in all_fields.items():
            ser = f.values[idx].reshape(-1, D)
            pts = correlation_vs_distance(ser, f.coords, max_pairs, seed)
            corr[season][name] = {"skipped": pts.skipped, "n_pairs": int(pts.r.size), **pts.binned()}
            points[(season, name)] = pts
        if obs_idx.size >= 2:
            ser = obs[idx][:, :, obs_idx].reshape(-1, obs_idx.size)
            try:
                pts = correlation_vs_distance(ser, stations.coords[obs_idx], max_pairs, seed)
                corr[season]["observations"] = {"skipped": pts.skipped, "n_pairs": int(pts.r.size),
                                                **pts.binned()}
                points[(season, "observations")] = pts
            except EvalError:
                pass

    # spectra and QQ at the locations of interest
    spectra, qq = {}, {}
    for loc in locations:
        p = _nearest_station(model.coords[loc], stations, retained) if retained.size else None
        key = str(loc)
        spectra[key], qq[key] = {"nearest_station": None if p is None else stations.station_ids[p]}, {}
        for season, idx in seasons_all.items():
            spectra[key][season] = {}
            qq[key][season] = {}
            for name, f in all_fields.items():
                ser = f.values[idx, :, loc].ravel()
                if ser.size >= 8:
                    fr, pw = power_spectrum(ser, sample_interval_hours)
                    spectra[key][season][name] = {"freq_per_day": fr.tolist(), "power": pw.tolist()}
            if p is None:
                continue
            o = np.where(stations.mask[idx, :, p], obs[idx, :, p], np.nan).ravel()
            if np.isfinite(o).sum() >= 8:
                fr, pw = power_spectrum(o, sample_interval_hours)
                spectra[key][season]["observations"] = {"freq_per_day": fr.tolist(), "power": pw.tolist()}
                g = int(nearest.gridpoint[p])
                for name, f in all_fields.items():
                    qq[key][season][name] = qq_pairs(f.values[idx, :, g].ravel(), o, n_quantiles).tolist()

    return {
        "summary": summary,
        "stations": st_rows,
        "correlation": corr,
        "spectra": spectra,
        "qq": qq,
        "seasons": {k: v for k, v in seasons.items()},
        "locations": locations,
        "_points": points,
    }


def write_report(report: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = report.get("_points", {})
    with open(out / "correlation_points.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["season", "source", "distance_km", "r"])
        for (season, name), pts in points.items():
            for d, r in zip(pts.distance_km, pts.r):
                w.writerow([season, name, repr(float(d)), repr(float(r))])
    with open(out / "spectra.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["location", "season", "source", "freq_per_day", "power"])
        for loc, by_season in report.get("spectra", {}).items():
            for season, by_src in by_season.items():
                if not isinstance(by_src, dict):
                    continue
                for src, sp in by_src.items():
                    for f, p in zip(sp["freq_per_day"], sp["power"]):
                        w.writerow([loc, season, src, repr(f), repr(p)])
    body = {k: v for k, v in report.items() if not k.startswith("_")}
    path = out / "report.json"
    path.write_text(json.dumps(body, indent=1, sort_keys=True, allow_nan=True))
    return path
