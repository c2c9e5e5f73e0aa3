"""PCA of feature matrices, EOFs of space-time fields, and location ranking."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_artifact, write_artifact
from .data import GriddedField
from .signatures import ColumnDesc, FeatureMatrix

# cumulative-share comparisons tolerate accumulated rounding in the sum
_SHARE_TOL = 1e-12


class ReductionError(ValueError):
    pass


@dataclass
class PcaModel:
    mean: np.ndarray
    loadings: np.ndarray          # F x k, orthonormal columns
    eigenvalues: np.ndarray       # k, descending
    spectrum: np.ndarray          # every eigenvalue of the centred data, descending
    variance_target: float
    total_variance: float
    scale: np.ndarray | None = None

    @property
    def n_components(self) -> int:
        return self.loadings.shape[1]

    @property
    def n_features(self) -> int:
        return self.loadings.shape[0]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.eigenvalues / self.total_variance

    @property
    def full_explained_variance_ratio(self) -> np.ndarray:
        return self.spectrum / self.total_variance


@dataclass
class EofModel(PcaModel):
    """PCA of the ``S x (T_w * D)`` flattening of a field."""

    steps_per_sample: int = 0
    n_locations: int = 0

    def temporal_patterns(self) -> np.ndarray:
        """Loadings reshaped to ``[T_w, D, M]``: the space-time pattern of each mode."""
        return self.loadings.reshape(self.steps_per_sample, self.n_locations, -1)


@dataclass
class LocationRanking:
    scores: np.ndarray
    order: np.ndarray

    def top(self, m: int) -> np.ndarray:
        return self.order[:m]


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.values
    return np.asarray(features, dtype=np.float64)


def choose_rank(ratios: np.ndarray, variance_target: float) -> int:
    """Smallest k whose cumulative explained-variance share reaches the target."""
    cum = np.cumsum(ratios)
    k = int(np.searchsorted(cum, variance_target - _SHARE_TOL, side="left")) + 1
    return min(k, len(ratios))


def _fit(X: np.ndarray, variance_target: float, standardize: bool):
    if not 0.0 < variance_target <= 1.0:
        raise ReductionError(f"variance target must lie in (0, 1], got {variance_target}")
    if X.ndim != 2 or X.shape[0] < 2:
        raise ReductionError("PCA needs a 2-D matrix with at least 2 rows")
    mean = X.mean(axis=0)
    Xc = X - mean
    scale = None
    if standardize:
        scale = Xc.std(axis=0, ddof=1)
        scale[scale == 0] = 1.0
        Xc = Xc / scale
    _, sv, vt = np.linalg.svd(Xc, full_matrices=False)
    spectrum = sv ** 2 / (X.shape[0] - 1)
    total = float(spectrum.sum())
    if not total > 0:
        raise ReductionError("all features are constant: total variance is zero")
    k = choose_rank(spectrum / total, variance_target)
    loadings = vt[:k].T.copy()
    # sign convention: the largest-magnitude entry of each loading is positive
    idx = np.argmax(np.abs(loadings), axis=0)
    signs = np.sign(loadings[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    loadings *= signs
    return mean, loadings, spectrum[:k].copy(), spectrum, total, scale


def pca_fit(features, variance_target: float = 0.995, standardize: bool = False) -> PcaModel:
    """Thin-SVD PCA truncated at the first component reaching ``variance_target``."""
    mean, loadings, eig, spectrum, total, scale = _fit(_as_matrix(features), variance_target, standardize)
    return PcaModel(mean, loadings, eig, spectrum, float(variance_target), total, scale)


def pca_transform(model: PcaModel, features) -> np.ndarray:
    X = _as_matrix(features)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ReductionError(f"expected {model.n_features} feature columns, got {X.shape}")
    Xc = X - model.mean
    if model.scale is not None:
        Xc = Xc / model.scale
    return Xc @ model.loadings


def pca_inverse(model: PcaModel, scores: np.ndarray) -> np.ndarray:
    Xc = np.asarray(scores) @ model.loadings.T
    if model.scale is not None:
        Xc = Xc * model.scale
    return Xc + model.mean


def eof_matrix(fld: GriddedField) -> np.ndarray:
    S, T, D = fld.shape
    return fld.values.reshape(S, T * D)


def eof_fit(fld: GriddedField, variance_target: float = 0.995) -> EofModel:
    mean, loadings, eig, spectrum, total, _ = _fit(eof_matrix(fld), variance_target, False)
    S, T, D = fld.shape
    return EofModel(mean, loadings, eig, spectrum, float(variance_target), total, None, T, D)


def eof_transform(model: EofModel, fld: GriddedField) -> np.ndarray:
    """Temporal coefficients (one row per sample) of the retained modes."""
    return pca_transform(model, eof_matrix(fld))


def top_locations(model: PcaModel, col_desc: list[ColumnDesc], m: int,
                  n_locations: int | None = None) -> LocationRanking:
    """Rank locations by variance-weighted squared loadings of their columns.

    ``score(loc) = sum_c ratio_c * sum_{columns of loc} loading[col, c]**2``.
    Returns the full ordering; ``m`` is validated and used via ``ranking.top(m)``.
    """
    if m <= 0:
        raise ReductionError(f"m must be positive, got {m}")
    if len(col_desc) != model.n_features:
        raise ReductionError("column descriptors do not match the PCA feature count")
    if n_locations is None:
        n_locations = 1 + max((l for c in col_desc for l in c.locations), default=-1)
    if m > n_locations:
        raise ReductionError(f"m={m} exceeds the {n_locations} available locations")
    per_col = (model.loadings ** 2) @ model.explained_variance_ratio
    scores = np.zeros(n_locations)
    for i, c in enumerate(col_desc):
        for l in c.locations:
            scores[l] += per_col[i]
    # scores equal up to SVD rounding count as ties; the stable sort then keeps index order
    top = scores.max()
    key = np.round(scores / top, 12) if top > 0 else scores
    order = np.argsort(-key, kind="stable")
    return LocationRanking(scores, order)


# ---------------------------------------------------------------- persistence

def save_pca(model: PcaModel, path, col_desc: list[ColumnDesc] | None = None) -> Path:
    meta = {
        "kind": "eof_model" if isinstance(model, EofModel) else "pca_model",
        "variance_target": model.variance_target,
        "total_variance": model.total_variance,
        "standardized": model.scale is not None,
    }
    if isinstance(model, EofModel):
        meta["steps_per_sample"] = model.steps_per_sample
        meta["n_locations"] = model.n_locations
    if col_desc is not None:
        meta["col_desc"] = [[c.window, list(c.term)] for c in col_desc]
    arrays = {"mean": model.mean, "loadings": model.loadings,
              "eigenvalues": model.eigenvalues, "spectrum": model.spectrum}
    if model.scale is not None:
        arrays["scale"] = model.scale
    return write_artifact(path, meta, arrays)


def load_pca(path) -> PcaModel:
    manifest, a = read_artifact(path)
    args = (a["mean"], a["loadings"], a["eigenvalues"], a["spectrum"],
            manifest["variance_target"], manifest["total_variance"], a.get("scale"))
    if manifest["kind"] == "eof_model":
        return EofModel(*args, manifest["steps_per_sample"], manifest["n_locations"])
    return PcaModel(*args)
