"""Reconstruction and observation-correction of gridded model output.

The workflow: signature (or EOF) features of the model field are PCA-reduced
into per-sample summary statistics; a reconstruction network maps those plus a
location encoding to the model series at a small subset of gridpoints and is
then evaluated everywhere; a corrective network learns observation minus
reconstruction at the stations; the corrected field is reconstruction plus
predicted correction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import evaluate, reduction
from .data import DEFAULT_MAX_MISSING, GriddedField, NearestMap, StationSeries, nearest_gridpoints
from .neuralnet import MlpModel, MlpSpec, TrainConfig, mlp_init, mlp_predict, mlp_train, set_standardization
from .signatures import FeatureMatrix, SignatureConfig, compute_features
from .spatialbasis import KrigingBasis, basis_matrix, build_basis

log = logging.getLogger(__name__)

VARIANTS = ("sigpca_dk", "sigpca2_dk", "eof_dk", "direct_obs_sigpca", "direct_obs_sigpca_dk")
TEMPERATURE_NET = [512, 256, 128, 64, 32, 16]
WIND_NET = [128, 64]


class PipelineError(ValueError):
    pass


@dataclass
class NetConfig:
    hidden_widths: list[int] = field(default_factory=lambda: list(TEMPERATURE_NET))
    batch_norm: bool = True
    output_activation: str = "identity"


@dataclass
class PipelineConfig:
    signature: SignatureConfig = field(default_factory=SignatureConfig)
    variance_target: float = 0.995
    x_percent: float = 4.0
    variant: str = "sigpca_dk"
    subset_seed: int = 0
    nn_seed: int = 0
    shuffle_seed: int = 0
    recon_net: NetConfig = field(default_factory=NetConfig)
    corr_net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    basis_knots: int = 5
    basis_resolutions: int = 3
    max_missing: float = DEFAULT_MAX_MISSING
    top_m: int = 20
    standardize_features: bool = False

    def __post_init__(self):
        if not 0 < self.x_percent <= 100:
            raise PipelineError(f"x_percent must lie in (0, 100], got {self.x_percent}")
        if self.variant not in VARIANTS:
            raise PipelineError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def uses_dk(self) -> bool:
        return self.variant != "direct_obs_sigpca"

    @property
    def feature_kind(self) -> str:
        return {"sigpca2_dk": "sigpca2", "eof_dk": "eof"}.get(self.variant, "sigpca")


@dataclass
class Encoder:
    """Location encoding: coordinates min-max scaled over the bbox, plus an optional basis."""

    bbox: tuple[float, float, float, float]
    basis: KrigingBasis | None = None

    @property
    def width(self) -> int:
        return 2 + (self.basis.size if self.basis is not None else 0)

    def encode(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        lat0, lat1, lon0, lon1 = self.bbox
        ll = np.column_stack([(c[:, 0] - lat0) / (lat1 - lat0), (c[:, 1] - lon0) / (lon1 - lon0)])
        if self.basis is None:
            return ll
        return np.concatenate([ll, basis_matrix(c, self.basis)], axis=1)


def grid_bbox(coords) -> tuple[float, float, float, float]:
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    lat0, lat1 = float(c[:, 0].min()), float(c[:, 0].max())
    lon0, lon1 = float(c[:, 1].min()), float(c[:, 1].max())
    # a single row/column of gridpoints still needs a non-degenerate box
    if lat1 <= lat0:
        lat0, lat1 = lat0 - 0.5, lat1 + 0.5
    if lon1 <= lon0:
        lon0, lon1 = lon0 - 0.5, lon1 + 0.5
    return lat0, lat1, lon0, lon1


def make_encoder(coords, use_dk: bool, base_knots: int = 5, n_resolutions: int = 3) -> Encoder:
    bbox = grid_bbox(coords)
    return Encoder(bbox, build_basis(bbox, base_knots, n_resolutions) if use_dk else None)


def design_matrix(features_reduced: np.ndarray, coords, encoder: Encoder) -> np.ndarray:
    """Rows ordered sample-major: ``[scores of s] + [encoding of location]``."""
    Z = np.asarray(features_reduced, dtype=np.float64)
    E = encoder.encode(coords)
    S, k = Z.shape
    N = E.shape[0]
    return np.concatenate([np.repeat(Z, N, axis=0), np.tile(E, (S, 1))], axis=1)


def _net(input_dim: int, output_dim: int, net: NetConfig, seed: int) -> MlpModel:
    return mlp_init(MlpSpec(input_dim, list(net.hidden_widths), output_dim, net.batch_norm,
                            net.output_activation, seed))


# ------------------------------------------------------------------- steps

def select_training_gridpoints(D: int, x_percent: float, seed: int) -> np.ndarray:
    """Uniform random subset of ``round(D * x / 100)`` gridpoints (round-half-even), sorted."""
    if not 0 < x_percent <= 100:
        raise PipelineError(f"x_percent must lie in (0, 100], got {x_percent}")
    count = round(D * x_percent / 100.0)
    if count < 1:
        raise PipelineError(f"{x_percent}% of {D} gridpoints rounds to zero")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(D, size=count, replace=False))


def train_reconstruction(features_reduced, fld: GriddedField, subset, encoder: Encoder,
                         net: NetConfig, train: TrainConfig, seed: int = 0):
    subset = np.asarray(subset, dtype=int)
    if subset.size == 0:
        raise PipelineError("empty training subset")
    Z = np.asarray(features_reduced, dtype=np.float64)
    S, T, D = fld.shape
    X = design_matrix(Z, fld.coords[subset], encoder)
    Y = np.transpose(fld.values[:, :, subset], (0, 2, 1)).reshape(S * subset.size, T)
    model = _net(X.shape[1], T, net, seed)
    set_standardization(model, X, Y, fixed=np.arange(Z.shape[1], X.shape[1]))
    model, trace = mlp_train(model, X, Y, train)
    return model, trace


def predict_grid(model: MlpModel, features_reduced, coords, encoder: Encoder) -> np.ndarray:
    """Network output for every (sample, location) as ``[S, T, N]``."""
    Z = np.asarray(features_reduced, dtype=np.float64)
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    pred = mlp_predict(model, design_matrix(Z, c, encoder))
    return np.transpose(pred.reshape(Z.shape[0], c.shape[0], -1), (0, 2, 1))


def reconstruct_full(model: MlpModel, features_reduced, template: GriddedField,
                     encoder: Encoder) -> GriddedField:
    vals = predict_grid(model, features_reduced, template.coords, encoder)
    if vals.shape != template.shape:
        raise PipelineError(f"reconstruction shape {vals.shape} != field shape {template.shape}")
    return template.with_values(vals, template.variable_name + "_recon")


def compute_corrections(stations: StationSeries, recon: GriddedField, nearest: NearestMap):
    """Observation minus reconstruction at each station's nearest gridpoint (NaN where missing)."""
    g = np.asarray(nearest.gridpoint, dtype=int)
    if g.size != stations.n_stations:
        raise PipelineError("nearest map does not cover every station")
    rec = recon.values[:, :, g]
    targets = np.where(stations.mask, stations.values - rec, np.nan)
    return targets, stations.mask.copy()


def _station_rows(targets, mask, keep):
    S, T, _ = targets.shape
    Y = np.transpose(targets[:, :, keep], (0, 2, 1)).reshape(S * keep.size, T)
    M = np.transpose(mask[:, :, keep], (0, 2, 1)).reshape(S * keep.size, T)
    return Y, M


def train_corrective(features_reduced, targets, mask, station_coords, encoder: Encoder,
                     net: NetConfig, train: TrainConfig, seed: int = 0, retained=None):
    """Fit the network on (sample, station) rows; masked entries carry no loss."""
    Z = np.asarray(features_reduced, dtype=np.float64)
    sc = np.asarray(station_coords, dtype=np.float64).reshape(-1, 2)
    keep = np.arange(sc.shape[0]) if retained is None else np.asarray(retained, dtype=int)
    if keep.size == 0:
        raise PipelineError("no retained stations for corrective training")
    mask = np.asarray(mask, dtype=bool)
    if not mask[:, :, keep].any():
        raise PipelineError("every correction target is masked")
    X = design_matrix(Z, sc[keep], encoder)
    Y, M = _station_rows(np.asarray(targets, float), mask, keep)
    model = _net(X.shape[1], Y.shape[1], net, seed)
    set_standardization(model, X, Y, mask=M, fixed=np.arange(Z.shape[1], X.shape[1]))
    model, trace = mlp_train(model, X, Y, train, mask=M)
    return model, trace


@dataclass
class CorrectionResult:
    recon_field: GriddedField
    corrections: GriddedField
    corrected_field: GriddedField
    nearest: NearestMap | None = None
    training_subset: np.ndarray | None = None


def apply_corrections(recon: GriddedField, corr_model: MlpModel, features_reduced,
                      encoder: Encoder) -> CorrectionResult:
    corr = predict_grid(corr_model, features_reduced, recon.coords, encoder)
    if corr.shape != recon.shape:
        raise PipelineError(f"correction shape {corr.shape} != reconstruction shape {recon.shape}")
    base = recon.variable_name.removesuffix("_recon")
    return CorrectionResult(recon,
                            recon.with_values(corr, base + "_correction"),
                            recon.with_values(recon.values + corr, base + "_corrected"))


# ---------------------------------------------------------------- features

@dataclass
class ReducedFeatures:
    scores: np.ndarray
    kind: str
    features: FeatureMatrix | None = None
    pca: reduction.PcaModel | None = None
    depth1_pca: reduction.PcaModel | None = None
    depth2_locations: list[int] | None = None


def reduce_features(fld: GriddedField, cfg: PipelineConfig, kind: str | None = None) -> ReducedFeatures:
    """Summary statistics of the model field: Sig-PCA (depth 1, or 1+2) or EOF scores."""
    kind = kind or cfg.feature_kind
    if kind == "eof":
        model = reduction.eof_fit(fld, cfg.variance_target)
        return ReducedFeatures(reduction.eof_transform(model, fld), kind, None, model)
    sig1 = replace(cfg.signature, depth=1, depth2_locations=None, depth2_all=False)
    fm1 = compute_features(fld, sig1)
    pca1 = reduction.pca_fit(fm1, cfg.variance_target, cfg.standardize_features)
    if kind == "sigpca":
        return ReducedFeatures(reduction.pca_transform(pca1, fm1), kind, fm1, pca1, pca1)
    if kind != "sigpca2":
        raise PipelineError(f"unknown feature kind {kind!r}")
    m = min(cfg.top_m, fld.n_locations)
    top = reduction.top_locations(pca1, fm1.col_desc, m, fld.n_locations).top(m)
    locs = [int(l) for l in top]
    sig2 = replace(cfg.signature, depth=2, depth2_locations=tuple(locs), depth2_all=False)
    fm2 = compute_features(fld, sig2)
    pca2 = reduction.pca_fit(fm2, cfg.variance_target, cfg.standardize_features)
    return ReducedFeatures(reduction.pca_transform(pca2, fm2), kind, fm2, pca2, pca1, locs)


# ------------------------------------------------------------------ variants

@dataclass
class VariantResult:
    variant: str
    features: ReducedFeatures
    nearest: NearestMap
    retained_stations: np.ndarray
    training_subset: np.ndarray | None = None
    correction: CorrectionResult | None = None
    direct_field: GriddedField | None = None
    recon_model: MlpModel | None = None
    corr_model: MlpModel | None = None
    traces: dict = field(default_factory=dict)

    def output_fields(self) -> dict[str, GriddedField]:
        if self.correction is not None:
            return {"recon": self.correction.recon_field, "corrected": self.correction.corrected_field}
        return {"direct": self.direct_field}


def run_variant(cfg: PipelineConfig, model_field: GriddedField, stations: StationSeries,
                features: ReducedFeatures | None = None) -> VariantResult:
    """Run one method variant end to end on in-memory data."""
    if features is None:
        features = reduce_features(model_field, cfg)
    elif features.kind != cfg.feature_kind:
        raise PipelineError(f"variant {cfg.variant} needs {cfg.feature_kind} features, got {features.kind}")
    if features.scores.shape[0] != model_field.shape[0]:
        raise PipelineError("feature rows do not align with field samples")
    encoder = make_encoder(model_field.coords, cfg.uses_dk, cfg.basis_knots, cfg.basis_resolutions)
    nearest = nearest_gridpoints(stations, model_field)
    retained = stations.retained(cfg.max_missing)
    log.info("variant %s: %d summary statistics, %d/%d stations retained",
             cfg.variant, features.scores.shape[1], retained.size, stations.n_stations)
    train = replace(cfg.train, shuffle_seed=cfg.shuffle_seed)

    if cfg.variant.startswith("direct_obs"):
        # targets are the observations themselves: no reconstruction step
        dmodel, trace = train_corrective(features.scores, stations.values, stations.mask,
                                         stations.coords, encoder, cfg.corr_net, train,
                                         cfg.nn_seed + 1, retained)
        vals = predict_grid(dmodel, features.scores, model_field.coords, encoder)
        direct = model_field.with_values(vals, model_field.variable_name + "_direct")
        return VariantResult(cfg.variant, features, nearest, retained, None, None, direct,
                             None, dmodel, {"direct": trace})

    subset = select_training_gridpoints(model_field.n_locations, cfg.x_percent, cfg.subset_seed)
    log.info("training reconstruction on %d gridpoints (x=%g%%)", subset.size, cfg.x_percent)
    rmodel, rtrace = train_reconstruction(features.scores, model_field, subset, encoder,
                                          cfg.recon_net, train, cfg.nn_seed)
    recon = reconstruct_full(rmodel, features.scores, model_field, encoder)
    targets, mask = compute_corrections(stations, recon, nearest)
    cmodel, ctrace = train_corrective(features.scores, targets, mask, stations.coords, encoder,
                                      cfg.corr_net, train, cfg.nn_seed + 1, retained)
    result = apply_corrections(recon, cmodel, features.scores, encoder)
    result.nearest = nearest
    result.training_subset = subset
    return VariantResult(cfg.variant, features, nearest, retained, subset, result, None,
                         rmodel, cmodel, {"recon": rtrace, "corrective": ctrace})


def sensitivity_sweep(x_values, n_repeats: int, cfg: PipelineConfig, model_field: GriddedField,
                      features: ReducedFeatures | None = None) -> list[dict]:
    """%RMSE of reconstruction vs the model field over all gridpoints, per training fraction."""
    if n_repeats < 1:
        raise PipelineError("n_repeats must be >= 1")
    if features is None:
        features = reduce_features(model_field, cfg)
    encoder = make_encoder(model_field.coords, cfg.uses_dk, cfg.basis_knots, cfg.basis_resolutions)
    rows = []
    for x in x_values:
        errs = []
        for rep in range(n_repeats):
            subset = select_training_gridpoints(model_field.n_locations, x, cfg.subset_seed + rep)
            train = replace(cfg.train, shuffle_seed=cfg.shuffle_seed + rep)
            rmodel, _ = train_reconstruction(features.scores, model_field, subset, encoder,
                                             cfg.recon_net, train, cfg.nn_seed + rep)
            recon = reconstruct_full(rmodel, features.scores, model_field, encoder)
            errs.append(evaluate.pct_rmse(recon.values, model_field.values))
            log.info("sweep x=%g repeat %d: %%RMSE %.4f", x, rep, errs[-1])
        errs = np.array(errs)
        rows.append({"x_percent": float(x), "n_gridpoints": int(round(model_field.n_locations * x / 100.0)),
                     "mean_pct_rmse": float(errs.mean()),
                     "std_pct_rmse": float(errs.std(ddof=1)) if errs.size > 1 else 0.0,
                     "runs": errs.tolist()})
    return rows
