"""Run configuration and the on-disk pipeline stages behind the CLI.

Every stage reads and writes container artifacts inside ``<out>/<variant>/`` so
stages can run as separate invocations; the fused ``run`` calls the same stage
functions in order.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, evaluate, reduction
from .container import ContainerError, read_artifact, read_manifest, write_artifact
from .data import (DataError, GriddedField, NearestMap, SyntheticSpec, generate_synthetic,
                   load_field, load_stations, nearest_gridpoints, save_field, save_stations)
from .neuralnet import TrainConfig, load_model, save_model
from .pipeline import (VARIANTS, NetConfig, PipelineConfig, ReducedFeatures, apply_corrections,
                       compute_corrections, make_encoder, predict_grid, reconstruct_full,
                       sensitivity_sweep, select_training_gridpoints, train_corrective,
                       train_reconstruction)
from .signatures import SignatureConfig, compute_features, load_features, save_features

log = logging.getLogger(__name__)

STAGES = ("signatures", "reduce", "train-recon", "reconstruct", "train-correct", "correct",
          "evaluate", "sweep")


class ConfigError(ValueError):
    pass


class MissingArtifact(DataError):
    pass


# ------------------------------------------------------------------- config

def _build(cls, d: dict, where: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def pipeline_config_from_dict(d: dict, variant: str | None = None) -> PipelineConfig:
    d = dict(d or {})
    sig = d.pop("signature", {}) or {}
    if sig.get("depth2_locations") is not None:
        sig["depth2_locations"] = tuple(sig["depth2_locations"])
    kwargs = {
        "signature": _build(SignatureConfig, sig, "pipeline.signature"),
        "recon_net": _build(NetConfig, d.pop("recon_net", {}), "pipeline.recon_net"),
        "corr_net": _build(NetConfig, d.pop("corr_net", {}), "pipeline.corr_net"),
        "train": _build(TrainConfig, d.pop("train", {}), "pipeline.train"),
    }
    if variant is not None:
        d["variant"] = variant
    return _build(PipelineConfig, {**d, **kwargs}, "pipeline")


def pipeline_config_to_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    d["signature"] = cfg.signature.to_dict()
    return d


@dataclass
class RunConfig:
    out: str = "out"
    data: dict = field(default_factory=dict)
    variants: list[str] = field(default_factory=lambda: ["sigpca_dk"])
    pipeline: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    threads: int = 1
    seed: int | None = None

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"variants: unknown variant {v!r}; expected one of {VARIANTS}")
        if int(self.threads) < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    def pipeline_for(self, variant: str) -> PipelineConfig:
        d = dict(self.pipeline)
        if self.seed is not None:
            d.update(subset_seed=self.seed, nn_seed=self.seed, shuffle_seed=self.seed)
        return pipeline_config_from_dict(d, variant)

    def synthetic_spec(self) -> SyntheticSpec:
        d = dict(self.synthetic)
        if "bbox" in d:
            d["bbox"] = tuple(d["bbox"])
        if self.seed is not None:
            d["seed"] = self.seed
        spec = _build(SyntheticSpec, d, "synthetic")
        try:
            spec.validate()
        except DataError as exc:
            raise ConfigError(f"invalid synthetic config: {exc}") from exc
        return spec

    def data_path(self, key: str) -> Path:
        p = self.data.get(key)
        return Path(p) if p else Path(self.out) / "data" / key

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_run_config(path=None, **overrides) -> RunConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    for k, v in overrides.items():
        if v is not None:
            d[k] = v
    return _build(RunConfig, d, "config")


# ------------------------------------------------------------------ helpers

def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _require(path: Path, what: str) -> Path:
    if not (path / "manifest.json").is_file():
        raise MissingArtifact(f"missing artifact {what!r}: expected {path}")
    return path


class RunDir:
    def __init__(self, rc: RunConfig, variant: str):
        self.rc = rc
        self.cfg = rc.pipeline_for(variant)
        self.variant = variant
        self.root = Path(rc.out) / variant
        self.root.mkdir(parents=True, exist_ok=True)

    def __truediv__(self, name) -> Path:
        return self.root / name

    def model_field(self) -> GriddedField:
        return load_field(_require(self.rc.data_path("model"), "model field"))

    def stations(self):
        return load_stations(_require(self.rc.data_path("stations"), "stations"))

    def truth(self):
        p = self.rc.data_path("truth")
        return load_field(p) if (p / "manifest.json").is_file() else None

    def features_key(self) -> str:
        sig = self.cfg.signature.to_dict()
        blob = _require(self.rc.data_path("model"), "model field") / "data.bin"
        h = hashlib.sha256()
        with open(blob, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 22), b""):
                h.update(chunk)
        return _hash({"signature": sig, "model_blob": h.hexdigest()})

    def encoder(self, fld: GriddedField):
        return make_encoder(fld.coords, self.cfg.uses_dk, self.cfg.basis_knots, self.cfg.basis_resolutions)

    def scores(self) -> np.ndarray:
        _, a = read_artifact(_require(self / "scores", "reduced features (run 'reduce')"))
        return a["scores"]


# ------------------------------------------------------------------- stages

def stage_synth(rc: RunConfig) -> Path:
    spec = rc.synthetic_spec()
    model, stations, truth = generate_synthetic(spec)
    save_field(model, rc.data_path("model"))
    save_stations(stations, rc.data_path("stations"))
    save_field(truth, rc.data_path("truth"))
    log.info("synthetic dataset written under %s", Path(rc.out) / "data")
    return Path(rc.out) / "data"


def stage_signatures(rd: RunDir, use_cache: bool = False) -> Path | None:
    """Step 1: depth-1 signature features of the model field."""
    if rd.cfg.feature_kind == "eof":
        log.info("%s: EOF variant has no signature stage", rd.variant)
        return None
    key = rd.features_key()
    out = rd / "features"
    if use_cache and (out / "manifest.json").is_file():
        if read_manifest(out).get("meta", {}).get("cache_key") == key:
            log.info("%s: cached signature features found, skipping step 1", rd.variant)
            return out
    fld = rd.model_field()
    sig = SignatureConfig.from_dict({**rd.cfg.signature.to_dict(), "depth": 1,
                                     "depth2_locations": None, "depth2_all": False})
    fm = compute_features(fld, sig)
    fm.meta["cache_key"] = key
    save_features(fm, out)
    log.info("%s: %d x %d signature features", rd.variant, *fm.shape)
    return out


def stage_reduce(rd: RunDir) -> Path:
    """Step 2: PCA of the signatures (or EOFs of the field)."""
    cfg = rd.cfg
    info = {"kind": cfg.feature_kind}
    if cfg.feature_kind == "eof":
        fld = rd.model_field()
        model = reduction.eof_fit(fld, cfg.variance_target)
        scores = reduction.eof_transform(model, fld)
        reduction.save_pca(model, rd / "pca")
    else:
        fm1 = load_features(_require(rd / "features", "signature features (run 'signatures')"))
        pca1 = reduction.pca_fit(fm1, cfg.variance_target, cfg.standardize_features)
        ranking = reduction.top_locations(pca1, fm1.col_desc, min(cfg.top_m, fm1.n_locations),
                                          fm1.n_locations)
        info["top_locations"] = [int(i) for i in ranking.top(min(cfg.top_m, fm1.n_locations))]
        info["location_scores"] = ranking.scores.tolist()
        if cfg.feature_kind == "sigpca":
            model, scores = pca1, reduction.pca_transform(pca1, fm1)
        else:
            fld = rd.model_field()
            sig2 = SignatureConfig.from_dict({**cfg.signature.to_dict(), "depth": 2,
                                              "depth2_locations": info["top_locations"],
                                              "depth2_all": False})
            fm2 = compute_features(fld, sig2)
            save_features(fm2, rd / "features2")
            reduction.save_pca(pca1, rd / "pca_depth1", fm1.col_desc)
            model = reduction.pca_fit(fm2, cfg.variance_target, cfg.standardize_features)
            scores = reduction.pca_transform(model, fm2)
            info["n_features_depth2"] = int(fm2.shape[1])
        reduction.save_pca(model, rd / "pca")
    info["n_components"] = int(scores.shape[1])
    info["explained_variance_ratio"] = model.explained_variance_ratio.tolist()
    write_artifact(rd / "scores", {"kind": "reduced_features", "info": info}, {"scores": scores})
    log.info("%s: %d summary statistics at %.3f variance", rd.variant, scores.shape[1], cfg.variance_target)
    return rd / "scores"


def _write_trace(path: Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def _is_direct(rd: RunDir) -> bool:
    return rd.variant.startswith("direct_obs")


def stage_train_recon(rd: RunDir) -> Path | None:
    """Step 3."""
    if _is_direct(rd):
        log.info("%s: direct variant has no reconstruction network", rd.variant)
        return None
    fld = rd.model_field()
    scores = rd.scores()
    cfg = rd.cfg
    subset = select_training_gridpoints(fld.n_locations, cfg.x_percent, cfg.subset_seed)
    log.info("%s: %d training gridpoints (x=%g%%)", rd.variant, subset.size, cfg.x_percent)
    train = TrainConfig(**{**asdict(cfg.train), "shuffle_seed": cfg.shuffle_seed})
    model, trace = train_reconstruction(scores, fld, subset, rd.encoder(fld), cfg.recon_net,
                                        train, cfg.nn_seed)
    save_model(model, rd / "recon_model", {"training_subset": subset.tolist()})
    _write_trace(rd / "recon_loss.csv", trace)
    return rd / "recon_model"


def stage_reconstruct(rd: RunDir) -> Path | None:
    """Step 4."""
    if _is_direct(rd):
        return None
    fld = rd.model_field()
    model, _ = load_model(_require(rd / "recon_model", "reconstruction model (run 'train-recon')"))
    recon = reconstruct_full(model, rd.scores(), fld, rd.encoder(fld))
    save_field(recon, rd / "recon")
    return rd / "recon"


def stage_train_correct(rd: RunDir) -> Path:
    """Step 5 (or the direct observation network)."""
    fld = rd.model_field()
    st = rd.stations()
    cfg = rd.cfg
    nearest = nearest_gridpoints(st, fld)
    (rd / "nearest.json").write_text(json.dumps(nearest.to_dict()))
    retained = st.retained(cfg.max_missing)
    log.info("%s: %d/%d stations retained (max missing %.2f)", rd.variant, retained.size,
             st.n_stations, cfg.max_missing)
    if _is_direct(rd):
        targets, mask = st.values, st.mask
    else:
        recon = load_field(_require(rd / "recon", "reconstructed field (run 'reconstruct')"))
        targets, mask = compute_corrections(st, recon, nearest)
    train = TrainConfig(**{**asdict(cfg.train), "shuffle_seed": cfg.shuffle_seed})
    model, trace = train_corrective(rd.scores(), targets, mask, st.coords, rd.encoder(fld),
                                    cfg.corr_net, train, cfg.nn_seed + 1, retained)
    save_model(model, rd / "corr_model", {"retained_stations": retained.tolist()})
    _write_trace(rd / "corr_loss.csv", trace)
    return rd / "corr_model"


def stage_correct(rd: RunDir) -> Path:
    """Steps 6 and 7."""
    fld = rd.model_field()
    model, _ = load_model(_require(rd / "corr_model", "corrective model (run 'train-correct')"))
    enc = rd.encoder(fld)
    if _is_direct(rd):
        vals = predict_grid(model, rd.scores(), fld.coords, enc)
        save_field(fld.with_values(vals, fld.variable_name + "_direct"), rd / "direct")
        return rd / "direct"
    recon = load_field(_require(rd / "recon", "reconstructed field (run 'reconstruct')"))
    res = apply_corrections(recon, model, rd.scores(), enc)
    save_field(res.corrections, rd / "corrections")
    save_field(res.corrected_field, rd / "corrected")
    return rd / "corrected"


def stage_evaluate(rd: RunDir) -> Path:
    fld = rd.model_field()
    st = rd.stations()
    if _is_direct(rd):
        fields_ = {"direct": load_field(_require(rd / "direct", "direct prediction field (run 'correct')"))}
    else:
        fields_ = {"recon": load_field(_require(rd / "recon", "reconstructed field (run 'reconstruct')")),
                   "corrected": load_field(_require(rd / "corrected", "corrected field (run 'correct')"))}
    npath = rd / "nearest.json"
    nearest = NearestMap.from_dict(json.loads(npath.read_text())) if npath.is_file() else nearest_gridpoints(st, fld)
    ev = dict(rd.rc.evaluate)
    locations = ev.get("locations")
    if locations is None:
        m = read_manifest(_require(rd / "scores", "reduced features (run 'reduce')"))
        locations = m["info"].get("top_locations", [])[:5] or None
    report = evaluate.build_report(
        fld, st, nearest, fields_, retained=st.retained(rd.cfg.max_missing), truth=rd.truth(),
        locations=locations, max_pairs=int(ev.get("max_pairs", 50_000)),
        seed=int(ev.get("seed", 0)), n_quantiles=int(ev.get("n_quantiles", 99)),
        sample_interval_hours=float(ev.get("sample_interval_hours", 1.0)))
    report["variant"] = rd.variant
    m = read_manifest(rd / "scores")
    report["reduction"] = {k: v for k, v in m["info"].items() if k != "location_scores"}
    path = evaluate.write_report(report, rd / "report")
    log.info("%s: report written to %s", rd.variant, path)
    return path


def stage_sweep(rd: RunDir) -> Path:
    fld = rd.model_field()
    sw = dict(rd.rc.sweep)
    xs = sw.get("x_values", [1, 2, 4, 8, 12, 16, 20])
    reps = int(sw.get("n_repeats", 5))
    scores = rd.scores()
    rows = sensitivity_sweep(xs, reps, rd.cfg, fld,
                             ReducedFeatures(scores, rd.cfg.feature_kind))
    path = rd / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_percent", "n_gridpoints", "mean_pct_rmse", "std_pct_rmse"])
        for r in rows:
            w.writerow([r["x_percent"], r["n_gridpoints"], repr(r["mean_pct_rmse"]), repr(r["std_pct_rmse"])])
    return path


STAGE_FUNCS = {
    "signatures": stage_signatures,
    "reduce": stage_reduce,
    "train-recon": stage_train_recon,
    "reconstruct": stage_reconstruct,
    "train-correct": stage_train_correct,
    "correct": stage_correct,
    "evaluate": stage_evaluate,
    "sweep": stage_sweep,
}


def write_provenance(rd: RunDir, stages: list[str]) -> Path:
    cfg = rd.cfg
    rec = {
        "config_hash": rd.rc.hash(),
        "config": rd.rc.to_dict(),
        "variant": rd.variant,
        "pipeline": pipeline_config_to_dict(cfg),
        "seeds": {"subset": cfg.subset_seed, "nn": cfg.nn_seed, "shuffle": cfg.shuffle_seed},
        "threads": rd.rc.threads,
        "stages": stages,
        "versions": {"sigpca": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    path = rd / "provenance.json"
    path.write_text(json.dumps(rec, indent=1, sort_keys=True))
    return path


def run_stage(rc: RunConfig, stage: str, variant: str) -> Path | None:
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    rd = RunDir(rc, variant)
    out = STAGE_FUNCS[stage](rd)
    write_provenance(rd, [stage])
    return out


def run_all(rc: RunConfig, use_cache: bool = True) -> dict[str, Path]:
    """Steps 1-7 plus evaluation for every configured variant.

    Without configured data paths and with nothing yet under ``out/data``, the
    synthetic dataset is generated first.
    """
    if not rc.data and not (rc.data_path("model") / "manifest.json").is_file():
        log.info("no input data configured; generating the synthetic dataset")
        stage_synth(rc)
    results = {}
    for variant in rc.variants:
        rd = RunDir(rc, variant)
        log.info("%s: seeds subset=%d nn=%d shuffle=%d", variant, rd.cfg.subset_seed,
                 rd.cfg.nn_seed, rd.cfg.shuffle_seed)
        stage_signatures(rd, use_cache=use_cache)
        done = ["signatures"]
        for stage in ("reduce", "train-recon", "reconstruct", "train-correct", "correct"):
            STAGE_FUNCS[stage](rd)
            done.append(stage)
        if rc.evaluate.get("enabled", True):
            stage_evaluate(rd)
            done.append("evaluate")
        write_provenance(rd, done)
        results[variant] = rd.root
    return results


__all__ = ["ConfigError", "MissingArtifact", "RunConfig", "STAGES", "load_run_config", "run_all",
           "run_stage", "stage_synth", "ContainerError"]
