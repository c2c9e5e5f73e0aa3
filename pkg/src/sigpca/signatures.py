"""Windowed path-signature features of gridded fields.

Each location's series is treated as a piecewise-linear path.  The path is
optionally augmented with a zero basepoint and a normalised time channel, cut
into hierarchical dyadic windows, and the depth-1 (displacement) and depth-2
(iterated integral) terms are computed per window in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_artifact, write_artifact
from .data import GriddedField

TIME_CHANNEL = -1


class SignatureError(ValueError):
    pass


@dataclass(frozen=True)
class SignatureConfig:
    depth: int = 1
    window_depth: int = 3
    basepoint: bool = True
    time_augment: bool = True
    depth2_locations: tuple[int, ...] | None = None
    depth2_all: bool = False
    include_time_features: bool = False

    def __post_init__(self):
        if self.depth not in (1, 2):
            raise SignatureError(f"signature depth must be 1 or 2, got {self.depth}")
        if self.window_depth < 1:
            raise SignatureError(f"window depth must be >= 1, got {self.window_depth}")
        if self.depth2_locations is not None:
            object.__setattr__(self, "depth2_locations", tuple(int(i) for i in self.depth2_locations))
        if self.depth == 2 and not self.depth2_all and not self.depth2_locations:
            raise SignatureError("depth-2 signatures need depth2_locations or depth2_all=True")

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "window_depth": self.window_depth,
            "basepoint": self.basepoint,
            "time_augment": self.time_augment,
            "depth2_locations": list(self.depth2_locations) if self.depth2_locations else None,
            "depth2_all": self.depth2_all,
            "include_time_features": self.include_time_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SignatureConfig":
        d = dict(d)
        if d.get("depth2_locations") is not None:
            d["depth2_locations"] = tuple(d["depth2_locations"])
        return cls(**d)


@dataclass(frozen=True)
class Window:
    level: int
    start: int
    end: int


@dataclass(frozen=True)
class WindowSet:
    windows: tuple[Window, ...]
    length: int

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    def __getitem__(self, i):
        return self.windows[i]


@dataclass(frozen=True)
class ColumnDesc:
    """Identity of one feature column.

    ``term`` is the signature multi-index as channel labels: a location index,
    or ``TIME_CHANNEL`` for the time channel.
    """

    window: int
    term: tuple[int, ...]

    @property
    def locations(self) -> tuple[int, ...]:
        seen = []
        for t in self.term:
            if t != TIME_CHANNEL and t not in seen:
                seen.append(t)
        return tuple(seen)

    @property
    def order(self) -> int:
        return len(self.term)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    col_desc: list[ColumnDesc]
    windows: WindowSet | None = None
    n_locations: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.col_desc):
            raise SignatureError(
                f"feature values {self.values.shape} do not match {len(self.col_desc)} column descriptors")
        if self.n_locations is None:
            locs = [l for c in self.col_desc for l in c.locations]
            self.n_locations = max(locs) + 1 if locs else 0

    @property
    def shape(self):
        return self.values.shape

    def columns_of_order(self, order: int) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.col_desc) if c.order == order], dtype=int)


# ------------------------------------------------------------------ primitives

def augment_path(x: np.ndarray, basepoint: bool = True, time_augment: bool = True) -> np.ndarray:
    """Apply the basepoint and time augmentations to a ``channels x T`` path."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] < 2:
        raise SignatureError("a path needs at least 2 time steps")
    if basepoint:
        x = np.concatenate([np.zeros((x.shape[0], 1)), x], axis=1)
    if time_augment:
        n = x.shape[1]
        t = np.arange(n, dtype=np.float64) / (n - 1)
        x = np.concatenate([t[None, :], x], axis=0)
    return x


def dyadic_windows(length: int, window_depth: int) -> WindowSet:
    """Hierarchical dyadic windows over indices ``0 .. length-1``.

    Level 1 is the whole range; each level halves every window of the previous
    level at ``floor((start + end) / 2)``, so neighbours share a boundary index.
    """
    if window_depth < 1:
        raise SignatureError(f"window depth must be >= 1, got {window_depth}")
    if length < 2 ** (window_depth - 1) + 1:
        raise SignatureError(
            f"window depth {window_depth} too deep for a path of {length} points "
            f"(needs at least {2 ** (window_depth - 1) + 1})")
    level = [(0, length - 1)]
    out = []
    for lvl in range(1, window_depth + 1):
        out.extend(Window(lvl, a, b) for a, b in level)
        nxt = []
        for a, b in level:
            m = (a + b) // 2
            nxt += [(a, m), (m, b)]
        level = nxt
    return WindowSet(tuple(out), length)


def _check_window(path: np.ndarray, window) -> tuple[int, int]:
    a, b = (window.start, window.end) if isinstance(window, Window) else window
    if not 0 <= a < b < path.shape[-1]:
        raise SignatureError(f"empty or out-of-range window ({a}, {b}) for path of length {path.shape[-1]}")
    return a, b


def signature_depth1(path: np.ndarray, window) -> np.ndarray:
    path = np.atleast_2d(np.asarray(path, dtype=np.float64))
    a, b = _check_window(path, window)
    return path[..., b] - path[..., a]


def signature_depth2(path: np.ndarray, window) -> np.ndarray:
    """Second-level iterated integrals of the piecewise-linear path over a window.

    Works on ``channels x T`` or batched ``... x channels x T`` arrays and returns
    ``... x channels x channels`` with entry ``(i, j) = int dx_i dx_j`` (i first).
    """
    path = np.asarray(path, dtype=np.float64)
    if path.ndim == 1:
        path = path[None, :]
    a, b = _check_window(path, window)
    inc = np.diff(path[..., a:b + 1], axis=-1)
    before = np.cumsum(inc, axis=-1) - inc
    return (np.einsum("...it,...jt->...ij", before, inc)
            + 0.5 * np.einsum("...it,...jt->...ij", inc, inc))


# --------------------------------------------------------------- field level

def _augmented_length(T: int, cfg: SignatureConfig) -> int:
    return T + 1 if cfg.basepoint else T


def compute_features(fld: GriddedField, cfg: SignatureConfig) -> FeatureMatrix:
    """Per-sample signature features for every location of a field.

    Column layout: the depth-1 block (window-major, then location) followed, for
    depth 2, by the pair block over the selected locations plus the time channel
    (window-major, then ordered channel pair).
    """
    S, T, D = fld.shape
    n = _augmented_length(T, cfg)
    windows = dyadic_windows(n, cfg.window_depth)

    vals = fld.values
    if cfg.basepoint:
        vals = np.concatenate([np.zeros((S, 1, D)), vals], axis=1)
    tchan = np.arange(n, dtype=np.float64) / (n - 1)

    blocks = []
    desc: list[ColumnDesc] = []
    for w, win in enumerate(windows):
        if cfg.time_augment and cfg.include_time_features:
            blocks.append(np.full((S, 1), tchan[win.end] - tchan[win.start]))
            desc.append(ColumnDesc(w, (TIME_CHANNEL,)))
        blocks.append(vals[:, win.end, :] - vals[:, win.start, :])
        desc.extend(ColumnDesc(w, (d,)) for d in range(D))

    if cfg.depth == 2:
        locs = list(range(D)) if cfg.depth2_all else list(cfg.depth2_locations)
        if any(l < 0 or l >= D for l in locs):
            raise SignatureError(f"depth-2 location out of range for field with {D} locations")
        chans = ([TIME_CHANNEL] if cfg.time_augment else []) + locs
        path = np.transpose(vals[:, :, locs], (0, 2, 1))
        if cfg.time_augment:
            path = np.concatenate([np.broadcast_to(tchan, (S, 1, n)), path], axis=1)
        C = len(chans)
        for w, win in enumerate(windows):
            blocks.append(signature_depth2(path, win).reshape(S, C * C))
            desc.extend(ColumnDesc(w, (ci, cj)) for ci in chans for cj in chans)

    return FeatureMatrix(np.concatenate(blocks, axis=1), desc, windows, D,
                         {"config": cfg.to_dict(), "sample_labels": list(fld.sample_labels)})


@dataclass
class FluctuationTable:
    column_std: np.ndarray
    table: np.ndarray        # [location, window]
    locations: np.ndarray
    order: int


def signature_fluctuations(fm: FeatureMatrix, order: int = 1) -> FluctuationTable:
    """Sample standard deviation (ddof=1) of each feature across samples.

    The table groups columns of the requested signature order by (location,
    window); for depth-2 several columns involve a location, and the cell holds
    the root-mean-square of their standard deviations.
    """
    S = fm.values.shape[0]
    if S < 2:
        raise SignatureError("signature fluctuations need at least 2 samples")
    std = fm.values.std(axis=0, ddof=1)
    n_win = len(fm.windows) if fm.windows is not None else 1 + max(c.window for c in fm.col_desc)
    cols = fm.columns_of_order(order)
    locs = sorted({l for i in cols for l in fm.col_desc[i].locations})
    index = {l: k for k, l in enumerate(locs)}
    acc = np.zeros((len(locs), n_win))
    cnt = np.zeros((len(locs), n_win))
    for i in cols:
        c = fm.col_desc[i]
        for l in c.locations:
            acc[index[l], c.window] += std[i] ** 2
            cnt[index[l], c.window] += 1
    with np.errstate(invalid="ignore"):
        table = np.where(cnt > 0, np.sqrt(acc / np.maximum(cnt, 1)), np.nan)
    return FluctuationTable(std, table, np.array(locs, dtype=int), order)


# ---------------------------------------------------------------- persistence

def save_features(fm: FeatureMatrix, path) -> Path:
    meta = {
        "kind": "feature_matrix",
        "shape": list(fm.values.shape),
        "col_desc": [[c.window, list(c.term)] for c in fm.col_desc],
        "windows": ([[w.level, w.start, w.end] for w in fm.windows] if fm.windows else None),
        "window_path_length": fm.windows.length if fm.windows else None,
        "n_locations": fm.n_locations,
        "meta": fm.meta,
    }
    return write_artifact(path, meta, {"values": fm.values})


def load_features(path) -> FeatureMatrix:
    manifest, arrays = read_artifact(path)
    windows = None
    if manifest.get("windows"):
        windows = WindowSet(tuple(Window(*w) for w in manifest["windows"]),
                            manifest["window_path_length"])
    desc = [ColumnDesc(w, tuple(t)) for w, t in manifest["col_desc"]]
    return FeatureMatrix(arrays["values"], desc, windows, manifest.get("n_locations"),
                         manifest.get("meta", {}))
