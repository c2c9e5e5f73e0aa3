"""Multi-resolution Wendland basis functions for deep-kriging style inputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BANDWIDTH_FACTOR = 2.5


class BasisError(ValueError):
    pass


def wendland(r):
    """Wendland C4 kernel ``(1-r)^6 (35 r^2 + 18 r + 3) / 3`` on ``[0, 1]``, zero beyond."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise BasisError("wendland is defined for r >= 0")
    out = np.where(r <= 1.0, (1.0 - r) ** 6 * (35.0 * r * r + 18.0 * r + 3.0) / 3.0, 0.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Resolution:
    knots: np.ndarray            # (n*n, 2) lat, lon
    knots_per_axis: int
    knot_spacing: float
    bandwidth: float


@dataclass(frozen=True)
class KrigingBasis:
    bbox: tuple[float, float, float, float]
    resolutions: tuple[Resolution, ...]

    @property
    def size(self) -> int:
        return sum(r.knots.shape[0] for r in self.resolutions)

    def to_dict(self) -> dict:
        return {"bbox": list(self.bbox),
                "base_knots_per_axis": self.resolutions[0].knots_per_axis,
                "n_resolutions": len(self.resolutions)}


def build_basis(bbox, base_knots_per_axis: int = 5, n_resolutions: int = 3) -> KrigingBasis:
    """Square knot grids whose density doubles per axis at each resolution.

    Spacing is isotropic and set by the longer bbox side; the shorter axis is
    centred on the bbox, so every grid covers the bbox edge to edge.
    """
    lat_min, lat_max, lon_min, lon_max = map(float, bbox)
    if not (lat_max > lat_min and lon_max > lon_min):
        raise BasisError(f"degenerate bbox {bbox}")
    if base_knots_per_axis < 2 or n_resolutions < 1:
        raise BasisError("need base_knots_per_axis >= 2 and n_resolutions >= 1")
    extent = max(lat_max - lat_min, lon_max - lon_min)
    clat = 0.5 * (lat_min + lat_max)
    clon = 0.5 * (lon_min + lon_max)
    res = []
    for r in range(n_resolutions):
        n = base_knots_per_axis * 2 ** r
        spacing = extent / (n - 1)
        offs = (np.arange(n) - (n - 1) / 2.0) * spacing
        glat, glon = np.meshgrid(clat + offs, clon + offs, indexing="ij")
        knots = np.column_stack([glat.ravel(), glon.ravel()])
        res.append(Resolution(knots, n, spacing, BANDWIDTH_FACTOR * spacing))
    return KrigingBasis((lat_min, lat_max, lon_min, lon_max), tuple(res))


def basis_matrix(coords, basis: KrigingBasis) -> np.ndarray:
    """Evaluate every basis function at every coordinate (planar degree distance)."""
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    blocks = []
    for res in basis.resolutions:
        d = np.sqrt(((c[:, None, :] - res.knots[None, :, :]) ** 2).sum(axis=-1))
        blocks.append(wendland(d / res.bandwidth))
    return np.concatenate(blocks, axis=1)
