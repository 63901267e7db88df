"""OLAT light parameterization, the direction-grid protocol, equirectangular
envmaps, median-cut light extraction and envmap relighting by accumulation.

Equirectangular convention (fixed here and used everywhere): row 0 is the
zenith, colatitude grows downward as theta = pi * p / M for continuous row
coordinate p (pixel r has center p = r + 0.5); azimuth phi = 2*pi * q / N
grows eastward with column 0 starting at the +x axis. Directions are
(sin(theta) cos(phi), sin(theta) sin(phi), cos(theta)) with z up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import render as vr
from . import field as fm
from .errors import InvalidInputError

LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class OlatLight:
    """A point light: unit direction toward the light from the scene center,
    per-channel intensity (white lights replicate one channel), distance in
    scene units (metadata only)."""

    direction: np.ndarray
    intensity: np.ndarray = None
    distance: float = 100.0

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise InvalidInputError(f"light direction must be unit length, |w| = {n}")
        if self.intensity is None:
            self.intensity = np.ones(3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if np.any(self.intensity <= 0):
            raise InvalidInputError("light intensity must be positive")


@dataclass
class Envmap:
    """Equirectangular HDR map, row 0 at the zenith."""

    data: np.ndarray  # (M, N, 3), >= 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise InvalidInputError(f"envmap must be (M, N, 3), got {self.data.shape}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise InvalidInputError("envmap must have at least one pixel")
        if np.any(self.data < 0) or not np.all(np.isfinite(self.data)):
            raise InvalidInputError("envmap values must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class DirectionalLight:
    """A median-cut (or per-pixel) light: unit direction, RGB energy equal to
    the latitude-weighted sum of its source region, and that region's pixel
    rectangle (row0, row1, col0, col1), half open."""

    direction: np.ndarray
    energy: np.ndarray
    region: tuple[int, int, int, int]

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)


@dataclass
class GridLight:
    direction: np.ndarray
    row: int
    col: int
    split: str  # "train" or "test"


def direction_from_coords(p: float, q: float, m: int, n: int) -> np.ndarray:
    """Unit direction for continuous equirectangular coordinates (p, q)."""
    theta = math.pi * p / m
    phi = 2.0 * math.pi * q / n
    st = math.sin(theta)
    return np.array([st * math.cos(phi), st * math.sin(phi), math.cos(theta)])


def pixel_direction(row: int, col: int, m: int, n: int) -> np.ndarray:
    return direction_from_coords(row + 0.5, col + 0.5, m, n)


def direction_to_pixel(d: np.ndarray, m: int, n: int) -> tuple[int, int]:
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d)
    theta = math.acos(min(1.0, max(-1.0, d[2])))
    phi = math.atan2(d[1], d[0]) % (2.0 * math.pi)
    row = min(m - 1, int(theta / math.pi * m))
    col = min(n - 1, int(phi / (2.0 * math.pi) * n))
    return row, col


def latitude_weight(row: int, m: int) -> float:
    """cos of the latitude at the row center; accounts for pixel solid angle."""
    if not 0 <= row < m:
        raise InvalidInputError(f"row {row} outside [0, {m})")
    latitude = math.pi / 2.0 - math.pi * (row + 0.5) / m
    return math.cos(latitude)


def latitude_weights(m: int) -> np.ndarray:
    return np.array([latitude_weight(r, m) for r in range(m)])


def olat_grid(n_lat: int = 7, n_lon: int = 32) -> list[GridLight]:
    """The evaluation-protocol direction grid: n_lat upper-hemisphere rows of
    a (2*(n_lat+1)) x n_lon equirectangular grid (rows 1..n_lat, skipping the
    zenith cap), n_lon evenly spaced azimuths per row, and alternating
    train/test labels along the flattened row-major order.

    Defaults give 7 x 32 = 224 directions, 112 of them train, matching rows
    2-8 (1-indexed) of a 16 x 32 envmap.
    """
    if n_lat < 1 or n_lon < 1:
        raise InvalidInputError("grid must have at least one latitude and longitude")
    m = 2 * (n_lat + 1)
    out = []
    k = 0
    for row in range(1, n_lat + 1):
        for col in range(n_lon):
            split = "train" if k % 2 == 0 else "test"
            out.append(GridLight(direction=pixel_direction(row, col, m, n_lon),
                                 row=row, col=col, split=split))
            k += 1
    return out


# ---------------------------------------------------------------------------
# median cut

def _split_boundary(marginal: np.ndarray) -> int:
    """Boundary index (1..len-1) closest to the energy median; ties and
    zero-energy regions break toward the lower / middle index."""
    total = marginal.sum()
    if total <= 0:
        return max(1, marginal.shape[0] // 2)
    cum = np.cumsum(marginal)[:-1]  # energy left of each candidate boundary
    return int(np.argmin(np.abs(cum - total / 2.0))) + 1


def median_cut(env: Envmap, n_lights: int) -> list[DirectionalLight]:
    """Recursive equal-energy split of the latitude-weighted luminance image
    along the longer region axis. Each light sits at its region's energy
    centroid, carrying the region's total latitude-weighted RGB energy;
    total energy is conserved exactly.
    """
    if n_lights < 1 or (n_lights & (n_lights - 1)) != 0:
        raise InvalidInputError(f"n_lights must be a power of two, got {n_lights}")
    m, n = env.height, env.width
    latw = latitude_weights(m)
    wrgb = env.data * latw[:, None, None]
    lum = wrgb @ LUMA

    # regions are (r0, r1, c0, c1, fraction); single-pixel regions that must
    # keep splitting are halved in place so the partition stays energy-exact
    regions = [(0, m, 0, n, 1.0)]
    while len(regions) < n_lights:
        nxt = []
        for (r0, r1, c0, c1, frac) in regions:
            h, w = r1 - r0, c1 - c0
            if h * w == 1:
                nxt.append((r0, r1, c0, c1, frac / 2.0))
                nxt.append((r0, r1, c0, c1, frac / 2.0))
                continue
            if w >= h and w > 1:
                b = c0 + _split_boundary(lum[r0:r1, c0:c1].sum(axis=0))
                nxt.append((r0, r1, c0, b, frac))
                nxt.append((r0, r1, b, c1, frac))
            else:
                b = r0 + _split_boundary(lum[r0:r1, c0:c1].sum(axis=1))
                nxt.append((r0, b, c0, c1, frac))
                nxt.append((b, r1, c0, c1, frac))
        regions = nxt

    lights = []
    rows_c = np.arange(m) + 0.5
    cols_c = np.arange(n) + 0.5
    for (r0, r1, c0, c1, frac) in regions:
        patch = lum[r0:r1, c0:c1]
        total = patch.sum()
        energy = wrgb[r0:r1, c0:c1].sum(axis=(0, 1)) * frac
        if total > 0:
            pc = float((patch.sum(axis=1) @ rows_c[r0:r1]) / total)
            qc = float((patch.sum(axis=0) @ cols_c[c0:c1]) / total)
        else:
            pc = 0.5 * (r0 + r1)
            qc = 0.5 * (c0 + c1)
        lights.append(DirectionalLight(direction=direction_from_coords(pc, qc, m, n),
                                       energy=energy, region=(r0, r1, c0, c1)))
    return lights


def envmap_to_lights(env: Envmap) -> list[DirectionalLight]:
    """Brute-force conversion: every pixel becomes one light."""
    m, n = env.height, env.width
    latw = latitude_weights(m)
    out = []
    for r in range(m):
        for c in range(n):
            out.append(DirectionalLight(direction=pixel_direction(r, c, m, n),
                                        energy=env.data[r, c] * latw[r],
                                        region=(r, r + 1, c, c + 1)))
    return out


def total_weighted_energy(env: Envmap) -> np.ndarray:
    """Latitude-weighted RGB energy of the whole map (conservation oracle)."""
    latw = latitude_weights(env.height)
    return (env.data * latw[:, None, None]).sum(axis=(0, 1))


def save_lights(lights: list[DirectionalLight], path: str) -> None:
    """Export a light list as JSON: direction, RGB energy, source rectangle."""
    import json

    doc = [{"direction": l.direction.tolist(), "energy": l.energy.tolist(),
            "region": list(l.region)} for l in lights]
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_lights(path: str) -> list[DirectionalLight]:
    import json

    with open(path) as f:
        try:
            doc = json.load(f)
            return [DirectionalLight(direction=np.asarray(d["direction"]),
                                     energy=np.asarray(d["energy"]),
                                     region=tuple(d["region"])) for d in doc]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise InvalidInputError(f"{path}: invalid light list ({e})") from e


# ---------------------------------------------------------------------------
# relighting by OLAT accumulation

def relight_rays(params: fm.FieldParams, origins, dirs, nears, fars,
                 lights: list[DirectionalLight], cfg: vr.RenderConfig) -> np.ndarray:
    """sum_k energy_k (x) I_fine(ray; w_k) for a batch of rays, (R, 3).

    The field is trained under white light; its RGB prediction is modulated
    componentwise by each light's RGB energy (independent-channel
    assumption)."""
    if not lights:
        return np.zeros((origins.shape[0], 3))
    light_dirs = np.stack([l.direction for l in lights], axis=0)
    preds = vr.render_ray_batch_under_lights(params, origins, dirs, nears, fars,
                                             light_dirs, cfg)
    energies = np.stack([l.energy for l in lights], axis=0)  # (L, 3)
    return np.einsum("lc,lrc->rc", energies, preds)


def relight_envmap(params: fm.FieldParams, ray: vr.Ray,
                   lights: list[DirectionalLight], cfg: vr.RenderConfig) -> np.ndarray:
    """Envmap relighting of a single ray by OLAT accumulation."""
    return relight_rays(params, ray.origin[None, :], ray.direction[None, :],
                        np.array([ray.t_near]), np.array([ray.t_far]), lights, cfg)[0]


def relight_image(params: fm.FieldParams, camera, lights: list[DirectionalLight],
                  cfg: vr.RenderConfig, near: float, far: float) -> np.ndarray:
    """Full-view envmap relighting, row-chunked like render_image."""
    from .dataset import camera_ray_grid

    h, w = camera.height, camera.width
    out = np.zeros((h, w, 3), dtype=np.float64)
    rows_per = max(1, cfg.batch_rows)
    for r0 in range(0, h, rows_per):
        r1 = min(h, r0 + rows_per)
        origins, dirs = camera_ray_grid(camera, r0, r1)
        n = origins.shape[0]
        out[r0:r1] = relight_rays(params, origins, dirs, np.full(n, near), np.full(n, far),
                                  lights, cfg).reshape(r1 - r0, w, 3)
    return out
