"""Ray sampling and volume integration of the transfer gradient.

A pixel value is the transmittance-weighted sum of per-sample transfer
gradients:

    I(u, v; w) = sum_i  T_i (1 - exp(-sigma_i * delta_i)) * h_i
    T_i        = exp(-sum_{j<i} sigma_j * delta_j)

Coarse samples are stratified over [t_near, t_far]; fine samples are
drawn from the piecewise-constant PDF induced by the coarse weights
(with a small uniform floor) and merged with the coarse depths before
the fine networks are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import field as fm
from .autodiff import Var
from .errors import InvalidInputError, NumericalError

# Blend of the coarse-weight PDF with a uniform floor so no bin is
# unreachable early in training.
PDF_WEIGHT_FRACTION = 0.95


@dataclass
class Ray:
    """A camera ray with sampling bounds and originating pixel coords."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    pixel_uv: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if not (0.0 <= self.t_near < self.t_far):
            raise InvalidInputError(f"require 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]")
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise InvalidInputError(f"ray direction must be unit length, |d| = {n}")


@dataclass
class SampleSet:
    """Sorted depths along a ray, their segment lengths and positions."""

    depths: np.ndarray     # (N,), strictly increasing
    deltas: np.ndarray     # (N,), last entry capped at t_far - t_N
    positions: np.ndarray  # (N, 3)


@dataclass
class WeightProfile:
    """Per-sample accumulation weights and transmittances along one ray."""

    weights: np.ndarray         # (N,), in [0, 1]
    transmittances: np.ndarray  # (N,), T_1 = 1, non-increasing
    residual: float             # transmittance remaining after the last sample


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    near: Optional[float] = None   # None: derive from the dataset bounding sphere
    far: Optional[float] = None
    seed: Optional[int] = 0        # None: deterministic bin-center sampling
    batch_rows: int = 16           # image rows rendered per chunk


def stratified_depths(nears: np.ndarray, fars: np.ndarray, n: int,
                      rng: Optional[np.random.Generator]) -> np.ndarray:
    """One jittered depth per equal bin of [near, far] for each of R rays.
    With rng=None samples sit at bin centers (deterministic)."""
    if n < 2:
        raise InvalidInputError("need at least 2 samples per ray")
    nears = np.asarray(nears, dtype=np.float64)
    fars = np.asarray(fars, dtype=np.float64)
    if not (np.all(np.isfinite(nears)) and np.all(np.isfinite(fars))):
        raise InvalidInputError("sampling bounds must be finite")
    if np.any(fars <= nears):
        raise InvalidInputError("require t_near < t_far for all rays")
    r = nears.shape[0]
    if rng is None:
        u = np.full((r, n), 0.5)
    else:
        u = rng.random((r, n))
    edges = np.arange(n, dtype=np.float64)[None, :]
    width = ((fars - nears) / n)[:, None]
    return nears[:, None] + (edges + u) * width


def sample_stratified(ray: Ray, n: int, rng: Optional[np.random.Generator]) -> SampleSet:
    depths = stratified_depths(np.array([ray.t_near]), np.array([ray.t_far]), n, rng)[0]
    deltas = _deltas_from_depths(depths[None, :], np.array([ray.t_far]))[0]
    positions = ray.origin[None, :] + depths[:, None] * ray.direction[None, :]
    return SampleSet(depths=depths, deltas=deltas, positions=positions)


def _deltas_from_depths(depths: np.ndarray, fars: np.ndarray) -> np.ndarray:
    """(R, N) depths -> (R, N) segment lengths; the final segment is capped
    at t_far rather than extended to infinity (finite scenes)."""
    d = np.diff(depths, axis=1)
    last = (fars - depths[:, -1])[:, None]
    return np.concatenate([d, last], axis=1)


def compute_weights(sigma: np.ndarray, delta: np.ndarray) -> WeightProfile:
    """Accumulation weights w_i = T_i (1 - exp(-sigma_i delta_i)) for one
    ray, computed in float64."""
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if sigma.shape != delta.shape:
        raise InvalidInputError(f"sigma/delta length mismatch: {sigma.shape} vs {delta.shape}")
    if np.any(sigma < 0):
        raise InvalidInputError("densities must be non-negative")
    if np.any(delta <= 0):
        raise InvalidInputError("segment lengths must be positive")
    s = sigma * delta
    excl = np.concatenate([[0.0], np.cumsum(s)[:-1]])
    trans = np.exp(-excl)
    weights = trans * (1.0 - np.exp(-s))
    residual = float(np.exp(-np.sum(s)))
    return WeightProfile(weights=weights, transmittances=trans, residual=residual)


def integrate_transfer(profile: WeightProfile, h: np.ndarray) -> np.ndarray:
    """sum_i w_i * h_i over one ray; h is (N, 3)."""
    h = np.asarray(h, dtype=np.float64)
    w = profile.weights
    if h.shape[0] != w.shape[0]:
        raise InvalidInputError(f"{w.shape[0]} weights vs {h.shape[0]} transfer samples")
    return w @ h


def weights_from_sigma(sigma: Var, deltas: np.ndarray) -> Var:
    """Tape-friendly batched accumulation weights: sigma (R, N) Var,
    deltas (R, N) constant (depths are never differentiated)."""
    s = sigma * ad.constant(deltas)
    trans = ad.exp(ad.neg(ad.cumsum_exclusive(s, axis=1)))
    alpha = ad.sub(1.0, ad.exp(ad.neg(s)))
    return trans * alpha


def integrate_batch(weights: Var, h: Var, n_rays: int, n_samples: int) -> Var:
    """Batched weighted accumulation: weights (R, N), h (R*N, 3) -> (R, 3)."""
    h3 = ad.reshape(h, (n_rays, n_samples, 3))
    w3 = ad.reshape(weights, (n_rays, n_samples, 1))
    return ad.reduce_sum(w3 * h3, axis=1)


def fine_depths(depths: np.ndarray, deltas: np.ndarray, weights: np.ndarray,
                n_fine: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Inverse-CDF draws from the piecewise-constant PDF over the coarse
    bins [t_i, t_i + delta_i], with bin mass 0.95 * normalized-weight
    + 0.05 * uniform. With rng=None the draws are stratified midpoints."""
    if n_fine < 1:
        raise InvalidInputError("need at least 1 fine sample")
    r, n = depths.shape
    wsum = weights.sum(axis=1, keepdims=True)
    wnorm = np.where(wsum > 1e-12, weights / np.maximum(wsum, 1e-12), 1.0 / n)
    pdf = PDF_WEIGHT_FRACTION * wnorm + (1.0 - PDF_WEIGHT_FRACTION) / n
    pdf /= pdf.sum(axis=1, keepdims=True)
    cdf = np.cumsum(pdf, axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (r, n_fine)).copy()
    else:
        u = rng.random((r, n_fine))
    # index of the bin each u falls in: count of cdf entries strictly below u
    idx = (cdf[:, :, None] < u[:, None, :]).sum(axis=1)
    idx = np.minimum(idx, n - 1)
    cdf_low = np.where(idx > 0, np.take_along_axis(cdf, np.maximum(idx - 1, 0), axis=1), 0.0)
    p = np.take_along_axis(pdf, idx, axis=1)
    frac = np.clip((u - cdf_low) / np.maximum(p, 1e-12), 0.0, 1.0 - 1e-12)
    return np.take_along_axis(depths, idx, axis=1) + frac * np.take_along_axis(deltas, idx, axis=1)


def _enforce_increasing(t: np.ndarray) -> np.ndarray:
    """Nudge exact duplicates after a merge by one ulp (keeps deltas > 0)."""
    bad_rows = np.nonzero(~np.all(np.diff(t, axis=1) > 0, axis=1))[0]
    for r in bad_rows:
        row = t[r]
        for i in range(1, row.shape[0]):
            if row[i] <= row[i - 1]:
                row[i] = np.nextafter(row[i - 1], np.inf)
    return t


def merge_depths(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    merged = np.sort(np.concatenate([a, b], axis=1), axis=1)
    return _enforce_increasing(merged)


def sample_hierarchical(ray: Ray, coarse_depths: np.ndarray, coarse_profile: WeightProfile,
                        n_fine: int, rng: Optional[np.random.Generator]) -> SampleSet:
    """Fine samples from the coarse weight PDF, merged with the coarse depths."""
    depths_2d = coarse_depths[None, :]
    deltas_2d = _deltas_from_depths(depths_2d, np.array([ray.t_far]))
    new = fine_depths(depths_2d, deltas_2d, coarse_profile.weights[None, :], n_fine, rng)
    merged = merge_depths(depths_2d, new)[0]
    deltas = _deltas_from_depths(merged[None, :], np.array([ray.t_far]))[0]
    positions = ray.origin[None, :] + merged[:, None] * ray.direction[None, :]
    return SampleSet(depths=merged, deltas=deltas, positions=positions)


# ---------------------------------------------------------------------------
# batched coarse+fine rendering

def _encode_positions(origins, dirs, depths, l_pos, dtype):
    pos = origins[:, None, :] + depths[:, :, None] * dirs[:, None, :]
    flat = pos.reshape(-1, 3).astype(dtype)
    return fm.positional_encode(flat, l_pos)


def _per_sample_dir_encoding(view_enc: np.ndarray, light_enc: np.ndarray, n_samples: int):
    both = np.concatenate([view_enc, light_enc], axis=1)
    return np.repeat(both, n_samples, axis=0)


def render_rays(params: fm.FieldParams, pvars: dict[str, Var],
                origins: np.ndarray, dirs: np.ndarray,
                nears: np.ndarray, fars: np.ndarray, omegas: np.ndarray,
                cfg: RenderConfig, rng: Optional[np.random.Generator],
                frozen_depths: Optional[tuple[np.ndarray, np.ndarray]] = None) -> dict:
    """Render a batch of rays through both levels.

    Returns Vars (graph nodes when pvars are tape leaves, constants
    otherwise) for the coarse/fine pixel predictions and per-sample
    densities, plus the numpy depth grids. Sample depths are constants on
    the tape: no gradient flows into the sampling; `frozen_depths`
    replays a previously sampled (coarse, merged) depth pair, which
    finite-difference oracles need to hold the graph's constants fixed.
    """
    arch = params.arch
    dtype = params.dtype
    n_rays = origins.shape[0]

    view_enc = fm.positional_encode(dirs.astype(dtype), arch.l_dir)
    light_enc = fm.positional_encode(omegas.astype(dtype), arch.l_dir)

    # coarse pass
    t_c = stratified_depths(nears, fars, cfg.n_coarse, rng) if frozen_depths is None \
        else frozen_depths[0]
    d_c = _deltas_from_depths(t_c, fars)
    x_enc_c = ad.constant(_encode_positions(origins, dirs, t_c, arch.l_pos, dtype))
    sigma_c = ad.reshape(fm.density_forward(pvars, "coarse", x_enc_c, arch),
                         (n_rays, cfg.n_coarse))
    w_c = weights_from_sigma(sigma_c, d_c.astype(dtype))
    dir_enc_c = ad.constant(_per_sample_dir_encoding(view_enc, light_enc, cfg.n_coarse))
    h_c = fm.transfer_forward(pvars, "coarse", x_enc_c, dir_enc_c, arch)
    rgb_c = integrate_batch(w_c, h_c, n_rays, cfg.n_coarse)

    # fine pass over merged depths
    if frozen_depths is None:
        t_new = fine_depths(t_c, d_c, w_c.value.astype(np.float64), cfg.n_fine, rng)
        t_m = merge_depths(t_c, t_new)
    else:
        t_m = frozen_depths[1]
    n_merged = t_m.shape[1]
    d_m = _deltas_from_depths(t_m, fars)
    x_enc_f = ad.constant(_encode_positions(origins, dirs, t_m, arch.l_pos, dtype))
    sigma_f = ad.reshape(fm.density_forward(pvars, "fine", x_enc_f, arch),
                         (n_rays, n_merged))
    w_f = weights_from_sigma(sigma_f, d_m.astype(dtype))
    dir_enc_f = ad.constant(_per_sample_dir_encoding(view_enc, light_enc, n_merged))
    h_f = fm.transfer_forward(pvars, "fine", x_enc_f, dir_enc_f, arch)
    rgb_f = integrate_batch(w_f, h_f, n_rays, n_merged)

    return {
        "coarse_rgb": rgb_c, "fine_rgb": rgb_f,
        "sigma_coarse": sigma_c, "sigma_fine": sigma_f,
        "weights_coarse": w_c, "weights_fine": w_f,
        "depths_coarse": t_c, "depths_fine": t_m,
    }


def render_pixel(params: fm.FieldParams, ray: Ray, omega: np.ndarray,
                 cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Coarse and fine HDR predictions for one ray (both are supervised
    during training, so both are part of the contract)."""
    omega = np.asarray(omega, dtype=np.float64)
    n = np.linalg.norm(omega)
    if abs(n - 1.0) > 1e-6:
        raise InvalidInputError(f"light direction must be unit length, |w| = {n}")
    rng = np.random.default_rng(cfg.seed) if cfg.seed is not None else None
    pvars = fm.wrap_params(params)
    out = render_rays(params, pvars,
                      ray.origin[None, :], ray.direction[None, :],
                      np.array([ray.t_near]), np.array([ray.t_far]),
                      omega[None, :], cfg, rng)
    coarse = out["coarse_rgb"].value[0].astype(np.float64)
    fine = out["fine_rgb"].value[0].astype(np.float64)
    if not (np.all(np.isfinite(coarse)) and np.all(np.isfinite(fine))):
        raise NumericalError("render produced non-finite values")
    return coarse, fine


def render_ray_batch_under_lights(params: fm.FieldParams, origins, dirs, nears, fars,
                                  light_dirs: np.ndarray, cfg: RenderConfig) -> np.ndarray:
    """Fine predictions for every (ray, light) pair, shape (L, R, 3).

    Density, sampling and the transfer trunk are shared across lights;
    only the directional head re-runs per light. Inference only.
    """
    arch = params.arch
    dtype = params.dtype
    n_rays = origins.shape[0]
    pvars = fm.wrap_params(params)
    rng = np.random.default_rng(cfg.seed) if cfg.seed is not None else None

    t_c = stratified_depths(nears, fars, cfg.n_coarse, rng)
    d_c = _deltas_from_depths(t_c, fars)
    x_enc_c = ad.constant(_encode_positions(origins, dirs, t_c, arch.l_pos, dtype))
    sigma_c = ad.reshape(fm.density_forward(pvars, "coarse", x_enc_c, arch),
                         (n_rays, cfg.n_coarse))
    w_c = weights_from_sigma(sigma_c, d_c.astype(dtype))

    t_m = merge_depths(t_c, fine_depths(t_c, d_c, w_c.value.astype(np.float64), cfg.n_fine, rng))
    n_merged = t_m.shape[1]
    d_m = _deltas_from_depths(t_m, fars)
    x_enc_f = ad.constant(_encode_positions(origins, dirs, t_m, arch.l_pos, dtype))
    sigma_f = ad.reshape(fm.density_forward(pvars, "fine", x_enc_f, arch),
                         (n_rays, n_merged))
    w_f = weights_from_sigma(sigma_f, d_m.astype(dtype))

    feat = fm.transfer_trunk(pvars, "fine", x_enc_f, arch)
    view_enc = fm.positional_encode(dirs.astype(dtype), arch.l_dir)
    view_rep = np.repeat(view_enc, n_merged, axis=0)
    out = np.empty((light_dirs.shape[0], n_rays, 3), dtype=np.float64)
    for k, omega in enumerate(light_dirs):
        light_enc = fm.positional_encode(omega.astype(dtype), arch.l_dir)
        dir_enc = ad.constant(np.concatenate(
            [view_rep, np.broadcast_to(light_enc, (view_rep.shape[0], light_enc.shape[0]))],
            axis=1, dtype=dtype))
        h = fm.transfer_head(pvars, "fine", feat, dir_enc, arch)
        out[k] = integrate_batch(w_f, h, n_rays, n_merged).value.astype(np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericalError("render produced non-finite values")
    return out


def compute_weights_batch(sigma: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Vectorized accumulation weights over (R, N) arrays (float64, no tape)."""
    s = sigma.astype(np.float64) * delta
    excl = np.concatenate([np.zeros((s.shape[0], 1)), np.cumsum(s, axis=1)[:, :-1]], axis=1)
    return np.exp(-excl) * (1.0 - np.exp(-s))


def render_image(params: fm.FieldParams, camera, omega: np.ndarray, cfg: RenderConfig,
                 near: float, far: float) -> np.ndarray:
    """Render a full view under a single OLAT direction, row-chunked."""
    from .dataset import camera_ray_grid  # local import to avoid a cycle

    h, w = camera.height, camera.width
    out = np.zeros((h, w, 3), dtype=np.float64)
    pvars = fm.wrap_params(params)
    rng = np.random.default_rng(cfg.seed) if cfg.seed is not None else None
    rows_per = max(1, cfg.batch_rows)
    omega = np.asarray(omega, dtype=np.float64)
    for r0 in range(0, h, rows_per):
        r1 = min(h, r0 + rows_per)
        origins, dirs = camera_ray_grid(camera, r0, r1)
        n = origins.shape[0]
        res = render_rays(params, pvars, origins, dirs,
                          np.full(n, near), np.full(n, far),
                          np.broadcast_to(omega, (n, 3)), cfg, rng)
        out[r0:r1] = res["fine_rgb"].value.reshape(r1 - r0, w, 3)
    if not np.all(np.isfinite(out)):
        raise NumericalError("render produced non-finite values")
    return out
