"""Deterministic analytic ground truth for OLAT datasets at desk scale.

The shading model is intentionally simple and documented: per pixel,

    L = albedo * lambert * max(0, n . w) * exp(-tau_shadow)          (surface)
      + integral over the in-medium part of the view ray of
            albedo * alpha * sigma_t * exp(-(tau_view + tau_light))  (single scattering)

where tau_* are optical depths along straight, unrefracted paths through
the primitive set and the scatter coefficient at a point belongs to the
innermost primitive containing it (later list entries override earlier
ones, which is how an embedded sub-primitive casts its silhouette into
back-lit renders). Lights are white and directional; images are linear
HDR with exact zeros in the background.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .dataset import (Camera, LightRecord, Manifest, camera_ray_grid,
                      save_manifest, write_pfm)
from .errors import InvalidInputError
from .lighting import OlatLight, olat_grid

# quadrature samples along the in-medium chord of each view ray
N_QUADRATURE = 96
_EPS = 1e-6


@dataclass
class Material:
    albedo: np.ndarray
    sigma_t: float = 1.0
    scatter_albedo: float = 0.9
    lambert: float = 0.25

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.sigma_t < 0:
            raise InvalidInputError("extinction coefficient must be >= 0")
        if not 0.0 <= self.scatter_albedo <= 1.0:
            raise InvalidInputError("scattering albedo must lie in [0, 1]")


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: np.ndarray
    size: np.ndarray  # sphere: (1,) radius; box: (3,) half extents
    material: Material

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        if self.kind not in ("sphere", "box"):
            raise InvalidInputError(f"unknown primitive kind {self.kind!r}")
        if self.kind == "box" and self.size.shape != (3,):
            raise InvalidInputError("box size must be three half extents")

    def bounding_radius(self) -> float:
        return float(self.size[0] if self.kind == "sphere" else np.linalg.norm(self.size))


@dataclass
class OracleScene:
    name: str
    primitives: list


@dataclass
class CaptureRig:
    cameras: list          # dataset.Camera, with split labels
    lights: list           # dataset.LightRecord, with split labels
    scene_radius: float    # bounding-sphere radius in scene units
    scene_center: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))


# ---------------------------------------------------------------------------
# intersections (vectorized over rays)

def _intersect(prim: Primitive, origins: np.ndarray, dirs: np.ndarray
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entry/exit parameters (t0 <= t1) and a hit flag for each ray."""
    if prim.kind == "sphere":
        oc = origins - prim.center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - prim.size[0] ** 2
        disc = b * b - c
        hit = disc > 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        return -b - sq, -b + sq, hit
    lo = prim.center - prim.size
    hi = prim.center + prim.size
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    return tmin, tmax, tmax > tmin


def _normal(prim: Primitive, points: np.ndarray) -> np.ndarray:
    if prim.kind == "sphere":
        n = points - prim.center
        return n / np.linalg.norm(n, axis=1, keepdims=True)
    rel = (points - prim.center) / prim.size
    axis = np.argmax(np.abs(rel), axis=1)
    n = np.zeros_like(points)
    n[np.arange(points.shape[0]), axis] = np.sign(rel[np.arange(points.shape[0]), axis])
    return n


def _optical_depth(scene: OracleScene, points: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Optical depth from each point to infinity along one direction."""
    tau = np.zeros(points.shape[0])
    dirs = np.broadcast_to(direction, points.shape)
    for prim in scene.primitives:
        t0, t1, hit = _intersect(prim, points, dirs)
        length = np.maximum(t1, 0.0) - np.maximum(t0, 0.0)
        tau += prim.material.sigma_t * np.where(hit, np.maximum(length, 0.0), 0.0)
    return tau


def render_olat_gt(scene: OracleScene, camera: Camera, light: OlatLight,
                   size: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """HDR image plus foreground mask for one camera and one point light.

    `size` optionally overrides the camera's square resolution (intrinsics
    are rescaled proportionally).
    """
    if size is not None and size != camera.width:
        s = size / camera.width
        camera = Camera(name=camera.name, K=camera.K * np.array([[s], [s], [1.0]]),
                        R=camera.R, t=camera.t,
                        width=size, height=int(round(camera.height * s)), split=camera.split)
    omega = light.direction
    origins, dirs = camera_ray_grid(camera)
    n_rays = origins.shape[0]

    # nearest surface hit over all primitives
    t_hit = np.full(n_rays, np.inf)
    prim_idx = np.full(n_rays, -1)
    t_exit_all = np.zeros(n_rays)
    for k, prim in enumerate(scene.primitives):
        t0, t1, hit = _intersect(prim, origins, dirs)
        front = hit & (t0 > _EPS)
        closer = front & (t0 < t_hit)
        t_hit[closer] = t0[closer]
        prim_idx[closer] = k
        t_exit_all = np.maximum(t_exit_all, np.where(hit, t1, 0.0))
    mask = prim_idx >= 0

    image = np.zeros((n_rays, 3))
    idx = np.nonzero(mask)[0]
    if idx.size:
        image[idx] = _shade(scene, origins[idx], dirs[idx], t_hit[idx],
                            prim_idx[idx], t_exit_all[idx], omega)
    h, w = camera.height, camera.width
    intensity = light.intensity[None, :]
    return (image * intensity).reshape(h, w, 3), mask.reshape(h, w).astype(np.float32)


def _shade(scene: OracleScene, origins, dirs, t_hit, prim_idx, t_exit, omega) -> np.ndarray:
    n_hit = origins.shape[0]
    points = origins + t_hit[:, None] * dirs
    out = np.zeros((n_hit, 3))

    # Lambertian surface term with transmittance-based shadowing
    for k, prim in enumerate(scene.primitives):
        sel = prim_idx == k
        if not sel.any():
            continue
        p = points[sel]
        n = _normal(prim, p)
        ndotl = np.maximum(np.einsum("ij,j->i", n, omega), 0.0)
        vis = np.exp(-_optical_depth(scene, p + 1e-4 * n, omega))
        out[sel] += (prim.material.lambert * ndotl * vis)[:, None] * prim.material.albedo

    # single-scattering term: midpoint quadrature over [t_hit, t_exit]
    span = np.maximum(t_exit - t_hit, 0.0)
    has_medium = span > _EPS
    if has_medium.any():
        hsel = np.nonzero(has_medium)[0]
        o, d = origins[hsel], dirs[hsel]
        th, sp = t_hit[hsel], span[hsel]
        steps = (np.arange(N_QUADRATURE) + 0.5) / N_QUADRATURE
        ts = th[:, None] + steps[None, :] * sp[:, None]                 # (P, Q)
        pts = o[:, None, :] + ts[..., None] * d[:, None, :]             # (P, Q, 3)
        flat = pts.reshape(-1, 3)

        sigma_s = np.zeros(flat.shape[0])
        albedo = np.zeros((flat.shape[0], 3))
        tau_view = np.zeros(flat.shape[0])
        ts_flat = ts.reshape(-1)
        th_flat = np.repeat(th, N_QUADRATURE)
        dirs_flat = np.repeat(d, N_QUADRATURE, axis=0)
        o_flat = np.repeat(o, N_QUADRATURE, axis=0)
        for prim in scene.primitives:
            t0, t1, hit = _intersect(prim, o_flat, dirs_flat)
            inside = hit & (t0 < ts_flat) & (ts_flat < t1)
            # later primitives override earlier ones (embedded media)
            sigma_s[inside] = prim.material.scatter_albedo * prim.material.sigma_t
            albedo[inside] = prim.material.albedo
            overlap = np.where(hit,
                               np.clip(np.minimum(t1, ts_flat) - np.maximum(t0, th_flat),
                                       0.0, None), 0.0)
            tau_view += prim.material.sigma_t * overlap
        tau_light = _optical_depth(scene, flat, omega)
        integrand = (sigma_s * np.exp(-(tau_view + tau_light)))[:, None] * albedo
        contrib = integrand.reshape(len(hsel), N_QUADRATURE, 3).mean(axis=1) * sp[:, None]
        out[hsel] += contrib
    return out


# ---------------------------------------------------------------------------
# rig construction and dataset generation

def _look_at(position: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = target - position
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)
    return rot, -rot @ position


def _spiral_positions(count: int, distance: float, elev_lo: float, elev_hi: float,
                      az_offset: float) -> np.ndarray:
    golden = math.pi * (3.0 - math.sqrt(5.0))
    pos = np.zeros((count, 3))
    for i in range(count):
        f = i / max(count - 1, 1)
        elev = math.radians(elev_lo + f * (elev_hi - elev_lo))
        az = az_offset + i * golden
        pos[i] = distance * np.array([math.cos(elev) * math.cos(az),
                                      math.cos(elev) * math.sin(az),
                                      math.sin(elev)])
    return pos


def build_rig(image_size: int = 64, n_train_cams: int = 16, n_test_cams: int = 4,
              cam_distance: float = 10.0, scene_radius: float = 2.0,
              n_train_lights: int = 16, n_test_lights: int = 8,
              light_distance: float = 100.0, fill: float = 0.75) -> CaptureRig:
    """Desk-scale capture rig: a camera spiral over the upper hemisphere plus
    a train/test subsample of the 7 x 32 OLAT grid.

    Test lights cycle through the grid rows (lowest latitude first) with a
    stride over columns; the first test cameras sit at low elevation
    opposite the lowest test lights so back-lit (omega . view < -0.5)
    held-out pairs always exist.
    """
    focal = fill * (image_size / 2.0) * cam_distance / scene_radius
    K = np.array([[focal, 0.0, image_size / 2.0],
                  [0.0, focal, image_size / 2.0],
                  [0.0, 0.0, 1.0]])
    cameras = []
    for i, p in enumerate(_spiral_positions(n_train_cams, cam_distance, 12.0, 65.0, 0.0)):
        rot, t = _look_at(p, np.zeros(3))
        cameras.append(Camera(name=f"train{i}", K=K.copy(), R=rot, t=t,
                              width=image_size, height=image_size, split="train"))

    grid = olat_grid()
    n_lat = max(g.row for g in grid)
    n_lon = max(g.col for g in grid) + 1
    by_pos = {(g.row, g.col): g for g in grid}
    train_dirs = [g for g in grid if g.split == "train"]
    lights = []
    for i in np.linspace(0, len(train_dirs) - 1, n_train_lights).round().astype(int):
        lights.append(LightRecord(omega=train_dirs[i].direction, distance=light_distance,
                                  split="train"))
    test_picks = []
    for i in range(n_test_lights):
        row = n_lat - (i % n_lat)
        col = (1 + 2 * ((i * 5) % (n_lon // 2))) % n_lon  # odd columns are test
        test_picks.append(by_pos[(row, col)])
    for g in test_picks:
        lights.append(LightRecord(omega=g.direction, distance=light_distance, split="test"))

    def azimuth_deg(d):
        return math.degrees(math.atan2(d[1], d[0])) % 360.0

    test_elevs = [15.0, 40.0, 18.0, 55.0, 30.0, 50.0, 25.0, 60.0]
    test_azims = [azimuth_deg(test_picks[0].direction) + 180.0, 35.0,
                  azimuth_deg(test_picks[min(1, len(test_picks) - 1)].direction) + 180.0,
                  305.0, 75.0, 200.0, 160.0, 280.0]
    for i in range(n_test_cams):
        e = math.radians(test_elevs[i % len(test_elevs)])
        a = math.radians(test_azims[i % len(test_azims)])
        p = cam_distance * np.array([math.cos(e) * math.cos(a),
                                     math.cos(e) * math.sin(a), math.sin(e)])
        rot, t = _look_at(p, np.zeros(3))
        cameras.append(Camera(name=f"test{i}", K=K.copy(), R=rot, t=t,
                              width=image_size, height=image_size, split="test"))
    return CaptureRig(cameras=cameras, lights=lights, scene_radius=scene_radius)


def scene_bounds(scene: OracleScene) -> tuple[np.ndarray, float]:
    centers = np.stack([p.center for p in scene.primitives], axis=0)
    center = centers.mean(axis=0)
    radius = max(float(np.linalg.norm(p.center - center)) + p.bounding_radius()
                 for p in scene.primitives)
    return center, radius


def generate_dataset(scene: OracleScene, rig: CaptureRig, out_dir: str,
                     group: str = "000", verbose: bool = False) -> Manifest:
    """Render and persist a full OLAT dataset: train cameras see train
    lights, test cameras see test lights. Idempotent (no randomness)."""
    center, radius = scene_bounds(scene)
    if radius > rig.scene_radius * 1.5 + 1e-9:
        raise InvalidInputError(
            f"scene radius {radius:.2f} exceeds the rig's working volume")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    manifest = Manifest(scene=scene.name, bounding_center=center,
                        bounding_radius=max(radius, rig.scene_radius),
                        groups=[group])
    manifest.cameras[group] = rig.cameras
    manifest.lights[group] = rig.lights
    for ci, cam in enumerate(rig.cameras):
        mask_rel = f"masks/g{group}_c{ci}.pfm"
        mask_written = False
        for li, light in enumerate(rig.lights):
            if cam.split != light.split:
                continue
            img, mask = render_olat_gt(scene, cam,
                                       OlatLight(direction=light.omega,
                                                 distance=light.distance))
            rel = f"images/g{group}_c{ci}_l{li}.pfm"
            write_pfm(os.path.join(out_dir, rel), img.astype(np.float32))
            manifest.images[(group, ci, li)] = rel
            if not mask_written:
                write_pfm(os.path.join(out_dir, mask_rel), mask)
                manifest.masks[(group, ci)] = mask_rel
                mask_written = True
        if verbose:
            print(f"[generate] camera {cam.name} done")
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


# ---------------------------------------------------------------------------
# scene description files

def scene_to_dict(scene: OracleScene) -> dict:
    prims = []
    for p in scene.primitives:
        d = {"kind": p.kind, "center": p.center.tolist(),
             "material": {"albedo": p.material.albedo.tolist(),
                          "sigma_t": p.material.sigma_t,
                          "scatter_albedo": p.material.scatter_albedo,
                          "lambert": p.material.lambert}}
        if p.kind == "sphere":
            d["radius"] = float(p.size[0])
        else:
            d["half_extents"] = p.size.tolist()
        prims.append(d)
    return {"name": scene.name, "primitives": prims}


def scene_from_dict(d: dict) -> OracleScene:
    prims = []
    for pd in d["primitives"]:
        mat = Material(**pd["material"])
        size = pd["radius"] if pd["kind"] == "sphere" else pd["half_extents"]
        prims.append(Primitive(kind=pd["kind"], center=pd["center"], size=size, material=mat))
    if not prims:
        raise InvalidInputError("scene has no primitives")
    return OracleScene(name=d["name"], primitives=prims)


def load_scene(path: str) -> OracleScene:
    with open(path) as f:
        try:
            return scene_from_dict(json.load(f))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise InvalidInputError(f"{path}: invalid scene file ({e})") from e


def save_scene(scene: OracleScene, path: str) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, indent=2, sort_keys=True)
        f.write("\n")


def translucent_sphere_scene() -> OracleScene:
    """The overfit-benchmark scene: a single translucent sphere."""
    return OracleScene(name="translucent_sphere", primitives=[
        Primitive(kind="sphere", center=[0.0, 0.0, 0.0], size=1.6,
                  material=Material(albedo=[1.0, 0.75, 0.55], sigma_t=1.2,
                                    scatter_albedo=0.9, lambert=0.25)),
    ])


def embedded_drill_scene() -> OracleScene:
    """A translucent sphere with a dense box inside: its silhouette shows in
    back-lit renders once the outer extinction is low enough."""
    return OracleScene(name="embedded_drill", primitives=[
        Primitive(kind="sphere", center=[0.0, 0.0, 0.0], size=1.6,
                  material=Material(albedo=[1.0, 0.8, 0.6], sigma_t=0.8,
                                    scatter_albedo=0.9, lambert=0.2)),
        Primitive(kind="box", center=[0.0, 0.0, 0.0], size=[0.35, 0.35, 1.0],
                  material=Material(albedo=[0.3, 0.3, 0.35], sigma_t=6.0,
                                    scatter_albedo=0.2, lambert=0.3)),
    ])
