"""HDR image and manifest persistence, mask bands, and camera rays.

Directory layout:

    scene/manifest.json
    scene/images/g{G}_c{C}_l{L}.pfm
    scene/masks/g{G}_c{C}.pfm

The manifest groups cameras and lights the way the capture rig does:
a list of groups, per-group camera poses {K, R, t} and light records
{omega, distance}, image/mask paths, train/test split labels, the scene
bounding sphere and the HDR cutoff used to clamp training targets.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .render import Ray

MANIFEST_VERSION = 1

# region labels for MaskBands
BACKGROUND, FOREGROUND, SILHOUETTE, PADDED = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# PFM

def write_pfm(path: str, image: np.ndarray) -> None:
    """Portable FloatMap: 'PF' (color) or 'Pf' (grayscale), little endian,
    rows stored bottom-to-top."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
    elif image.ndim == 2:
        header = b"Pf"
    else:
        raise InvalidInputError(f"image must be (H, W, 3) or (H, W), got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise InvalidInputError("image contains non-finite values")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(image).astype("<f4").tobytes())


def read_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()

    def take_line(start: int) -> tuple[str, int]:
        end = blob.find(b"\n", start)
        if end < 0:
            raise InvalidInputError(f"{path}: truncated PFM header")
        return blob[start:end].decode("ascii", errors="replace"), end + 1

    kind, pos = take_line(0)
    if kind == "PF":
        channels = 3
    elif kind == "Pf":
        channels = 1
    else:
        raise InvalidInputError(f"{path}: not a PFM file (identifier {kind!r})")
    dims, pos = take_line(pos)
    parts = dims.split()
    if len(parts) != 2:
        raise InvalidInputError(f"{path}: malformed PFM dimensions line {dims!r}")
    try:
        w, h = int(parts[0]), int(parts[1])
    except ValueError as e:
        raise InvalidInputError(f"{path}: malformed PFM dimensions line {dims!r}") from e
    if w < 1 or h < 1:
        raise InvalidInputError(f"{path}: invalid PFM dimensions {w}x{h}")
    scale_line, pos = take_line(pos)
    try:
        scale = float(scale_line)
    except ValueError as e:
        raise InvalidInputError(f"{path}: malformed PFM scale line {scale_line!r}") from e
    count = w * h * channels
    payload = blob[pos:]
    if len(payload) < 4 * count:
        raise InvalidInputError(
            f"{path}: truncated PFM payload ({len(payload)} bytes, expected {4 * count})")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype, count=count)
    img = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    return np.flipud(img).astype(np.float32)


# ---------------------------------------------------------------------------
# cameras and rays

@dataclass
class Camera:
    """Pinhole camera: x_cam = R @ x_world + t, pixel = K @ x_cam (OpenCV
    convention, camera looks along +z)."""

    name: str
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    split: str = "train"

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)

    def validate(self) -> None:
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > 1e-5:
            raise InvalidInputError(f"camera {self.name}: rotation is not orthonormal")
        K = self.K
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0:
            raise InvalidInputError(f"camera {self.name}: intrinsics not upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] <= 0:
            raise InvalidInputError(f"camera {self.name}: focal entries must be positive")

    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def optical_axis(self) -> np.ndarray:
        return self.R.T @ np.array([0.0, 0.0, 1.0])


def backproject_dirs(camera: Camera, uv: np.ndarray) -> np.ndarray:
    """Unit world-space directions through continuous image coords (u, v).
    Coordinates may lie outside [0, W) x [0, H): padded background rays."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    ones = np.ones((uv.shape[0], 1))
    pix = np.concatenate([uv, ones], axis=1)
    cam_dirs = pix @ np.linalg.inv(camera.K).T
    world = cam_dirs @ camera.R  # R^T applied to each row
    return world / np.linalg.norm(world, axis=1, keepdims=True)


def make_ray(camera: Camera, u: float, v: float,
             near: float = 0.0, far: float = np.inf) -> Ray:
    """Ray through continuous image coordinates (u, v); integer pixel (i, j)
    has its center at (i + 0.5, j + 0.5)."""
    d = backproject_dirs(camera, np.array([[u, v]]))[0]
    return Ray(origin=camera.center(), direction=d, t_near=near, t_far=far, pixel_uv=(u, v))


def project(camera: Camera, points: np.ndarray) -> np.ndarray:
    """World points -> continuous pixel coordinates (u, v)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pts @ camera.R.T + camera.t
    pix = cam @ camera.K.T
    return pix[:, :2] / pix[:, 2:3]


def camera_ray_grid(camera: Camera, row0: int = 0, row1: Optional[int] = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for all pixel centers in rows [row0, row1)."""
    if row1 is None:
        row1 = camera.height
    cols = np.arange(camera.width) + 0.5
    rows = np.arange(row0, row1) + 0.5
    uu, vv = np.meshgrid(cols, rows)
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    dirs = backproject_dirs(camera, uv)
    origins = np.broadcast_to(camera.center(), dirs.shape).copy()
    return origins, dirs


# ---------------------------------------------------------------------------
# mask bands

@dataclass
class MaskBands:
    """Region labels over the padded pixel grid. labels[i, j] covers image
    pixel (i - pad_h, j - pad_w)."""

    labels: np.ndarray
    pad_h: int
    pad_w: int


def compute_mask_bands(mask: np.ndarray, radius: int, pad: float = 0.25) -> MaskBands:
    """Foreground / near-silhouette / background / padded labels.

    The near-silhouette band is dilation minus erosion of the mask with a
    Euclidean disc of the given radius (off-image counts as background for
    the erosion). `pad` extends the grid by that fraction of each dimension
    on every side; the extension is labeled PADDED.
    """
    if radius < 1:
        raise InvalidInputError("band radius must be >= 1")
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    # distance from each pixel to the mask (0 inside it)
    if mask.any():
        dist_to_fg = ndimage.distance_transform_edt(~mask)
    else:
        dist_to_fg = np.full(mask.shape, np.inf)
    # distance to the nearest non-mask pixel, treating off-image as non-mask
    padded_mask = np.pad(mask, 1, constant_values=False)
    dist_to_bg = ndimage.distance_transform_edt(padded_mask)[1:-1, 1:-1]
    dilated = dist_to_fg <= radius
    eroded = dist_to_bg > radius
    inner = np.full((h, w), BACKGROUND, dtype=np.uint8)
    inner[dilated] = SILHOUETTE
    inner[eroded] = FOREGROUND
    pad_h = int(round(pad * h))
    pad_w = int(round(pad * w))
    labels = np.full((h + 2 * pad_h, w + 2 * pad_w), PADDED, dtype=np.uint8)
    labels[pad_h:pad_h + h, pad_w:pad_w + w] = inner
    return MaskBands(labels=labels, pad_h=pad_h, pad_w=pad_w)


def default_band_radius(width: int) -> int:
    # 8 px at 2048-wide, scaled proportionally, at least 1 px
    return max(1, round(8 * width / 2048))


# ---------------------------------------------------------------------------
# manifest

@dataclass
class LightRecord:
    omega: np.ndarray
    distance: float
    split: str = "train"

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        n = np.linalg.norm(self.omega)
        if abs(n - 1.0) > 1e-6:
            raise InvalidInputError(f"light direction must be unit length, |w| = {n}")


@dataclass
class Manifest:
    scene: str
    bounding_center: np.ndarray
    bounding_radius: float
    hdr_cutoff: float = 4.4019
    groups: list = dc_field(default_factory=list)
    cameras: dict = dc_field(default_factory=dict)   # group -> [Camera]
    lights: dict = dc_field(default_factory=dict)    # group -> [LightRecord]
    images: dict = dc_field(default_factory=dict)    # (group, cam_idx, light_idx) -> relpath
    masks: dict = dc_field(default_factory=dict)     # (group, cam_idx) -> relpath

    def image_key(self, group: str, cam: int, light: int) -> str:
        return f"g{group}_c{cam}_l{light}"


def _mat(a: np.ndarray) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def manifest_to_dict(m: Manifest) -> dict:
    return {
        "format_version": MANIFEST_VERSION,
        "scene": m.scene,
        "hdr_cutoff": m.hdr_cutoff,
        "bounding_sphere": {"center": _mat(m.bounding_center), "radius": float(m.bounding_radius)},
        "groups": list(m.groups),
        "cameras": {
            g: [{"name": c.name, "K": _mat(c.K), "R": _mat(c.R), "t": _mat(c.t),
                 "width": c.width, "height": c.height, "split": c.split}
                for c in cams]
            for g, cams in m.cameras.items()},
        "lights": {
            g: [{"omega": _mat(l.omega), "distance": float(l.distance), "split": l.split}
                for l in lights]
            for g, lights in m.lights.items()},
        "images": {m.image_key(g, c, l): path for (g, c, l), path in sorted(m.images.items())},
        "masks": {f"g{g}_c{c}": path for (g, c), path in sorted(m.masks.items())},
    }


def manifest_from_dict(d: dict) -> Manifest:
    if d.get("format_version") != MANIFEST_VERSION:
        raise InvalidInputError(f"unsupported manifest version {d.get('format_version')}")
    m = Manifest(
        scene=d["scene"],
        bounding_center=np.asarray(d["bounding_sphere"]["center"], dtype=np.float64),
        bounding_radius=float(d["bounding_sphere"]["radius"]),
        hdr_cutoff=float(d["hdr_cutoff"]),
        groups=list(d["groups"]),
    )
    for g, cams in d["cameras"].items():
        m.cameras[g] = [Camera(name=c["name"], K=c["K"], R=c["R"], t=c["t"],
                               width=c["width"], height=c["height"], split=c["split"])
                        for c in cams]
    for g, lights in d["lights"].items():
        m.lights[g] = [LightRecord(omega=l["omega"], distance=l["distance"], split=l["split"])
                       for l in lights]
    for key, path in d["images"].items():
        g, c, l = _parse_image_key(key)
        m.images[(g, c, l)] = path
    for key, path in d["masks"].items():
        body = key[1:]
        g, c = body.rsplit("_c", 1)
        m.masks[(g, int(c))] = path
    return m


def _parse_image_key(key: str) -> tuple[str, int, int]:
    try:
        body = key[1:]  # strip leading 'g'
        g, rest = body.rsplit("_c", 1)
        c, l = rest.split("_l", 1)
        return g, int(c), int(l)
    except Exception as e:
        raise InvalidInputError(f"malformed image key {key!r}") from e


def save_manifest(m: Manifest, path: str) -> None:
    text = json.dumps(manifest_to_dict(m), indent=2, sort_keys=True)
    with open(path, "w") as f:
        f.write(text + "\n")


def load_manifest(path: str, check_files: bool = True) -> Manifest:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"{path}: invalid JSON ({e})") from e
    m = manifest_from_dict(d)
    root = os.path.dirname(os.path.abspath(path))
    for g, cams in m.cameras.items():
        for c in cams:
            c.validate()
    if check_files:
        for rel in list(m.images.values()) + list(m.masks.values()):
            full = os.path.join(root, rel)
            if not os.path.exists(full):
                raise InvalidInputError(f"manifest references missing file {rel}")
    return m


# ---------------------------------------------------------------------------
# the loaded dataset

@dataclass
class OlatEntry:
    group: str
    cam_idx: int
    light_idx: int
    camera: Camera
    omega: np.ndarray
    image: np.ndarray  # (H, W, 3) float32 HDR
    split: str         # "train" only if both the camera and the light are


class OlatDataset:
    """A manifest plus everything training needs in memory: HDR images,
    masks, precomputed region bands and per-region pixel pools."""

    def __init__(self, root: str, band_radius: Optional[int] = None, pad: float = 0.25):
        self.root = os.path.abspath(root)
        self.manifest = load_manifest(os.path.join(self.root, "manifest.json"))
        m = self.manifest
        self.masks: dict[tuple[str, int], np.ndarray] = {}
        self.bands: dict[tuple[str, int], MaskBands] = {}
        self.region_pixels: dict[tuple[str, int], dict[int, np.ndarray]] = {}
        for (g, c), rel in m.masks.items():
            mask = read_pfm(os.path.join(self.root, rel))
            mask = mask > 0.5
            self.masks[(g, c)] = mask
            radius = band_radius if band_radius is not None else default_band_radius(mask.shape[1])
            bands = compute_mask_bands(mask, radius=radius, pad=pad)
            self.bands[(g, c)] = bands
            pools = {}
            for label in (FOREGROUND, SILHOUETTE, BACKGROUND):
                rows, cols = np.nonzero(bands.labels == label)
                pools[label] = np.stack([rows - bands.pad_h, cols - bands.pad_w], axis=1)
            rows, cols = np.nonzero(bands.labels == PADDED)
            pools[PADDED] = np.stack([rows - bands.pad_h, cols - bands.pad_w], axis=1)
            # background draws include the padded off-image rays
            pools["bg_union"] = np.concatenate([pools[BACKGROUND], pools[PADDED]], axis=0)
            self.region_pixels[(g, c)] = pools

        self.entries: list[OlatEntry] = []
        for (g, c, l), rel in sorted(m.images.items()):
            cam = m.cameras[g][c]
            light = m.lights[g][l]
            split = "train" if (cam.split == "train" and light.split == "train") else "test"
            self.entries.append(OlatEntry(
                group=g, cam_idx=c, light_idx=l, camera=cam, omega=light.omega,
                image=read_pfm(os.path.join(self.root, rel)), split=split))
        self.train_ids = [i for i, e in enumerate(self.entries) if e.split == "train"]
        self.test_ids = [i for i, e in enumerate(self.entries) if e.split == "test"]
        if not self.entries:
            raise InvalidInputError("dataset contains no images")
        self._build_lookup_arrays()

    def _build_lookup_arrays(self) -> None:
        """Flat arrays for vectorized batch sampling. Requires uniform image
        sizes (true for any single capture rig)."""
        shapes = {e.image.shape for e in self.entries}
        if len(shapes) != 1:
            raise InvalidInputError(f"images must share one size, got {sorted(shapes)}")
        self.cam_keys = sorted(self.masks.keys())
        key_index = {k: i for i, k in enumerate(self.cam_keys)}
        self.cam_list = [self.manifest.cameras[g][c] for (g, c) in self.cam_keys]
        self.cam_centers = np.stack([cam.center() for cam in self.cam_list])
        bounds = np.array([self.near_far(cam) for cam in self.cam_list])
        self.cam_near = bounds[:, 0]
        self.cam_far = bounds[:, 1]
        self.entry_camkey = np.array(
            [key_index[(e.group, e.cam_idx)] for e in self.entries], dtype=np.int64)
        self.entry_omega = np.stack([e.omega for e in self.entries])
        self.image_stack = np.stack([e.image for e in self.entries])
        self.mask_stack = np.stack([self.masks[k] for k in self.cam_keys])
        # per-camera region pools as (count, 2) arrays plus a length table
        self.pool_labels = (FOREGROUND, SILHOUETTE, "bg_union")
        self.pools = {label: [self.region_pixels[k][label] for k in self.cam_keys]
                      for label in self.pool_labels}
        self.pool_lens = {label: np.array([p.shape[0] for p in self.pools[label]])
                          for label in self.pool_labels}

    def near_far(self, camera: Camera, pad_factor: float = 1.1) -> tuple[float, float]:
        """Per-camera sampling bounds from the padded bounding sphere."""
        m = self.manifest
        r = m.bounding_radius * pad_factor
        d = float(np.linalg.norm(camera.center() - m.bounding_center))
        near = max(d - r, 1e-3 * max(r, 1.0))
        return near, d + r
