"""Synthetic splat objects, camera rigs, on-disk datasets and image operators."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import CameraError, FormatError, InvalidArgumentError, MissingFileError, ShapeError, VersionError
from .splat import Camera, GaussianSplat, SO2Rotation, splat_read, splat_write

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
OBJECT_BOUND = 0.4
CUBE_CIRCUMRADIUS = math.sqrt(3) / 2
DEFAULT_RADIUS = 1.3
DEFAULT_FOV = 60.0
DEFAULT_BG = (1.0, 1.0, 1.0)


# ---------------------------------------------------------------------------
# images


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize [0,1] floats to 8 bits, rounding half to even."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: str | PathLike, img: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_image(path: str | PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"image file not found: {path}")
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - f
    m[np.arange(n_out), i1] += f
    return m


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (no antialiasing)."""
    img = np.asarray(img)
    if img.shape[:2] == (height, width):
        return img.copy()
    ry = _interp_matrix(height, img.shape[0])
    rx = _interp_matrix(width, img.shape[1])
    x = img.astype(np.float64)
    c = x.shape[2]
    tmp = (ry @ x.reshape(x.shape[0], -1)).reshape(height, x.shape[1], c)
    out = np.einsum("pw,owc->opc", rx, tmp, optimize=True)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def rotate_image(img: np.ndarray, theta, bg=DEFAULT_BG) -> np.ndarray:
    """Rotate content about the image center by ``theta``.

    A point at offset (du, dv) from the center moves to R(theta) (du, dv) in
    (column, row) coordinates, i.e. clockwise on screen for positive angles.
    Multiples of 90 degrees are exact pixel permutations; other angles use
    bilinear sampling with ``bg`` outside the source.
    """
    theta = theta if isinstance(theta, SO2Rotation) else SO2Rotation(float(theta))
    img = np.asarray(img)
    h, w = img.shape[:2]
    k = theta.quarter_turns
    if k is not None:
        if h != w and k % 2 == 1:
            raise InvalidArgumentError("90/270 degree rotation of a non-square image changes its aspect")
        # out[v', u'] with (u'-c, v'-c) = R(k*90)(u-c, v-c): one quarter turn maps
        # (du, dv) -> (-dv, du), which is np.rot90 with k=-1 on a (row, col) array.
        return np.rot90(img, k=-k, axes=(0, 1)).copy()
    if h != w:
        raise InvalidArgumentError("continuous rotation requires a square image")
    c, s = math.cos(theta.angle), math.sin(theta.angle)
    ctr = (w - 1) / 2.0
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    du, dv = uu - ctr, vv - ctr
    # inverse map: source = R(-theta) (target offset)
    su = c * du + s * dv + ctr
    sv = -s * du + c * dv + ctr
    u0 = np.floor(su).astype(int)
    v0 = np.floor(sv).astype(int)
    fu = su - u0
    fv = sv - v0
    bg = np.asarray(bg, dtype=np.float64)
    out = np.zeros(img.shape, dtype=np.float64)
    for dv_i, wv in ((0, 1 - fv), (1, fv)):
        for du_i, wu in ((0, 1 - fu), (1, fu)):
            ui = u0 + du_i
            vi = v0 + dv_i
            inside = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
            vals = np.where(inside[..., None], img[np.clip(vi, 0, h - 1), np.clip(ui, 0, w - 1)], bg)
            out += (wu * wv)[..., None] * vals
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------------------
# procedural objects


@dataclass(frozen=True)
class SyntheticObjectSpec:
    seed: int
    parts: tuple[int, int] = (3, 8)
    gaussians_per_part: int = 40
    palette: tuple[tuple[float, float, float], ...] | None = None
    bound: float = OBJECT_BOUND


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def generate_object(spec: SyntheticObjectSpec) -> GaussianSplat:
    """Union of randomly posed ellipsoid clusters inside [-bound, bound]^3."""
    from .splat import quat_multiply, quat_to_rotmat

    rng = np.random.default_rng([int(spec.seed), 0x6F626A])
    lo, hi = spec.parts
    n_parts = int(rng.integers(lo, hi + 1))
    mus, scales, rots, colors, opac = [], [], [], [], []
    b = spec.bound
    for p in range(n_parts):
        radii = rng.uniform(0.06, 0.2, size=3)
        center = rng.uniform(-b + radii.max(), b - radii.max(), size=3)
        q_part = _random_rotation(rng)
        Rp = quat_to_rotmat(q_part)
        m = spec.gaussians_per_part
        # uniform samples inside the unit ball, stretched to the ellipsoid
        d = rng.normal(size=(m, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d *= rng.uniform(0, 1, size=(m, 1)) ** (1 / 3)
        local = d * radii
        pts = center + local @ Rp.T
        spacing = (np.prod(radii) / m) ** (1 / 3)
        s = spacing * rng.uniform(0.5, 1.0, size=(m, 3))
        qs = quat_multiply(q_part[None], np.array([_random_rotation(rng) for _ in range(m)]))
        if spec.palette:
            base = np.asarray(spec.palette[p % len(spec.palette)], dtype=np.float64)
        else:
            base = rng.uniform(0.05, 0.95, size=3)
        col = np.clip(base + rng.normal(scale=0.03, size=(m, 3)), 0, 1)
        mus.append(np.clip(pts, -b, b))
        scales.append(s)
        rots.append(qs)
        colors.append(col)
        opac.append(rng.uniform(0.6, 1.0, size=m))
    return GaussianSplat(np.concatenate(mus), np.concatenate(scales), np.concatenate(rots),
                         np.concatenate(colors), np.concatenate(opac))


# ---------------------------------------------------------------------------
# cameras


def camera_at(azimuth: float, elevation: float, radius: float = DEFAULT_RADIUS, resolution: int = 128,
              fov_deg: float = DEFAULT_FOV) -> Camera:
    """Look-at camera on a sphere; angles in radians, world up is +z."""
    pos = radius * np.array([math.cos(elevation) * math.cos(azimuth),
                             math.cos(elevation) * math.sin(azimuth),
                             math.sin(elevation)])
    return Camera.look_at(pos, width=resolution, height=resolution, fov_deg=fov_deg)


def input_camera(radius: float = DEFAULT_RADIUS, resolution: int = 128, fov_deg: float = DEFAULT_FOV) -> Camera:
    """The fixed pose every object is observed from (azimuth 0, elevation 0)."""
    return camera_at(0.0, 0.0, radius, resolution, fov_deg)


def sample_cameras(k: int, radius: float = DEFAULT_RADIUS, seed: int = 0, mode: str = "uniform-sphere",
                   resolution: int = 128, fov_deg: float = DEFAULT_FOV, elevation: float = 0.0,
                   include_input: bool = False) -> list[Camera]:
    """k look-at cameras aimed at the origin.

    ``ring`` spaces azimuths evenly starting at 0 at the given elevation;
    ``uniform-sphere`` draws directions uniformly (first one is the input
    camera when ``include_input`` is set).
    """
    if k < 2:
        raise InvalidArgumentError(f"need at least 2 cameras, got {k}")
    if not radius > CUBE_CIRCUMRADIUS:
        raise InvalidArgumentError(f"radius {radius} must exceed the cube circumradius {CUBE_CIRCUMRADIUS:.4f}")
    if mode == "ring":
        return [camera_at(2 * math.pi * i / k, elevation, radius, resolution, fov_deg) for i in range(k)]
    if mode != "uniform-sphere":
        raise InvalidArgumentError(f"unknown camera mode {mode!r}")
    rng = np.random.default_rng([int(seed), 0x63616D])
    cams = [input_camera(radius, resolution, fov_deg)] if include_input else []
    while len(cams) < k:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if abs(d[2]) > 0.995:
            continue
        cams.append(camera_at(math.atan2(d[1], d[0]), math.asin(d[2]), radius, resolution, fov_deg))
    return cams


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ViewRecord:
    image_path: str
    camera: Camera


@dataclass
class ObjectRecord:
    splat_path: str
    views: list[ViewRecord]


@dataclass
class DatasetManifest:
    version: int
    seed: int
    n_objects: int
    k: int
    resolution: int
    objects: list[ObjectRecord]
    bg: tuple[float, float, float] = DEFAULT_BG

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "n_objects": self.n_objects,
            "k": self.k,
            "resolution": self.resolution,
            "bg": list(self.bg),
            "objects": [
                {"splat_path": o.splat_path,
                 "views": [{"image_path": v.image_path, "camera": v.camera.to_dict()} for v in o.views]}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, path=None) -> DatasetManifest:
        try:
            version = int(d["version"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError("manifest has no valid version", path=path) from exc
        if version != MANIFEST_VERSION:
            raise VersionError(f"manifest version {version} is not supported (expected {MANIFEST_VERSION})", path=path)
        try:
            objects = []
            for i, o in enumerate(d["objects"]):
                views = []
                for j, v in enumerate(o["views"]):
                    try:
                        cam = Camera.from_dict(v["camera"])
                    except (InvalidArgumentError, TypeError, ValueError) as exc:
                        raise CameraError(f"object {i} view {j}: invalid camera: {exc}", path=path) from exc
                    views.append(ViewRecord(v["image_path"], cam))
                objects.append(ObjectRecord(o["splat_path"], views))
            return cls(version, int(d["seed"]), int(d["n_objects"]), int(d["k"]), int(d["resolution"]),
                       objects, tuple(d.get("bg", DEFAULT_BG)))
        except KeyError as exc:
            raise FormatError(f"manifest missing field {exc}", path=path) from exc


def build_dataset(out_dir: str | PathLike, n_objects: int = 3, k: int = 8, resolution: int = 128, seed: int = 0,
                  radius: float = DEFAULT_RADIUS, bg=DEFAULT_BG, gaussians_per_part: int = 40) -> DatasetManifest:
    """Generate objects, render k views each with the oracle renderer, write manifest.json."""
    from .render import render_reference

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    objects = []
    for i in range(n_objects):
        obj_seed = seed * 100_003 + i
        S = generate_object(SyntheticObjectSpec(seed=obj_seed, gaussians_per_part=gaussians_per_part))
        splat_rel = f"obj_{i:04d}/splat.gspl"
        (out / f"obj_{i:04d}").mkdir(exist_ok=True)
        splat_write(S, out / splat_rel)
        # render from the stored (f32) splat so images are reproducible from the file
        S = splat_read(out / splat_rel)
        cams = sample_cameras(k, radius, obj_seed, "uniform-sphere", resolution, include_input=True)
        views = []
        for j, cam in enumerate(cams):
            rel = f"obj_{i:04d}/view_{j:03d}.png"
            save_image(out / rel, render_reference(S, cam, bg))
            views.append(ViewRecord(rel, cam))
        objects.append(ObjectRecord(splat_rel, views))
    manifest = DatasetManifest(MANIFEST_VERSION, seed, n_objects, k, resolution, objects, tuple(bg))
    (out / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    return manifest


@dataclass
class DatasetObject:
    splat: GaussianSplat
    images: list[np.ndarray]
    cameras: list[Camera]


@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    objects: list[DatasetObject] = field(default_factory=list)

    @property
    def bg(self) -> tuple[float, float, float]:
        return self.manifest.bg

    def __len__(self) -> int:
        return len(self.objects)


def read_manifest(root: str | PathLike) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg} at line {exc.lineno}", path=path) from exc
    return DatasetManifest.from_dict(d, path=path)


def load_dataset(root: str | PathLike) -> Dataset:
    """Eagerly load and validate every referenced splat, image and camera."""
    root = Path(root)
    manifest = read_manifest(root)
    objects = []
    for o in manifest.objects:
        sp = root / o.splat_path
        if not sp.exists():
            raise MissingFileError(f"splat file not found: {sp}")
        images = []
        for v in o.views:
            ip = root / v.image_path
            if not ip.exists():
                raise MissingFileError(f"image file not found: {ip}")
            img = load_image(ip)
            if img.shape[:2] != (v.camera.height, v.camera.width):
                raise FormatError(f"image {ip} is {img.shape[:2]}, camera expects {(v.camera.height, v.camera.width)}")
            images.append(img)
        objects.append(DatasetObject(splat_read(sp), images, [v.camera for v in o.views]))
    return Dataset(root, manifest, objects)


def verify_dataset(dataset: Dataset, tol: float = 1.0 / 255) -> float:
    """Re-render every stored view from its splat file; return the worst pixel error.

    Raises FormatError when any view differs from the oracle by more than ``tol``.
    """
    from .render import render_reference

    worst = 0.0
    for i, o in enumerate(dataset.objects):
        for j, (img, cam) in enumerate(zip(o.images, o.cameras)):
            err = float(np.abs(render_reference(o.splat, cam, dataset.bg) - img).max())
            worst = max(worst, err)
            if err > tol:
                raise FormatError(f"object {i} view {j} differs from its re-render by {err:.4g} > {tol:.4g}",
                                  path=dataset.root / dataset.manifest.objects[i].views[j].image_path)
    return worst
