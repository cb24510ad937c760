"""The sculpting network: conv encoder -> 2352-d latent -> five parallel MLPs -> heads.

Parameters live in a flat ``{name: Tensor}`` dict so the trainer, the
optimizer and the checkpoint code can treat them uniformly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from os import PathLike
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, InvalidArgumentError, ShapeError, VersionError
from .losses import SplatTensors
from .splat import (
    CanonicalCube,
    GaussianSplat,
    make_canonical_cube,
    principal_axis_rotation,
    quat_left_matrix,
)

INPUT_SIZE = 224
FEATURE_SIZE = 7
LATENT_CHANNELS = 48
LATENT_DIM = LATENT_CHANNELS * FEATURE_SIZE * FEATURE_SIZE  # 2352
HEADS = (("mu", 3), ("scale", 3), ("rot", 4), ("color", 3), ("opacity", 1))


@dataclass(frozen=True)
class ModelConfig:
    lattice_n: int = 16
    hidden: int = 512
    backbone: tuple[int, ...] = (64, 128, 256, 512, 512)
    compress_mid: int = 128
    eps_scale: float = 1e-4
    centering: str = "zero"
    cube_extent: float = 1.0
    base_cov: float = 0.0075
    cube_center: tuple[float, float, float] = (0.3, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backbone", tuple(int(c) for c in self.backbone))
        object.__setattr__(self, "cube_center", tuple(float(c) for c in self.cube_center))
        if len(self.backbone) != 5:
            raise InvalidArgumentError("backbone needs five stride-2 stages (224 -> 7)")
        if self.hidden < 1 or self.compress_mid < 1 or min(self.backbone) < 1:
            raise InvalidArgumentError("layer widths must be positive")
        if self.centering not in ("zero", "off"):
            raise InvalidArgumentError(f"centering must be 'zero' or 'off', got {self.centering!r}")

    @property
    def n_gaussians(self) -> int:
        return self.lattice_n**3

    @property
    def backbone_channels(self) -> int:
        return self.backbone[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = list(self.backbone)
        d["cube_center"] = list(self.cube_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class DeltaSplat(NamedTuple):
    """Raw decoder outputs, each (B, N, d)."""

    delta_mu: Tensor
    delta_scale: Tensor
    rot_raw: Tensor
    color_raw: Tensor
    opacity_raw: Tensor


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 3
    for i, cout in enumerate(cfg.backbone):
        shapes[f"enc.conv{i}.w"] = (3, 3, cin, cout)
        shapes[f"enc.conv{i}.b"] = (cout,)
        cin = cout
    shapes["enc.compress0.w"] = (3, 3, cin, cfg.compress_mid)
    shapes["enc.compress0.b"] = (cfg.compress_mid,)
    shapes["enc.compress1.w"] = (3, 3, cfg.compress_mid, LATENT_CHANNELS)
    shapes["enc.compress1.b"] = (LATENT_CHANNELS,)
    n = cfg.n_gaussians
    for head, d in HEADS:
        shapes[f"dec.{head}.fc1.w"] = (LATENT_DIM, cfg.hidden)
        shapes[f"dec.{head}.fc1.b"] = (cfg.hidden,)
        shapes[f"dec.{head}.fc2.w"] = (cfg.hidden, n * d)
        shapes[f"dec.{head}.fc2.b"] = (n * d,)
    return shapes


def init_params(seed: int, cfg: ModelConfig, dtype=np.float32) -> dict[str, Tensor]:
    """He-uniform weights, zero biases; last decoder layers start at zero.

    The rotation head's last bias is the identity quaternion so the initial
    prediction is exactly the canonical cube with unit rotations.
    """
    rng = np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, 0x696E6974]))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        elif ".fc2." in name:
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = math.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    rot_b = params["dec.rot.fc2.b"].data.reshape(-1, 4)
    rot_b[:, 0] = 1.0
    return params


def parameter_count(params: dict[str, Tensor], prefix: str = "") -> int:
    return sum(t.data.size for k, t in params.items() if k.startswith(prefix))


def decoder_path_param_count(latent: int, hidden: int, n: int, d: int) -> int:
    return latent * hidden + hidden + hidden * n * d + n * d


# ---------------------------------------------------------------------------
# network


def encode(params: dict[str, Tensor], images, cfg: ModelConfig) -> Tensor:
    """(B, 224, 224, 3) images in [0,1] -> (B, 2352) latent."""
    x = ad.as_tensor(images)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 3):
        raise ShapeError(f"encoder expects (B, {INPUT_SIZE}, {INPUT_SIZE}, 3) images, got {x.shape}")
    dtype = params["enc.conv0.w"].dtype
    h = Tensor((x.data - 0.5).astype(dtype)) if not x.requires_grad else ad.add(x, -0.5)
    for i in range(len(cfg.backbone)):
        h = ad.relu(ad.conv2d(h, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"], stride=2, pad=1))
    for j in range(2):
        h = ad.relu(ad.conv2d(h, params[f"enc.compress{j}.w"], params[f"enc.compress{j}.b"], stride=1, pad=1))
    if h.shape[1:] != (FEATURE_SIZE, FEATURE_SIZE, LATENT_CHANNELS):
        raise ShapeError(f"feature map has shape {h.shape[1:]}, expected (7, 7, 48)")
    return ad.reshape(h, (h.shape[0], LATENT_DIM))


def decode(params: dict[str, Tensor], latent, cfg: ModelConfig) -> DeltaSplat:
    z = ad.as_tensor(latent)
    if z.ndim == 1:
        z = ad.reshape(z, (1, z.shape[0]))
    if z.ndim != 2 or z.shape[1] != LATENT_DIM:
        raise ShapeError(f"decoder expects (B, {LATENT_DIM}) latents, got {z.shape}")
    n = cfg.n_gaussians
    outs = []
    for head, d in HEADS:
        h = ad.relu(ad.linear(z, params[f"dec.{head}.fc1.w"], params[f"dec.{head}.fc1.b"]))
        y = ad.linear(h, params[f"dec.{head}.fc2.w"], params[f"dec.{head}.fc2.b"])
        outs.append(ad.reshape(y, (z.shape[0], n, d)))
    return DeltaSplat(*outs)


def activate(raw: DeltaSplat, cube: CanonicalCube, eps_scale: float) -> list[SplatTensors]:
    """Heads: mu = base + d_mu; s = relu(base_s + d_s) + eps; r normalized; c, alpha sigmoid."""
    dtype = raw.delta_mu.dtype
    base_mu = cube.base_mu.astype(dtype)
    base_s = cube.base_scale.astype(dtype)
    mu = ad.add(raw.delta_mu, base_mu)
    s = ad.add(ad.relu(ad.add(raw.delta_scale, base_s)), dtype.type(eps_scale))
    r = ad.l2_normalize(raw.rot_raw, axis=-1)
    c = ad.sigmoid(raw.color_raw)
    a = ad.sigmoid(raw.opacity_raw)
    out = []
    for b in range(mu.shape[0]):
        out.append(SplatTensors(mu[b], s[b], r[b], c[b], a[b]))
    return out


def activate_heads(raw: DeltaSplat, cube: CanonicalCube, eps_scale: float = 1e-4) -> GaussianSplat:
    """Single-sample convenience returning a validated splat."""
    return activate(raw, cube, eps_scale)[0].to_splat()


class GSNModel:
    """Parameters, config and canonical cube bundled together."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg.seed, cfg, dtype)
        self.cube = make_canonical_cube(cfg.lattice_n, cfg.cube_extent, cfg.base_cov, cfg.centering,
                                        center=cfg.cube_center if cfg.centering == "off" else None)

    @property
    def n_gaussians(self) -> int:
        return self.cfg.n_gaussians

    @property
    def dtype(self):
        return self.params["enc.conv0.w"].dtype

    def astype(self, dtype) -> GSNModel:
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return GSNModel(self.cfg, params)

    def prepare(self, images) -> np.ndarray:
        from .data import resize_bilinear

        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ShapeError(f"expected (B, H, W, 3) images, got {images.shape}")
        if images.shape[1:3] != (INPUT_SIZE, INPUT_SIZE):
            images = np.stack([resize_bilinear(im, INPUT_SIZE, INPUT_SIZE) for im in images])
        return images.astype(self.dtype)

    def encode(self, images, params=None) -> Tensor:
        return encode(params or self.params, self.prepare(images), self.cfg)

    def decode(self, latent, params=None) -> DeltaSplat:
        return decode(params or self.params, latent, self.cfg)

    def forward_batch(self, images, params=None) -> list[SplatTensors]:
        params = params or self.params
        z = encode(params, self.prepare(images), self.cfg)
        return activate(decode(params, z, self.cfg), self.cube, self.cfg.eps_scale)

    def forward(self, image) -> GaussianSplat:
        """F(I): one image (H, W, 3) -> predicted splat."""
        return self.forward_batch(np.asarray(image)[None])[0].to_splat()

    __call__ = forward

    def rotate_splat_tensors(self, S: SplatTensors, cam, theta) -> SplatTensors:
        """Differentiable counterpart of rotate_splat_about_principal_axis."""
        A, q = principal_axis_rotation(cam, theta)
        dtype = S.mu.dtype
        p = cam.position.astype(dtype)
        mu = ad.add(ad.matmul(ad.add(S.mu, -p), Tensor(A.T.astype(dtype))), p)
        rot = ad.matmul(S.rot, Tensor(quat_left_matrix(q).T.astype(dtype)))
        return SplatTensors(mu, S.scale, rot, S.color, S.opacity)


def forward(model: GSNModel, image) -> GaussianSplat:
    return model.forward(image)


# ---------------------------------------------------------------------------
# checkpoint files

CKPT_MAGIC = b"GSNC"
CKPT_VERSION = 1
_CFG = struct.Struct("<IIIIIQ")


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos, path=self.path)
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def _unpack_tensors(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<I", "name length")
        name = r.take(ln, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    return tensors


def checkpoint_bytes(model: GSNModel, extra_tensors: dict[str, np.ndarray] | None = None,
                     state: dict | None = None) -> bytes:
    cfg = model.cfg
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts = [
        CKPT_MAGIC,
        struct.pack("<I", CKPT_VERSION),
        _CFG.pack(cfg.n_gaussians, cfg.hidden, cfg.backbone_channels, cfg.lattice_n,
                  0 if cfg.centering == "zero" else 1, cfg.seed & 0xFFFFFFFFFFFFFFFF),
        struct.pack("<I", len(cfg_json)),
        cfg_json,
    ]
    tensors = {k: v.data for k, v in model.params.items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    parts.append(_pack_tensors(tensors))
    if state is None:
        parts.append(struct.pack("<I", 0))
    else:
        sj = json.dumps(state, sort_keys=True).encode("utf-8")
        parts.append(struct.pack("<II", 1, len(sj)))
        parts.append(sj)
    return b"".join(parts)


def save_checkpoint(path: str | PathLike, model: GSNModel, extra_tensors=None, state=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra_tensors, state))


def load_checkpoint_full(path: str | PathLike):
    """Returns (model, extra_tensors, state) where state is None for model-only files."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0, path=path)
    (version,) = r.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", offset=4, path=path)
    n, hidden, cb, lattice_n, centering, seed = r.unpack(_CFG.format, "config block")
    (ln,) = r.unpack("<I", "config json length")
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(ln, "config json").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config block: {exc}", offset=r.pos, path=path) from exc
    if (cfg.n_gaussians, cfg.hidden, cfg.backbone_channels, cfg.lattice_n, cfg.seed) != (n, hidden, cb, lattice_n, seed):
        raise FormatError("config block disagrees with its json copy", offset=8, path=path)
    tensors = _unpack_tensors(r)
    (has_state,) = r.unpack("<I", "state flag")
    state = None
    if has_state:
        (sl,) = r.unpack("<I", "state length")
        state = json.loads(r.take(sl, "state json").decode("utf-8"))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", offset=r.pos, path=path)
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise FormatError(f"missing tensor {name}", path=path)
        if tensors[name].shape != shape:
            raise FormatError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}", path=path)
        params[name] = Tensor(tensors.pop(name), requires_grad=True, name=name)
    return GSNModel(cfg, params), tensors, state


def load_checkpoint(path: str | PathLike) -> GSNModel:
    return load_checkpoint_full(path)[0]
