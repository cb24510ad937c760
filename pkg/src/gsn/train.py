"""Training loop: image reconstruction plus the rotation-equivariance term, Adam, checkpoints, CSV log."""

from __future__ import annotations

import csv
import json
import math
import re
import time
from dataclasses import asdict, dataclass, field, fields, replace
from os import PathLike
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from ._accel import USE_NUMBA, njit, set_threads
from .data import Dataset, load_dataset, rotate_image
from .errors import ConfigError, InvalidArgumentError, NonFiniteLossError, ShapeError
from .metrics import equivariance_ecd, psnr, ssim_metric
from .model import GSNModel, ModelConfig, load_checkpoint_full, save_checkpoint
from .render import render, render_tensor
from .splat import SO2Rotation

EQUIVARIANCE_MODES = ("off", "continuous", "discrete")
LOG_NAME = "train_log.csv"
LOG_FIELDS = ("step", "kind", "total", "l2", "dssim", "l_rot", "wall_s",
              "psnr_sup", "ssim_sup", "psnr_holdout", "ssim_holdout", "ecd")
CKPT_RE = re.compile(r"ckpt_(\d+)\.gsnc$")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "run"
    steps: int = 100
    batch_size: int = 8
    k_sup: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    loss: losses.LossWeights = field(default_factory=losses.LossWeights)
    equivariance: str = "continuous"
    discrete_angles_deg: tuple[float, ...] = (90.0, 180.0, 270.0)
    holdout_views: tuple[int, ...] = ()
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    final_eval: bool = True
    threads: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = _from_dict_strict(losses.LossWeights, self.loss, "loss")
        if isinstance(self.model, dict):
            self.model = _from_dict_strict(ModelConfig, self.model, "model")
        self.discrete_angles_deg = tuple(float(a) for a in self.discrete_angles_deg)
        self.holdout_views = tuple(int(v) for v in self.holdout_views)
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.k_sup < 1:
            raise ConfigError(f"k_sup must be >= 1, got {self.k_sup}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps_opt > 0):
            raise ConfigError("optimizer moments need 0 <= beta < 1 and eps_opt > 0")
        if self.equivariance not in EQUIVARIANCE_MODES:
            raise ConfigError(f"equivariance must be one of {EQUIVARIANCE_MODES}, got {self.equivariance!r}")
        if self.equivariance == "discrete" and not self.discrete_angles_deg:
            raise ConfigError("discrete equivariance needs at least one angle")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ConfigError("checkpoint_every and eval_every must be >= 0")

    @property
    def equivariance_on(self) -> bool:
        return self.equivariance != "off" and self.loss.rot > 0

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["loss"] = asdict(self.loss)
        d["model"] = self.model.to_dict()
        d["discrete_angles_deg"] = list(self.discrete_angles_deg)
        d["holdout_views"] = list(self.holdout_views)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return _from_dict_strict(cls, d, "")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _from_dict_strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    names = {f.name for f in fields(cls)}
    for k in d:
        if k not in names:
            raise ConfigError(f"unknown config key {(where + '.' if where else '') + k!r}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError, InvalidArgumentError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def load_train_config(path: str | PathLike) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return TrainConfig.from_dict(d)


# ---------------------------------------------------------------------------
# optimizer


@njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (math.sqrt(vi / bc2) + eps)


def _adam_numpy(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    g = g.astype(np.float64)
    mi = b1 * m.astype(np.float64) + (1.0 - b1) * g
    vi = b2 * v.astype(np.float64) + (1.0 - b2) * g * g
    m[:] = mi
    v[:] = vi
    p[:] = p.astype(np.float64) - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": a for k, a in self.m.items()}
        out.update({f"adam.v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, t: int, tensors: dict[str, np.ndarray]) -> AdamState:
        m = {k[len("adam.m/"):]: np.array(a) for k, a in tensors.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/"):]: np.array(a) for k, a in tensors.items() if k.startswith("adam.v/")}
        return cls(t, m, v)


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                use_numba: bool | None = None) -> AdamState:
    """One bias-corrected Adam step, in place on ``params`` and the moments in ``state``.

    Arithmetic is float64 per element; storage keeps the parameter dtype.
    A missing gradient counts as zero.
    """
    use_numba = USE_NUMBA if use_numba is None else use_numba
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    kernel = _adam_kernel if use_numba else _adam_numpy
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        if not p.flags.c_contiguous:
            raise InvalidArgumentError(f"parameter {name} must be C-contiguous")
        kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
               state.m[name].reshape(-1), state.v[name].reshape(-1),
               float(lr), float(beta1), float(beta2), float(eps), bc1, bc2)
    return state


# ---------------------------------------------------------------------------
# RNG streams


STREAMS = {"data": 0x64617461, "theta": 0x74686574}


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    return {name: np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, tag]))
            for name, tag in STREAMS.items()}


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [int(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, np.integer):
        return int(x)
    return x


def streams_state(streams: dict[str, np.random.Generator]) -> dict:
    return {k: _jsonable(g.bit_generator.state) for k, g in streams.items()}


def restore_streams(state: dict) -> dict[str, np.random.Generator]:
    out = {}
    for k, st in state.items():
        bg = np.random.Philox()
        st = dict(st)
        st["state"] = {kk: np.array(vv, dtype=np.uint64) for kk, vv in st["state"].items()}
        st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
        bg.state = st
        out[k] = np.random.Generator(bg)
    return out


# ---------------------------------------------------------------------------
# steps


@dataclass
class Sample:
    object_id: int
    image: np.ndarray
    input_camera: object
    targets: list[np.ndarray]
    cameras: list


def supervision_pool(n_views: int, holdout: Sequence[int]) -> list[int]:
    pool = [j for j in range(n_views) if j not in set(holdout)]
    if not pool:
        raise ConfigError("every view is held out; nothing to supervise with")
    return pool


def draw_batch(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> list[Sample]:
    n = len(dataset.objects)
    ids = rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
    batch = []
    for i in ids:
        obj = dataset.objects[int(i)]
        pool = supervision_pool(len(obj.images), cfg.holdout_views)
        k = min(cfg.k_sup, len(pool))
        views = sorted(int(pool[j]) for j in rng.choice(len(pool), size=k, replace=False))
        batch.append(Sample(int(i), obj.images[0], obj.cameras[0],
                            [obj.images[j] for j in views], [obj.cameras[j] for j in views]))
    return batch


def draw_angle(cfg: TrainConfig, rng: np.random.Generator) -> SO2Rotation:
    if cfg.equivariance == "discrete":
        return SO2Rotation.from_degrees(cfg.discrete_angles_deg[int(rng.integers(len(cfg.discrete_angles_deg)))])
    return SO2Rotation(float(rng.uniform(0.0, 2.0 * math.pi)))


@dataclass
class StepResult:
    total: float
    l2: float
    dssim: float
    l_rot: float
    grads: dict[str, np.ndarray | None]


def compute_loss(model: GSNModel, batch: Sequence[Sample], cfg: TrainConfig, angles: Sequence[SO2Rotation] | None,
                 bg) -> tuple[ad.Tensor, dict]:
    """Total objective averaged over the batch, plus per-term float breakdown."""
    w = cfg.loss
    B = len(batch)
    images = [s.image for s in batch]
    if angles is not None:
        images += [rotate_image(s.image, th, bg) for s, th in zip(batch, angles)]
    outs = model.forward_batch(np.stack(images))
    total = None
    l2_sum = dssim_sum = rot_sum = 0.0
    for b, s in enumerate(batch):
        S = outs[b]
        rendered = [render_tensor(S.mu, S.scale, S.rot, S.color, S.opacity, cam, bg) for cam in s.cameras]
        li = losses.image_loss(rendered, s.targets, w)
        for r, t in zip(rendered, s.targets):
            l2_sum += float(np.mean((r.data.astype(np.float64) - t) ** 2)) / len(rendered)
            if w.dssim:
                dssim_sum += 0.5 * (1.0 - losses.ssim(r.data, t)) / len(rendered)
        if angles is not None:
            lhs = model.rotate_splat_tensors(S, s.input_camera, angles[b])
            lr_ = losses.ecd(lhs, outs[B + b], w)
            rot_sum += float(lr_.data)
            li = ad.add(li, ad.scale(lr_, w.rot))
        total = li if total is None else ad.add(total, li)
    total = ad.scale(total, 1.0 / B)
    return total, {"l2": l2_sum / B, "dssim": dssim_sum / B, "l_rot": rot_sum / B}


def train_step(model: GSNModel, adam: AdamState, batch: Sequence[Sample], cfg: TrainConfig,
               theta_rng: np.random.Generator, bg=(1.0, 1.0, 1.0), step: int = 0) -> StepResult:
    """Forward, backward and one Adam update on all parameters."""
    angles = [draw_angle(cfg, theta_rng) for _ in batch] if cfg.equivariance_on else None
    for t in model.params.values():
        t.zero_grad()
    loss, parts = compute_loss(model, batch, cfg, angles, bg)
    value = float(loss.data)
    if not math.isfinite(value) or not all(math.isfinite(v) for v in parts.values()):
        raise NonFiniteLossError(
            f"non-finite loss at step {step}",
            {"step": step, "object_ids": [s.object_id for s in batch], "total": value, **parts},
        )
    ad.backward(loss)
    grads = {k: t.grad for k, t in model.params.items()}
    adam_update({k: t.data for k, t in model.params.items()}, grads, adam, cfg.lr, cfg.beta1, cfg.beta2,
                cfg.eps_opt)
    return StepResult(value, parts["l2"], parts["dssim"], parts["l_rot"], grads)


# ---------------------------------------------------------------------------
# evaluation during training


def evaluate_fit(model: GSNModel, dataset: Dataset, holdout: Sequence[int], with_ecd: bool = True) -> dict:
    """Mean PSNR/SSIM over supervision and held-out views, and the equivariance ECD."""
    bg = dataset.bg
    sup_p, sup_s, ho_p, ho_s, ecds = [], [], [], [], []
    for obj in dataset.objects:
        S = model.forward(obj.images[0])
        for j, (img, cam) in enumerate(zip(obj.images, obj.cameras)):
            pred = render(S, cam, bg)
            if j in set(holdout):
                ho_p.append(psnr(pred, img))
                ho_s.append(ssim_metric(pred, img))
            else:
                sup_p.append(psnr(pred, img))
                sup_s.append(ssim_metric(pred, img))
        if with_ecd:
            ecds.append(equivariance_ecd(model, [obj.images[0]], obj.cameras[0], bg=bg))
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")  # noqa: E731
    return {"psnr_sup": mean(sup_p), "ssim_sup": mean(sup_s), "psnr_holdout": mean(ho_p),
            "ssim_holdout": mean(ho_s), "ecd": mean(ecds)}


# ---------------------------------------------------------------------------
# run management


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt_{step:06d}.gsnc"


def latest_checkpoint(out_dir: str | PathLike) -> Path | None:
    out_dir = Path(out_dir)
    if not out_dir.exists():
        return None
    found = [(int(m.group(1)), p) for p in out_dir.iterdir() if (m := CKPT_RE.search(p.name))]
    return max(found)[1] if found else None


def _write_checkpoint(path: Path, model: GSNModel, adam: AdamState, streams, step: int, cfg: TrainConfig) -> None:
    state = {"step": step, "adam_t": adam.t, "rng": streams_state(streams), "train_config": cfg.to_dict()}
    save_checkpoint(path, model, adam.tensors(), state)


class TrainLog:
    """Append-only CSV of per-step losses and periodic evaluation rows."""

    def __init__(self, path: Path, resume: bool):
        self.path = path
        fresh = not (resume and path.exists())
        if fresh:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)
        self.rows: list[dict] = []

    def append(self, row: dict) -> None:
        full = {k: row.get(k, "") for k in LOG_FIELDS}
        self.rows.append(full)
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([repr(v) if isinstance(v, float) else v for v in full.values()])


def read_log(path: str | PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    model: GSNModel
    step: int
    log: TrainLog
    final_eval: dict | None
    checkpoint: Path


def train(cfg: TrainConfig, resume: bool = False, dataset: Dataset | None = None,
          progress=None, max_steps_this_call: int | None = None) -> TrainResult:
    """Run (or resume) training to ``cfg.steps``; writes checkpoints, the CSV log and a final eval."""
    if cfg.threads:
        set_threads(cfg.threads)
    losses.check_loss_config(cfg.loss)
    dataset = dataset or load_dataset(cfg.dataset)
    if len(dataset) == 0:
        raise ConfigError("dataset has no objects")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bg = dataset.bg

    ck = latest_checkpoint(out) if resume else None
    if ck is not None:
        model, extra, state = load_checkpoint_full(ck)
        if state is None:
            raise ConfigError(f"{ck} has no trainer state; cannot resume")
        step = int(state["step"])
        adam = AdamState.from_tensors(int(state["adam_t"]), extra)
        streams = restore_streams(state["rng"])
    else:
        model = GSNModel(cfg.model)
        step = 0
        adam = AdamState()
        streams = make_streams(cfg.seed)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    log = TrainLog(out / LOG_NAME, resume=ck is not None)

    stop = cfg.steps if max_steps_this_call is None else min(cfg.steps, step + max_steps_this_call)
    t0 = time.perf_counter()
    last_ckpt = ck
    while step < stop:
        batch = draw_batch(dataset, cfg, streams["data"])
        res = train_step(model, adam, batch, cfg, streams["theta"], bg, step)
        step += 1
        log.append({"step": step, "kind": "train", "total": res.total, "l2": res.l2, "dssim": res.dssim,
                    "l_rot": res.l_rot, "wall_s": time.perf_counter() - t0})
        if progress is not None:
            progress(step, res)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            last_ckpt = checkpoint_path(out, step)
            _write_checkpoint(last_ckpt, model, adam, streams, step, cfg)
        if cfg.eval_every and step % cfg.eval_every == 0 and step < cfg.steps:
            ev = evaluate_fit(model, dataset, cfg.holdout_views, with_ecd=True)
            log.append({"step": step, "kind": "eval", "wall_s": time.perf_counter() - t0, **ev})

    if last_ckpt is None or CKPT_RE.search(last_ckpt.name).group(1) != f"{step:06d}":
        last_ckpt = checkpoint_path(out, step)
        _write_checkpoint(last_ckpt, model, adam, streams, step, cfg)

    final = None
    if step >= cfg.steps and cfg.final_eval:
        final = evaluate_fit(model, dataset, cfg.holdout_views, with_ecd=True)
        log.append({"step": step, "kind": "eval", "wall_s": time.perf_counter() - t0, **final})
        (out / "final_eval.json").write_text(json.dumps({"step": step, **final}, indent=2, sort_keys=True),
                                             encoding="utf-8")
    return TrainResult(model, step, log, final, last_ckpt)


def ablation_pair(cfg: TrainConfig) -> tuple[TrainConfig, TrainConfig]:
    """(with, without) rotation loss; identical otherwise."""
    base = Path(cfg.out_dir)
    with_ = replace(cfg, out_dir=str(base / "with_ecd"))
    without = replace(cfg, out_dir=str(base / "no_ecd"), equivariance="off",
                      loss=replace(cfg.loss, rot=0.0))
    return with_, without
