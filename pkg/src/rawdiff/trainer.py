"""Pre-training over virtual cameras, aligning with frozen convs, checkpoints.

Checkpoint layout (all integers little-endian)::

    magic            8 bytes   b"RDIFFCK\\n"
    manifest_len     u32
    manifest         manifest_len bytes of UTF-8 JSON (sorted keys)
    tensor_count     u32
    tensor_count times:
        name_len     u16
        name         name_len bytes UTF-8
        ndim         u8
        dims         ndim x u32
        data         prod(dims) x float32

The manifest must carry ``schema_version`` equal to :data:`SCHEMA_VERSION`.
Nothing may follow the last tensor.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import tensor_ad as ad
from .color_corrector import CCConfig, ColorCorrector
from .denoiser import Denoiser, DenoiserConfig
from .noisespace import NoiseSpace, VirtualCamera, sample_params, synthesize
from .rawproc import amplify, build_condition, downsample
from .rawproc import crop as crop_frame
from .schedule import DiffusionSchedule, build, forward_sample, predict_x0
from .tensor_ad import Tensor

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CKPT_MAGIC = b"RDIFFCK\n"


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


@dataclasses.dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    milestones: tuple[int, ...] = (1000, 1500, 1750, 1875)
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_img: float = 1.0
    pretrain_iters: int = 2000
    align_iters: int = 200
    align_lr: float = 3e-5
    align_batch_size: int = 8
    crop: int = 32
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.lr <= 0 or self.align_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_img < 0:
            raise ValueError("lambda_img must be >= 0")
        if self.batch_size < 1 or self.align_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")


# ---------------------------------------------------------------------------
# loss and optimizer


def loss(eps_hat: Tensor, eps, x0_corrected: Tensor, x_rt0, lambda_img: float = 1.0) -> tuple[Tensor, float, float]:
    """Noise MSE plus ``lambda_img`` times the L1 error of the corrected estimate.

    Returns the scalar loss tensor and the two component values.
    """
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    x_rt0 = x_rt0 if isinstance(x_rt0, Tensor) else Tensor(x_rt0)
    l_eps = ad.mse(eps_hat, eps)
    l_img = ad.mae(x0_corrected, x_rt0)
    total = ad.add(l_eps, ad.scale(l_img, lambda_img)) if lambda_img else l_eps
    return total, float(l_eps.data), float(l_img.data)


class Adam:
    """Adam without weight decay; parameters with no gradient this step are skipped."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 milestones: Sequence[int] = ()):
        self.base_lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.milestones = tuple(milestones)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}
        self.iteration = 0

    @property
    def lr(self) -> float:
        halvings = sum(1 for m in self.milestones if self.iteration >= m)
        return self.base_lr * 0.5 ** halvings

    def step(self, params: Mapping[str, Tensor]) -> None:
        lr = self.lr
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float32)
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            self.t[name] += 1
            k = self.t[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** k)
            vhat = v / (1 - self.beta2 ** k)
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
        self.iteration += 1

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"iteration": self.iteration, "base_lr": self.base_lr, "milestones": list(self.milestones),
                "beta1": self.beta1, "beta2": self.beta2, "counts": dict(sorted(self.t.items()))}
        tensors = {}
        for name in sorted(self.m):
            tensors[f"adam.m/{name}"] = self.m[name]
            tensors[f"adam.v/{name}"] = self.v[name]
        return meta, tensors

    @classmethod
    def from_state(cls, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> "Adam":
        opt = cls(meta["base_lr"], meta["beta1"], meta["beta2"], milestones=meta["milestones"])
        opt.iteration = int(meta["iteration"])
        for name, count in meta["counts"].items():
            opt.t[name] = int(count)
            opt.m[name] = np.array(tensors[f"adam.m/{name}"], dtype=np.float32)
            opt.v[name] = np.array(tensors[f"adam.v/{name}"], dtype=np.float32)
        return opt


# ---------------------------------------------------------------------------
# one training iteration


@dataclasses.dataclass
class StepResult:
    loss: float
    eps_loss: float
    img_loss: float
    t: int
    camera: Union[int, str]
    lr: float

    def record(self, iteration: int, stage: str) -> dict:
        return {"stage": stage, "iter": iteration, "loss": self.loss, "eps_loss": self.eps_loss,
                "img_loss": self.img_loss, "t": self.t, "camera": self.camera, "lr": self.lr}


def estimate_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Clean estimate fed to the color corrector, clipped to the valid range."""
    return np.clip(predict_x0(x_t, t, eps_hat, sched), 0.0, 1.0)


def trainable_params(model: Denoiser, cc: ColorCorrector) -> dict[str, Tensor]:
    out = {f"denoiser/{k}": v for k, v in model.trainable().items()}
    out.update({f"cc/{k}": v for k, v in cc.params.items()})
    return out


def _diffusion_update(model: Denoiser, cc: ColorCorrector, opt: Adam, cond_full: np.ndarray, x0: np.ndarray,
                      camera, sched: DiffusionSchedule, rng: np.random.Generator, lambda_img: float) -> StepResult:
    t = int(rng.integers(1, sched.T + 1))
    r = sched.factor(t)
    cond = downsample(cond_full, r)
    x_rt0 = downsample(x0, r)
    eps = rng.standard_normal(x_rt0.shape).astype(np.float32)
    x_t = forward_sample(x_rt0, t, eps, sched)
    params = trainable_params(model, cc)
    for p in params.values():
        p.grad = None
    eps_hat = model.forward(Tensor(x_t), t, Tensor(cond), camera=camera)
    # the clean estimate is built from a detached eps_hat: the image term
    # trains the color corrector, the noise term trains the denoiser
    x0_hat = estimate_x0(x_t, t, eps_hat.data, sched)
    x0_corr = cc.correct(Tensor(x0_hat), t)
    total, l_eps, l_img = loss(eps_hat, eps, x0_corr, x_rt0, lambda_img)
    if not math.isfinite(float(total.data)):
        raise FloatingPointError(f"non-finite loss at t={t}")
    ad.backward(total)
    lr = opt.lr
    opt.step(params)
    return StepResult(float(total.data), l_eps, l_img, t, camera, lr)


def pretrain_step(model: Denoiser, cc: ColorCorrector, opt: Adam, x0: np.ndarray, sched: DiffusionSchedule,
                  cameras: Sequence[VirtualCamera], space: NoiseSpace, rng: np.random.Generator,
                  lambda_img: float = 1.0) -> StepResult:
    """One pre-training iteration on a batch of clean packed frames [N,4,h,w]."""
    if model.mode != "pretrain":
        raise RuntimeError(f"pretrain_step needs a pretrain-mode model, got {model.mode!r}")
    x0 = np.asarray(x0, dtype=np.float32)
    if x0.ndim != 4 or x0.shape[0] == 0:
        raise ValueError(f"need a non-empty batch [N,4,h,w], got shape {x0.shape}")
    cam = cameras[int(rng.integers(0, len(cameras)))]
    conds = []
    for img in x0:
        params = sample_params(cam, space, rng)
        noisy = synthesize(img, params, rng)
        conds.append(build_condition(amplify(noisy, params.ratio)))
    cond_full = np.stack(conds)
    return _diffusion_update(model, cc, opt, cond_full, x0, cam.index, sched, rng, lambda_img)


def align_step(model: Denoiser, cc: ColorCorrector, opt: Adam, pairs: Sequence[tuple[np.ndarray, np.ndarray, float]],
               sched: DiffusionSchedule, rng: np.random.Generator, lambda_img: float = 1.0) -> StepResult:
    """One aligning iteration on real (noisy, clean, ratio) triples."""
    if model.mode != "aligned":
        raise RuntimeError(f"align_step needs an aligned model (average CFIs first), got {model.mode!r}")
    if not model.frozen:
        raise RuntimeError("align_step needs frozen convs; call freeze_convs() first")
    if len(pairs) == 0:
        raise ValueError("align_step needs at least one (noisy, clean, ratio) pair")
    cond_full = np.stack([build_condition(amplify(noisy, ratio)) for noisy, _, ratio in pairs])
    x0 = np.stack([np.asarray(clean, dtype=np.float32) for _, clean, _ in pairs])
    return _diffusion_update(model, cc, opt, cond_full, x0, "T", sched, rng, lambda_img)


# ---------------------------------------------------------------------------
# checkpoints


@dataclasses.dataclass
class CheckpointBundle:
    manifest: dict
    tensors: dict[str, np.ndarray]


def _encode(bundle: CheckpointBundle) -> bytes:
    if not bundle.manifest:
        raise CheckpointError("refusing to write an empty manifest")
    manifest = dict(bundle.manifest)
    manifest.setdefault("schema_version", SCHEMA_VERSION)
    text = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(bundle.tensors))]
    for name in sorted(bundle.tensors):
        arr = np.ascontiguousarray(bundle.tensors[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _decode(blob: bytes) -> CheckpointBundle:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}, "
                                  f"file has {len(blob)}")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise CheckpointError("bad magic at offset 0, not a checkpoint")
    (mlen,) = struct.unpack("<I", take(4, "manifest length"))
    if mlen == 0:
        raise CheckpointError(f"empty manifest at offset {pos}")
    try:
        manifest = json.loads(take(mlen, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest at offset {len(CKPT_MAGIC) + 4}: {exc}") from None
    if not isinstance(manifest, dict) or not manifest:
        raise CheckpointError("empty manifest")
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"schema version {version!r} not supported (expected {SCHEMA_VERSION})")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for k in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"name length of tensor {k}"))
        name = take(nlen, f"name of tensor {k}").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"shape of {name}"))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after offset {pos}")
    return CheckpointBundle(manifest, tensors)


def save(bundle: CheckpointBundle, path: Union[str, os.PathLike]) -> None:
    blob = _encode(bundle)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path: Union[str, os.PathLike]) -> CheckpointBundle:
    with open(path, "rb") as fh:
        return _decode(fh.read())


def bundle_from(model: Denoiser, cc: ColorCorrector, sched: DiffusionSchedule, opt: Optional[Adam] = None,
                stage: str = "", extra: Optional[Mapping] = None,
                rng: Optional[np.random.Generator] = None) -> CheckpointBundle:
    """Snapshot everything needed to resume training or run inference."""
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "mode": model.mode,
        "stage": stage,
        "schedule": sched.params(),
        "denoiser": dataclasses.asdict(model.cfg),
        "color_corrector": dataclasses.asdict(cc.cfg),
        "frozen": sorted(model.frozen),
    }
    tensors = {f"denoiser/{k}": v.data for k, v in model.params.items()}
    tensors.update({f"cc/{k}": v.data for k, v in cc.params.items()})
    if opt is not None:
        meta, opt_tensors = opt.state()
        manifest["optimizer"] = meta
        tensors.update(opt_tensors)
    if rng is not None:
        manifest["rng_state"] = rng.bit_generator.state
    if extra:
        manifest.update(extra)
    return CheckpointBundle(manifest, tensors)


def restore(bundle: CheckpointBundle) -> tuple[Denoiser, ColorCorrector, DiffusionSchedule, Optional[Adam]]:
    """Rebuild model, color corrector, schedule and optimizer from a bundle."""
    m = bundle.manifest
    for key in ("mode", "schedule", "denoiser", "color_corrector"):
        if key not in m:
            raise CheckpointError(f"manifest lacks {key!r}")
    model = Denoiser(DenoiserConfig(**m["denoiser"]))
    model.set_mode(m["mode"])
    model.load_state(_prefixed(bundle.tensors, "denoiser/"))
    if m.get("frozen"):
        model.freeze_convs()
    cc = ColorCorrector(CCConfig(**m["color_corrector"]))
    cc.load_state(_prefixed(bundle.tensors, "cc/"))
    sched = build(**m["schedule"])
    opt = None
    if "optimizer" in m:
        opt = Adam.from_state(m["optimizer"], bundle.tensors)
    return model, cc, sched, opt


def restore_rng(bundle: CheckpointBundle, seed: int) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    state = bundle.manifest.get("rng_state")
    if state is not None:
        rng.bit_generator.state = state
    return rng


def _prefixed(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# loops


def iterate_batches(data: np.ndarray, batch_size: int, crop: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a random mini-batch of random crops from a stack of packed frames."""
    idx = rng.integers(0, len(data), size=batch_size)
    return np.stack([crop_frame(data[i], crop, rng) for i in idx])


def run_pretrain(model: Denoiser, cc: ColorCorrector, sched: DiffusionSchedule, data: np.ndarray,
                 cameras: Sequence[VirtualCamera], space: NoiseSpace, cfg: TrainConfig,
                 opt: Optional[Adam] = None, rng: Optional[np.random.Generator] = None,
                 iters: Optional[int] = None, log: Optional[list] = None) -> Adam:
    """Run pre-training iterations until ``cfg.pretrain_iters`` are done (resumable)."""
    opt = opt or Adam(cfg.lr, cfg.beta1, cfg.beta2, milestones=cfg.milestones)
    rng = rng or np.random.default_rng(cfg.seed)
    end = cfg.pretrain_iters if iters is None else opt.iteration + iters
    while opt.iteration < end:
        batch = iterate_batches(data, cfg.batch_size, cfg.crop, rng)
        res = pretrain_step(model, cc, opt, batch, sched, cameras, space, rng, cfg.lambda_img)
        rec = res.record(opt.iteration, "pretrain")
        if log is not None:
            log.append(rec)
        if opt.iteration % 100 == 0:
            logger.info("pretrain %d loss=%.4f eps=%.4f img=%.4f", opt.iteration, res.loss, res.eps_loss, res.img_loss)
    return opt


def run_align(model: Denoiser, cc: ColorCorrector, sched: DiffusionSchedule,
              pairs: Sequence[tuple[np.ndarray, np.ndarray, float]], cfg: TrainConfig,
              opt: Optional[Adam] = None, rng: Optional[np.random.Generator] = None,
              iters: Optional[int] = None, log: Optional[list] = None) -> Adam:
    """Average CFIs and freeze convs if needed, then run aligning iterations."""
    if model.mode == "pretrain":
        model.average_cfis()
    if model.mode != "aligned":
        raise RuntimeError(f"cannot align a {model.mode!r} model")
    if not model.frozen:
        model.freeze_convs()
    if len(pairs) == 0:
        raise ValueError("aligning needs at least one pair")
    opt = opt or Adam(cfg.align_lr, cfg.beta1, cfg.beta2)
    rng = rng or np.random.default_rng(cfg.seed + 1)
    end = cfg.align_iters if iters is None else opt.iteration + iters
    while opt.iteration < end:
        idx = rng.integers(0, len(pairs), size=min(cfg.align_batch_size, len(pairs)))
        batch = [pairs[i] for i in idx]
        res = align_step(model, cc, opt, batch, sched, rng, cfg.lambda_img)
        rec = res.record(opt.iteration, "align")
        if log is not None:
            log.append(rec)
        if opt.iteration % 50 == 0:
            logger.info("align %d loss=%.4f eps=%.4f img=%.4f", opt.iteration, res.loss, res.eps_loss, res.img_loss)
    return opt


def write_log(path: Union[str, os.PathLike], records: Iterable[dict]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
