"""Reverse-process enhancement and PSNR / SSIM evaluation in the packed RAW domain."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from typing import Optional, Protocol, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rawproc import amplify, build_condition, downsample
from .schedule import DiffusionSchedule, eps_from_x0, predict_x0, reverse_step, sigma

PSNR_CAP = 100.0
SSIM_WINDOW = 7


class NoisePredictor(Protocol):
    mode: str

    def predict_eps(self, x_t: np.ndarray, t: int, cond: np.ndarray, camera: Optional[int] = None) -> np.ndarray:
        ...


class Corrector(Protocol):
    def apply(self, x: np.ndarray, t: int) -> np.ndarray:
        ...


def enhance(noisy: np.ndarray, ratio: Union[float, Sequence[float]], model: NoisePredictor,
            cc: Optional[Corrector], sched: DiffusionSchedule, rng: np.random.Generator,
            camera: Optional[int] = None, clip_x0: bool = True, rederive_eps: bool = True) -> np.ndarray:
    """Run the full pyramid reverse process conditioned on a short exposure.

    ``noisy`` is one packed frame (4, h, w) or a batch (N, 4, h, w) with one
    ratio per frame. Starts from Gaussian noise at the coarsest resolution.
    ``cc=None`` skips color correction. Returns frames clipped to [0, 1].

    With ``rederive_eps`` the noise used in the update is recomputed from the
    final (clipped, corrected) clean estimate. Feeding the raw prediction back
    instead lets a ReLU network's output grow with its input, and the
    trajectory can diverge at high noise levels.
    """
    noisy = np.asarray(noisy, dtype=np.float32)
    single = noisy.ndim == 3
    batch = noisy[None] if single else noisy
    n = batch.shape[0]
    ratios = np.broadcast_to(np.asarray(ratio, dtype=np.float64), (n,))
    if getattr(model, "mode", None) == "pretrain" and camera is None:
        raise ValueError("a pretrain-mode model needs an explicit camera index")
    h, w = batch.shape[-2:]
    rmax = sched.max_factor
    if h % rmax or w % rmax:
        raise ValueError(f"resolution {h}x{w} not divisible by max downsampling factor {rmax}")
    cond_full = np.stack([build_condition(amplify(b, r)) for b, r in zip(batch, ratios)])
    conds = {f: downsample(cond_full, f) for f in set(int(v) for v in sched.r)}

    r_T = sched.factor(sched.T)
    x = rng.standard_normal((n, 4, h // r_T, w // r_T)).astype(np.float32)
    for t in range(sched.T, 0, -1):
        r = sched.factor(t)
        eps_hat = model.predict_eps(x, t, conds[r], camera=camera)
        x0_hat = predict_x0(x, t, eps_hat, sched)
        if clip_x0:
            x0_hat = np.clip(x0_hat, 0.0, 1.0)
        if cc is not None:
            x0_hat = cc.apply(x0_hat, t)
        if rederive_eps:
            eps_hat = eps_from_x0(x, t, x0_hat, sched)
        r_prev = sched.factor(t - 1)
        if r_prev != r:
            z = rng.standard_normal((n, 4, h // r_prev, w // r_prev)).astype(np.float32)
        elif t > 1 and sigma(t, sched) > 0:
            z = rng.standard_normal(x.shape).astype(np.float32)
        else:
            z = np.zeros_like(x)
        x = reverse_step(x, t, eps_hat, x0_hat, z, sched)
    out = np.clip(x, 0.0, 1.0)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for peak 1.0; identical inputs give :data:`PSNR_CAP`."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def _ssim_plane(x: np.ndarray, y: np.ndarray, win: int, c1: float, c2: float) -> float:
    wx = sliding_window_view(x, (win, win))
    wy = sliding_window_view(y, (win, win))
    npix = win * win
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    # unbiased (sample) covariance over each window
    cov_norm = npix / (npix - 1.0)
    vx = cov_norm * ((wx * wx).mean(axis=(-2, -1)) - mx * mx)
    vy = cov_norm * ((wy * wy).mean(axis=(-2, -1)) - my * my)
    vxy = cov_norm * ((wx * wy).mean(axis=(-2, -1)) - mx * my)
    num = (2 * mx * my + c1) * (2 * vxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, win: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 7x7 windows, computed per channel and averaged.

    ``a`` and ``b`` are (C, h, w) or (h, w).
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < win:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {win}x{win} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    return float(np.mean([_ssim_plane(x, y, win, c1, c2) for x, y in zip(a, b)]))


def color_error(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference of per-channel means (a global color-shift score)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a.mean(axis=(-2, -1)) - b.mean(axis=(-2, -1)))))


# ---------------------------------------------------------------------------
# evaluation


@dataclasses.dataclass
class EnhanceReport:
    psnr: list[float]
    ssim: list[float]
    color_error: list[float]
    input_psnr: list[float]
    runtime: float
    names: list[str] = dataclasses.field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_input_psnr(self) -> float:
        return float(np.mean(self.input_psnr))

    @property
    def mean_color_error(self) -> float:
        return float(np.mean(self.color_error))

    def summary(self) -> dict:
        return {
            "count": len(self.psnr),
            "psnr_mean": self.mean_psnr, "psnr_std": float(np.std(self.psnr)),
            "ssim_mean": self.mean_ssim, "ssim_std": float(np.std(self.ssim)),
            "input_psnr_mean": self.mean_input_psnr,
            "color_error_mean": self.mean_color_error,
        }

    def lines(self, include_runtime: bool = False) -> list[str]:
        """Line-delimited JSON records: one per image, then the aggregate."""
        out = []
        for k in range(len(self.psnr)):
            rec = {"image": self.names[k] if self.names else k, "psnr": self.psnr[k], "ssim": self.ssim[k],
                   "input_psnr": self.input_psnr[k], "color_error": self.color_error[k]}
            out.append(json.dumps(rec, sort_keys=True))
        agg = self.summary()
        if include_runtime:
            agg["runtime_s"] = self.runtime
        out.append(json.dumps({"aggregate": agg}, sort_keys=True))
        return out

    def write(self, path: Union[str, os.PathLike], include_runtime: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.lines(include_runtime)) + "\n")


def evaluate(dataset: Sequence[tuple[np.ndarray, np.ndarray, float]], model: NoisePredictor,
             cc: Optional[Corrector], sched: DiffusionSchedule, seed: int = 0, batch_size: int = 20,
             camera: Optional[int] = None, names: Sequence[str] = (),
             outputs: Optional[list] = None) -> EnhanceReport:
    """Enhance every (noisy, clean, ratio) triple and score it against the clean frame.

    Images are processed in fixed-order batches with one seeded generator per
    batch, so reports are reproducible for a given seed and batch size.
    """
    if len(dataset) == 0:
        raise ValueError("evaluate needs a non-empty dataset")
    start = time.perf_counter()
    ps, ss, ce, inp = [], [], [], []
    for k0 in range(0, len(dataset), batch_size):
        chunk = dataset[k0 : k0 + batch_size]
        noisy = np.stack([np.asarray(c[0], dtype=np.float32) for c in chunk])
        ratios = [float(c[2]) for c in chunk]
        rng = np.random.default_rng([seed, k0])
        out = enhance(noisy, ratios, model, cc, sched, rng, camera=camera)
        for (nz, clean, ratio), o in zip(chunk, out):
            ps.append(psnr(o, clean))
            ss.append(ssim(o, clean))
            ce.append(color_error(o, clean))
            inp.append(psnr(amplify(nz, ratio), clean))
            if outputs is not None:
                outputs.append(o)
    return EnhanceReport(ps, ss, ce, inp, time.perf_counter() - start, list(names))


def save_preview(path: Union[str, os.PathLike], packed: np.ndarray, gamma: float = 2.2) -> None:
    """Write a gamma-mapped RGB preview (G = mean of the two greens) as PNG."""
    from PIL import Image

    p = np.clip(np.asarray(packed, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([p[0], 0.5 * (p[1] + p[3]), p[2]], axis=-1) ** (1.0 / gamma)
    Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB").save(path)
