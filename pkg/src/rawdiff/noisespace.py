"""Calibrated noise-parameter space, virtual cameras and noisy-frame synthesis.

The sensor model has four components: Poisson shot noise scaled by the system
gain K, Gaussian read noise, a Gaussian offset shared by every sample of a
mosaic row, and uniform quantization to the ADC step. Read and row noise
standard deviations follow log-linear fits against log K.
"""

from __future__ import annotations

import dataclasses
import importlib.resources
import math
import os
from typing import Optional, Union

import numpy as np

DEFAULT_DATA_RANGE = 16383 - 512


class NoiseSpaceError(ValueError):
    """Invalid noise-space definition; ``line`` is set when parsing a file."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclasses.dataclass(frozen=True)
class NoiseParams:
    K: float
    sigma_read: float
    sigma_row: float
    q_step: float
    ratio: float

    def validate(self) -> None:
        vals = dataclasses.astuple(self)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite noise parameters: {self}")
        if self.K <= 0 or self.q_step <= 0:
            raise ValueError(f"K and q_step must be positive: {self}")
        if self.sigma_read < 0 or self.sigma_row < 0:
            raise ValueError(f"noise std must be non-negative: {self}")
        if self.ratio < 1:
            raise ValueError(f"ratio must be >= 1: {self}")


@dataclasses.dataclass(frozen=True)
class NoiseSpace:
    """Ranges and log-linear fits collected from calibrated cameras.

    ``read_model`` and ``row_model`` are ``(slope, intercept, residual_std)``
    so that ``log sigma = slope * log K + intercept + N(0, residual_std^2)``.
    """

    logK_range: tuple[float, float] = (math.log(0.1), math.log(10.0))
    read_model: tuple[float, float, float] = (0.85, 0.6, 0.1)
    row_model: tuple[float, float, float] = (0.8, -1.5, 0.1)
    q_step: float = 1.0
    ratio_range: tuple[float, float] = (50.0, 300.0)

    def __post_init__(self):
        lo, hi = self.logK_range
        if not lo < hi:
            raise NoiseSpaceError(f"logK_range must be increasing, got {self.logK_range}")
        if self.read_model[2] < 0 or self.row_model[2] < 0:
            raise NoiseSpaceError("residual std of read/row models must be >= 0")
        if self.q_step <= 0:
            raise NoiseSpaceError(f"q_step must be positive, got {self.q_step}")
        if not 1 <= self.ratio_range[0] <= self.ratio_range[1]:
            raise NoiseSpaceError(f"ratio_range must satisfy 1 <= min <= max, got {self.ratio_range}")


@dataclasses.dataclass(frozen=True)
class VirtualCamera:
    index: int  # 1-based
    logK_range: tuple[float, float]


def partition(space: NoiseSpace, n: int) -> list[VirtualCamera]:
    """Split the log K axis into ``n`` equal-width virtual cameras."""
    if n < 1:
        raise ValueError(f"need at least one virtual camera, got n={n}")
    lo, hi = space.logK_range
    edges = [lo + (hi - lo) * i / n for i in range(n + 1)]
    # pin the last edge so the union tiles the range exactly
    edges[-1] = hi
    return [VirtualCamera(i + 1, (edges[i], edges[i + 1])) for i in range(n)]


def sample_params(vc: VirtualCamera, space: NoiseSpace, rng: np.random.Generator) -> NoiseParams:
    """Draw one parameter set from the virtual camera's region of the space."""
    lo, hi = vc.logK_range
    log_k = float(rng.uniform(lo, hi))
    a_r, b_r, s_r = space.read_model
    a_w, b_w, s_w = space.row_model
    log_read = a_r * log_k + b_r + (s_r * float(rng.standard_normal()) if s_r > 0 else 0.0)
    log_row = a_w * log_k + b_w + (s_w * float(rng.standard_normal()) if s_w > 0 else 0.0)
    ratio = float(rng.uniform(*space.ratio_range))
    return NoiseParams(math.exp(log_k), math.exp(log_read), math.exp(log_row), space.q_step, ratio)


def quantize(x: np.ndarray, q_step: float) -> np.ndarray:
    return np.rint(x / q_step) * q_step


def synthesize(clean: np.ndarray, params: NoiseParams, rng: np.random.Generator,
               data_range: float = DEFAULT_DATA_RANGE) -> np.ndarray:
    """Simulate the short exposure of a clean packed frame.

    Works in DN: the scene is dimmed by ``ratio``, converted to electrons,
    Poisson-sampled, gained back by K, then read noise, per-row offsets and
    quantization are added before clipping to the sensor range. Returns the
    normalized noisy frame *without* amplification. Rows are rows of the
    Bayer mosaic, so each packed row pair (R,G1) and (G2,B) shares a draw.

    Accepts ``(4, h, w)`` or a batch ``(N, 4, h, w)`` (one parameter set).
    """
    params.validate()
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim not in (3, 4) or clean.shape[-3] != 4:
        raise ValueError(f"expected packed frame(s) (..., 4, h, w), got {clean.shape}")
    if clean.min() < 0 or clean.max() > 1:
        raise ValueError("clean frame must lie in [0, 1]")
    d = float(data_range)
    electrons = clean * d / (params.ratio * params.K)
    signal = params.K * rng.poisson(electrons).astype(np.float64)
    if params.sigma_read > 0:
        signal += rng.normal(0.0, params.sigma_read, size=signal.shape)
    if params.sigma_row > 0:
        h = clean.shape[-2]
        lead = clean.shape[:-3]
        # mosaic row 2k holds R,G1 (channels 0,1); row 2k+1 holds G2,B (channels 3,2)
        rows = rng.normal(0.0, params.sigma_row, size=lead + (2, h))
        offs = np.empty(clean.shape[:-1], dtype=np.float64)
        offs[..., 0, :] = rows[..., 0, :]
        offs[..., 1, :] = rows[..., 0, :]
        offs[..., 2, :] = rows[..., 1, :]
        offs[..., 3, :] = rows[..., 1, :]
        signal += offs[..., None]
    signal = quantize(signal, params.q_step)
    return (np.clip(signal, 0.0, d) / d).astype(np.float32)


# ---------------------------------------------------------------------------
# noise-space definition file
#
#   # comment
#   logK_min = -2.302585
#   logK_max = 2.302585
#   read_slope = 0.85
#   read_intercept = 0.6
#   read_std = 0.1
#   row_slope = 0.8
#   row_intercept = -1.5
#   row_std = 0.1
#   q_step = 1.0
#   ratio_min = 50
#   ratio_max = 300

_SPACE_KEYS = (
    "logK_min", "logK_max", "read_slope", "read_intercept", "read_std",
    "row_slope", "row_intercept", "row_std", "q_step", "ratio_min", "ratio_max",
)


def parse_space(text: str) -> NoiseSpace:
    vals: dict[str, float] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise NoiseSpaceError(f"expected 'key = value', got {raw_line.strip()!r}", lineno)
        if key not in _SPACE_KEYS:
            raise NoiseSpaceError(f"unknown key {key!r}", lineno)
        if key in vals:
            raise NoiseSpaceError(f"duplicate key {key!r}", lineno)
        try:
            vals[key] = float(value.strip())
        except ValueError:
            raise NoiseSpaceError(f"value for {key!r} is not a number: {value.strip()!r}", lineno) from None
        if not math.isfinite(vals[key]):
            raise NoiseSpaceError(f"value for {key!r} is not finite", lineno)
    missing = [k for k in _SPACE_KEYS if k not in vals]
    if missing:
        raise NoiseSpaceError(f"missing keys: {', '.join(missing)}")
    return NoiseSpace(
        logK_range=(vals["logK_min"], vals["logK_max"]),
        read_model=(vals["read_slope"], vals["read_intercept"], vals["read_std"]),
        row_model=(vals["row_slope"], vals["row_intercept"], vals["row_std"]),
        q_step=vals["q_step"],
        ratio_range=(vals["ratio_min"], vals["ratio_max"]),
    )


def format_space(space: NoiseSpace) -> str:
    vals = {
        "logK_min": space.logK_range[0], "logK_max": space.logK_range[1],
        "read_slope": space.read_model[0], "read_intercept": space.read_model[1], "read_std": space.read_model[2],
        "row_slope": space.row_model[0], "row_intercept": space.row_model[1], "row_std": space.row_model[2],
        "q_step": space.q_step, "ratio_min": space.ratio_range[0], "ratio_max": space.ratio_range[1],
    }
    return "".join(f"{k} = {vals[k]!r}\n" for k in _SPACE_KEYS)


def load_space(path: Union[str, os.PathLike]) -> NoiseSpace:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_space(fh.read())


def save_space(path: Union[str, os.PathLike], space: NoiseSpace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_space(space))


def default_space() -> NoiseSpace:
    """The noise space shipped with the package (``data/noise_space.txt``)."""
    text = importlib.resources.files("rawdiff").joinpath("data/noise_space.txt").read_text(encoding="utf-8")
    return parse_space(text)
