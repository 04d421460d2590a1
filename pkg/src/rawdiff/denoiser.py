"""Two-scale U-Net noise predictor with Camera Feature Integration (CFI).

Every 3x3 convolution is preceded by a CFI: a per-channel affine transform
with one (W, B) pathway per virtual camera. The model moves through three
modes:

``pretrain``
    n pathways; each forward pass routes through the pathway of the camera
    that synthesized the batch.
``aligned``
    pathways averaged into a single target pathway; convolutions frozen.
``merged``
    each target affine folded into its convolution. Because the convolution
    zero-pads its (already shifted) input, the folded bias is a spatial field
    whose border differs from its interior.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Union

import numpy as np

from . import tensor_ad as ad
from .params import ParamStore, he_normal
from .tensor_ad import Tensor

MODES = ("pretrain", "aligned", "merged")


@dataclasses.dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 4
    cond_channels: int = 10
    width: int = 32
    temb_dim: int = 64
    n_cameras: int = 5


def _layer_specs(cfg: DenoiserConfig) -> list[tuple[str, int, int]]:
    w = cfg.width
    return [
        ("in", cfg.in_channels + cfg.cond_channels, w),
        ("enc", w, w),
        ("mid1", w, 2 * w),
        ("mid2", 2 * w, 2 * w),
        ("dec", 3 * w, w),
        ("out", w, cfg.in_channels),
    ]


# layers that receive the projected timestep embedding after their conv
_TIME_LAYERS = ("in", "mid1", "dec")


@dataclasses.dataclass
class MergedConv:
    """A CFI^T + 3x3 conv pair folded into one conv with a spatial bias."""

    kernel: np.ndarray  # [Cout, Cin, 3, 3]
    bias_field: np.ndarray  # [Cout, H, W]


def _border_bias(bias: np.ndarray, bias_kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    """c[o] + sum over in-bounds taps of bias_kernel[o], for an h x w output."""
    ones = Tensor(np.ones((1, 1, h, w), dtype=bias_kernel.dtype))
    k = Tensor(bias_kernel[:, None, :, :])
    field = ad.conv2d(ones, k, pad="zero").data[0]
    return (field + bias[:, None, None]).astype(bias_kernel.dtype)


def merge_cfi_conv(cfi_w: np.ndarray, cfi_b: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                   input_dims: tuple[int, int], pad: str = "zero") -> MergedConv:
    """Fold ``conv(channel_affine(x, w, b))`` into a single convolution.

    The kernel is scaled per input channel by ``w``. The affine offset ``b``
    passes through the kernel too, but only over taps that land inside the
    image, so the bias becomes a field over output pixels.
    """
    if pad != "zero":
        raise ValueError("merging is only exact for zero-padded convolutions")
    cout, cin, kh, kw = kernel.shape
    if cfi_w.shape != (cin,) or cfi_b.shape != (cin,):
        raise ValueError(f"CFI width {cfi_w.shape} does not match conv input channels {cin}")
    k64 = kernel.astype(np.float64)
    merged = k64 * cfi_w.astype(np.float64)[None, :, None, None]
    bias_kernel = np.einsum("oihw,i->ohw", k64, cfi_b.astype(np.float64))
    h, w = input_dims
    field = _border_bias(bias.astype(np.float64), bias_kernel, h, w)
    return MergedConv(merged.astype(kernel.dtype), field.astype(kernel.dtype))


class Denoiser(ParamStore):
    """Noise predictor eps_theta(x_t, t, cond)."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.mode = "pretrain"
        self.frozen: set[str] = set()
        self._field_cache: dict[tuple[str, int, int], np.ndarray] = {}
        rng = np.random.default_rng(seed)
        td = cfg.temb_dim
        self._add("temb.fc.weight", he_normal(rng, (td, td), td))
        self._add("temb.fc.bias", np.zeros(td))
        for name, cin, cout in _layer_specs(cfg):
            gain = 1.0 if name == "out" else 2.0
            self._add(f"conv.{name}.weight", he_normal(rng, (cout, cin, 3, 3), cin * 9, gain))
            self._add(f"conv.{name}.bias", np.zeros(cout))
            for i in range(1, cfg.n_cameras + 1):
                self._add(f"cfi.{name}.W.{i}", np.ones(cin))
                self._add(f"cfi.{name}.B.{i}", np.zeros(cin))
            if name in _TIME_LAYERS:
                self._add(f"temb.{name}.weight", he_normal(rng, (td, cout), td, 1.0) * 0.1)
                self._add(f"temb.{name}.bias", np.zeros(cout))

    # -- structure -----------------------------------------------------------

    @property
    def layer_names(self) -> list[str]:
        return [name for name, _, _ in _layer_specs(self.cfg)]

    def conv_param_names(self) -> list[str]:
        if self.mode == "merged":
            return [k for k in self.params if k.startswith("merged.")]
        return [k for k in self.params if k.startswith("conv.")]

    def cfi_param_names(self, camera: Union[int, str, None] = None) -> list[str]:
        suffix = None if camera is None else f".{camera}"
        return [k for k in self.params if k.startswith("cfi.") and (suffix is None or k.endswith(suffix))]

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def average_cfis(self) -> None:
        """Replace the n pathways of every CFI by their mean (pathway ``T``)."""
        if self.mode != "pretrain":
            raise RuntimeError(f"CFIs can only be averaged once, from pretrain mode (mode is {self.mode!r})")
        n = self.cfg.n_cameras
        for name in self.layer_names:
            for part in ("W", "B"):
                stack = np.stack([self.params.pop(f"cfi.{name}.{part}.{i}").data for i in range(1, n + 1)])
                self._add(f"cfi.{name}.{part}.T", stack.astype(np.float64).mean(axis=0))
        self.mode = "aligned"

    def freeze_convs(self) -> None:
        """Exclude the backbone from optimizer updates, leaving only CFI^T trainable.

        Covers every conv kernel and bias and the time-embedding projections,
        so aligning touches nothing but the target CFI pathway.
        """
        if self.mode != "aligned":
            raise RuntimeError(f"convs are frozen for aligning; model is in {self.mode!r} mode")
        for k, v in self.params.items():
            if not k.startswith("cfi."):
                self.frozen.add(k)
                v.requires_grad = False

    def unfreeze_convs(self) -> None:
        for k in list(self.frozen):
            self.frozen.discard(k)
            self.params[k].requires_grad = True

    def reparameterize(self) -> None:
        """Fold each CFI^T into its conv; afterwards no channel_affine remains."""
        if self.mode != "aligned":
            raise RuntimeError(f"reparameterization needs an aligned model, got {self.mode!r}")
        for name in self.layer_names:
            w = self.params.pop(f"cfi.{name}.W.T").data
            b = self.params.pop(f"cfi.{name}.B.T").data
            k = self.params.pop(f"conv.{name}.weight").data
            c = self.params.pop(f"conv.{name}.bias").data
            k64 = k.astype(np.float64)
            self._add(f"merged.{name}.weight", k64 * w.astype(np.float64)[None, :, None, None])
            self._add(f"merged.{name}.bias", c)
            self._add(f"merged.{name}.bias_kernel", np.einsum("oihw,i->ohw", k64, b.astype(np.float64)))
        self.frozen = set()
        self.mode = "merged"

    def set_mode(self, mode: str) -> None:
        """Reshape the parameter table to ``mode`` (used when loading checkpoints)."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == self.mode:
            return
        if self.mode == "pretrain":
            self.average_cfis()
        if mode == "merged" and self.mode == "aligned":
            self.reparameterize()
        if self.mode != mode:
            raise ValueError(f"cannot convert model to mode {mode!r}")

    # -- forward ---------------------------------------------------------------

    def _bias_field(self, name: str, h: int, w: int) -> Tensor:
        key = (name, h, w)
        field = self._field_cache.get(key)
        bk = self.params[f"merged.{name}.bias_kernel"].data
        b = self.params[f"merged.{name}.bias"].data
        if field is None or field.dtype != bk.dtype:
            field = _border_bias(b.astype(np.float64), bk.astype(np.float64), h, w).astype(bk.dtype)
            self._field_cache[key] = field
        return Tensor(field)

    def clear_cache(self) -> None:
        self._field_cache.clear()

    def _layer(self, name: str, x: Tensor, camera, bypass_cfi: bool) -> Tensor:
        p = self.params
        if self.mode == "merged":
            field = self._bias_field(name, x.shape[2], x.shape[3])
            return ad.conv2d(x, p[f"merged.{name}.weight"], field)
        if not bypass_cfi:
            x = ad.channel_affine(x, p[f"cfi.{name}.W.{camera}"], p[f"cfi.{name}.B.{camera}"])
        return ad.conv2d(x, p[f"conv.{name}.weight"], p[f"conv.{name}.bias"])

    def forward(self, x_t: Tensor, t, cond: Tensor, camera: Optional[int] = None,
                bypass_cfi: bool = False) -> Tensor:
        """Predict the noise in ``x_t`` [N,4,h,w] given ``cond`` [N,10,h,w].

        ``t`` is a step index shared by the batch or one index per sample.
        ``camera`` (1-based) selects the CFI pathway in pretrain mode and is
        ignored otherwise. ``bypass_cfi`` evaluates the bare backbone.
        """
        x_t, cond = _tensor(x_t), _tensor(cond)
        if x_t.shape[0] != cond.shape[0] or x_t.shape[2:] != cond.shape[2:]:
            raise ad.ShapeError(f"x_t {x_t.shape} and cond {cond.shape} disagree in batch or resolution")
        if self.mode == "pretrain":
            if not bypass_cfi and (camera is None or not 1 <= int(camera) <= self.cfg.n_cameras):
                raise ValueError(f"camera must be in 1..{self.cfg.n_cameras} in pretrain mode, got {camera}")
            path = None if camera is None else int(camera)
        else:
            path = "T"
        n = x_t.shape[0]
        steps = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        p = self.params
        dt = x_t.dtype
        emb = ad.sinusoidal_embed(steps, self.cfg.temb_dim, dtype=dt)
        emb = ad.relu(ad.dense(emb, p["temb.fc.weight"], p["temb.fc.bias"]))

        def timed(name, h):
            v = ad.dense(emb, p[f"temb.{name}.weight"], p[f"temb.{name}.bias"])
            return ad.add_channel(h, v)

        h0 = ad.concat_channels([x_t, cond])
        h1 = ad.relu(timed("in", self._layer("in", h0, path, bypass_cfi)))
        h2 = ad.relu(self._layer("enc", h1, path, bypass_cfi))
        d = ad.avg_pool2(h2)
        h3 = ad.relu(timed("mid1", self._layer("mid1", d, path, bypass_cfi)))
        h4 = ad.relu(self._layer("mid2", h3, path, bypass_cfi))
        u = ad.concat_channels([ad.upsample_nearest2(h4), h2])
        h5 = ad.relu(timed("dec", self._layer("dec", u, path, bypass_cfi)))
        return self._layer("out", h5, path, bypass_cfi)

    __call__ = forward

    def predict_eps(self, x_t: np.ndarray, t: int, cond: np.ndarray, camera: Optional[int] = None) -> np.ndarray:
        """Numpy convenience wrapper used by the sampler (no graph kept)."""
        out = self.forward(Tensor(x_t), t, Tensor(cond), camera=camera)
        return out.data


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
