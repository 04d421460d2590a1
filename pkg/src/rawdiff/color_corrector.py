"""Global color correction of the clean-image estimate.

A per-pixel base network (three 1x1 convolutions) whose first hidden layer
is modulated by (gamma, nu) computed from global image statistics and the
timestep by a small strided conditional network.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor_ad as ad
from .params import ParamStore, he_normal
from .tensor_ad import Tensor


@dataclasses.dataclass(frozen=True)
class CCConfig:
    channels: int = 4
    hidden: int = 16
    cond_width: int = 16
    temb_dim: int = 16
    cond_kernel: int = 3
    cond_stride: int = 2


class ColorCorrector(ParamStore):
    """Base MLP + conditional network producing Global Feature Modulation."""

    def __init__(self, cfg: CCConfig = CCConfig(), seed: int = 0, init: str = "near_identity"):
        super().__init__()
        if cfg.temb_dim != cfg.cond_width:
            raise ValueError("timestep embedding is added to pooled features; widths must match")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, hdn, cw, k = cfg.channels, cfg.hidden, cfg.cond_width, cfg.cond_kernel
        self._add("base.0.weight", he_normal(rng, (hdn, c, 1, 1), c))
        self._add("base.0.bias", np.zeros(hdn))
        self._add("base.1.weight", he_normal(rng, (hdn, hdn, 1, 1), hdn))
        self._add("base.1.bias", np.zeros(hdn))
        self._add("base.2.weight", he_normal(rng, (c, hdn, 1, 1), hdn, 1.0))
        self._add("base.2.bias", np.zeros(c))
        cin = c
        for i in range(3):
            self._add(f"cond.{i}.weight", he_normal(rng, (cw, cin, k, k), cin * k * k))
            self._add(f"cond.{i}.bias", np.zeros(cw))
            cin = cw
        self._add("gamma.weight", he_normal(rng, (cw, hdn), cw, 1.0) * 0.01)
        self._add("gamma.bias", np.ones(hdn))
        self._add("nu.weight", he_normal(rng, (cw, hdn), cw, 1.0) * 0.01)
        self._add("nu.bias", np.zeros(hdn))
        if init == "near_identity":
            self.set_identity(perturb=0.01, rng=rng)
        elif init == "identity":
            self.set_identity()
        elif init != "random":
            raise ValueError(f"unknown init {init!r}")

    def set_identity(self, perturb: float = 0.0, rng=None) -> None:
        """Configure the base net as an exact identity under (gamma=1, nu=0).

        The first layer splits each channel into +x and -x so the rectifiers
        pass both signs; the last layer recombines them.
        """
        c, hdn = self.cfg.channels, self.cfg.hidden
        if hdn < 2 * c:
            raise ValueError("identity init needs hidden >= 2 * channels")
        w0 = np.zeros((hdn, c, 1, 1))
        w0[np.arange(c), np.arange(c)] = 1.0
        w0[c + np.arange(c), np.arange(c)] = -1.0
        w1 = np.eye(hdn)[:, :, None, None]
        w2 = np.zeros((c, hdn, 1, 1))
        w2[np.arange(c), np.arange(c)] = 1.0
        w2[np.arange(c), c + np.arange(c)] = -1.0
        vals = {"base.0.weight": w0, "base.1.weight": w1, "base.2.weight": w2}
        for name, v in vals.items():
            if perturb and rng is not None:
                v = v + perturb * rng.standard_normal(v.shape)
            self.params[name].data = v.astype(self.params[name].dtype)
        for name in ("base.0.bias", "base.1.bias", "base.2.bias", "nu.bias"):
            self.params[name].data = np.zeros_like(self.params[name].data)
        self.params["gamma.bias"].data = np.ones_like(self.params["gamma.bias"].data)

    def cond_features(self, x: Tensor, t) -> tuple[Tensor, Tensor]:
        """Global modulation coefficients (gamma, nu), each [N, hidden]."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.cfg
        if cfg.cond_stride == 2 and min(x.shape[2:]) < 8:
            raise ad.ShapeError(f"color corrector needs inputs of at least 8x8, got {x.shape[2:]}")
        p = self.params
        h = x
        for i in range(3):
            h = ad.relu(ad.conv2d(h, p[f"cond.{i}.weight"], p[f"cond.{i}.bias"], stride=cfg.cond_stride))
        g = ad.global_avg_pool(h)
        n = x.shape[0]
        steps = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        g = ad.add(g, ad.sinusoidal_embed(steps, cfg.temb_dim, dtype=x.dtype))
        gamma = ad.dense(g, p["gamma.weight"], p["gamma.bias"])
        nu = ad.dense(g, p["nu.weight"], p["nu.bias"])
        return gamma, nu

    def correct(self, x: Tensor, t, gamma: Tensor = None, nu: Tensor = None) -> Tensor:
        """Color-correct x [N,4,h,w]. Pass (gamma, nu) to hold modulation fixed."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if gamma is None or nu is None:
            gamma, nu = self.cond_features(x, t)
        p = self.params
        f = ad.conv2d(x, p["base.0.weight"], p["base.0.bias"])
        f = ad.relu(ad.modulate(f, gamma, nu))
        f = ad.relu(ad.conv2d(f, p["base.1.weight"], p["base.1.bias"]))
        return ad.conv2d(f, p["base.2.weight"], p["base.2.bias"])

    __call__ = correct

    def apply(self, x: np.ndarray, t: int) -> np.ndarray:
        """Numpy convenience wrapper for sampling."""
        return self.correct(Tensor(x), t).data
