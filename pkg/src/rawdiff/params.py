"""Named parameter storage shared by the denoiser and the color corrector."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .tensor_ad import Tensor


class ParamStore:
    """Ordered mapping of parameter name to leaf :class:`Tensor`."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if k not in self.params:
                continue
            cur = self.params[k]
            if cur.shape != tuple(v.shape):
                raise ValueError(f"{k}: shape {tuple(v.shape)} != expected {cur.shape}")
            cur.data = np.array(v, dtype=cur.dtype)

    def astype(self, dtype) -> None:
        """Cast every parameter in place (float64 is used for gradient checks)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 2.0) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(np.float32)
