"""Dense NCHW tensors with reverse-mode automatic differentiation.

The primitive set is closed: every op below registers an exact adjoint and
there is no implicit broadcasting. Shapes that would need broadcasting get a
dedicated primitive instead (``add_channel``, ``modulate``, field biases in
``conv2d``), which keeps each adjoint small enough to check exhaustively.

Data defaults to float32. Ops preserve the dtype of their inputs, so the
same graph can be evaluated in float64 for finite-difference checks.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "backward",
    "conv2d",
    "channel_affine",
    "modulate",
    "add_channel",
    "relu",
    "dense",
    "global_avg_pool",
    "avg_pool2",
    "upsample_nearest2",
    "add",
    "sub",
    "mul",
    "scale",
    "concat_channels",
    "sinusoidal_embed",
    "mse",
    "mae",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's shape rule."""


class Tensor:
    """An n-d array node in a recorded computation.

    Leaves created by the user carry ``requires_grad``; op outputs record their
    parents and a closure mapping the upstream gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_adjoint")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op: Optional[str] = None
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Optional[Callable] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        op = f" op={self.op}" if self.op else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}{op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], adjoint: Callable) -> Tensor:
    """Wrap ``out`` and attach the graph edge if any parent needs gradients."""
    t = Tensor(out)
    t.op = op
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._adjoint = adjoint
    return t


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_rank(op: str, t: Tensor, rank: int, what: str = "input") -> None:
    if t.data.ndim != rank:
        raise ShapeError(f"{op}: {what} must be rank {rank}, got shape {t.shape}")


class Graph:
    """Topologically ordered view of the ops that produced a tensor."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion depth would scale with network depth
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def ops(self) -> list[str]:
        """Names of recorded primitive applications, inputs first."""
        return [n.op for n in self.nodes if n.op is not None]

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents]

    def __len__(self) -> int:
        return len(self.ops())


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    Returns the mapping ``id(leaf) -> gradient`` as a convenience. Leaves not
    reached from ``loss`` are left untouched.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                leaf_grads[id(node)] = node.grad
            continue
        for parent, pg in zip(node._parents, node._adjoint(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node.op}: adjoint shape {pg.shape} != value shape {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaf_grads


# ---------------------------------------------------------------------------
# convolution


def _pad_amount(pad: str, k: int) -> int:
    if pad == "zero":
        return k // 2
    if pad == "valid":
        return 0
    raise ValueError(f"unknown pad mode {pad!r} (expected 'zero' or 'valid')")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather patches as a (Cin*kh*kw, N*ho*wo) matrix.

    Rows are ordered (c, i, j) to match ``kernel.reshape(Cout, -1)``; keeping
    output pixels on the fast axis makes every copy contiguous along W.
    """
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: str = "zero") -> Tensor:
    """Cross-correlate ``x`` [N,Cin,H,W] with ``kernel`` [Cout,Cin,kh,kw].

    ``bias`` is either per-channel [Cout] or a full field [Cout,H',W'] (the
    latter is what a reparameterized CFI+conv needs at zero-padded borders).
    """
    _check_rank("conv2d", x, 4)
    _check_rank("conv2d", kernel, 4, "kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel expects {kcin} input channels, input has {cin}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d: kernel size must be 1 or 3, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    ph, pw = _pad_amount(pad, kh), _pad_amount(pad, kw)
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for {kh}x{kw} {pad} conv")
    if bias is not None:
        if bias.shape not in ((cout,), (cout, ho, wo)):
            raise ShapeError(f"conv2d: bias shape {bias.shape} must be ({cout},) or ({cout}, {ho}, {wo})")

    pointwise = kh == 1 and kw == 1 and stride == 1
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(cin, n * h * w)
        xp_shape = x.shape
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
        xp_shape = xp.shape
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(cout, -1)
    out = (kmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        if bias.data.ndim == 1:
            out = out + bias.data[None, :, None, None]
        else:
            out = out + bias.data[None]
    else:
        out = np.ascontiguousarray(out)

    def adjoint(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            if bias.data.ndim == 1:
                gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
            else:
                gb = g.sum(axis=0, dtype=np.float64).astype(g.dtype)
        gx = None
        if x.requires_grad:
            dcols = kmat.T @ g2
            if pointwise:
                gx = dcols.reshape(cin, n, h, w).transpose(1, 0, 2, 3)
            else:
                dcols = dcols.reshape(cin, kh, kw, n, ho, wo)
                gxp = np.zeros((cin, n) + xp_shape[2:], dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, i, j]
                gx = gxp[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", out, parents, adjoint)


# ---------------------------------------------------------------------------
# per-channel affine forms


def channel_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out[n,c,h,w] = w[c] * x[n,c,h,w] + b[c]."""
    _check_rank("channel_affine", x, 4)
    c = x.shape[1]
    if w.shape != (c,) or b.shape != (c,):
        raise ShapeError(f"channel_affine: expected w,b of shape ({c},), got {w.shape}, {b.shape}")
    out = x.data * w.data[None, :, None, None] + b.data[None, :, None, None]

    def adjoint(g):
        gx = g * w.data[None, :, None, None] if x.requires_grad else None
        gw = (g * x.data).sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if b.requires_grad else None
        return gx, gw, gb

    return _record("channel_affine", out, (x, w, b), adjoint)


def modulate(x: Tensor, gamma: Tensor, nu: Tensor) -> Tensor:
    """Per-sample channel modulation: out[n,c,h,w] = gamma[n,c] * x + nu[n,c]."""
    _check_rank("modulate", x, 4)
    n, c = x.shape[:2]
    if gamma.shape != (n, c) or nu.shape != (n, c):
        raise ShapeError(f"modulate: expected gamma,nu of shape ({n}, {c}), got {gamma.shape}, {nu.shape}")
    out = x.data * gamma.data[:, :, None, None] + nu.data[:, :, None, None]

    def adjoint(g):
        gx = g * gamma.data[:, :, None, None] if x.requires_grad else None
        gg = (g * x.data).sum(axis=(2, 3), dtype=np.float64).astype(g.dtype) if gamma.requires_grad else None
        gn = g.sum(axis=(2, 3), dtype=np.float64).astype(g.dtype) if nu.requires_grad else None
        return gx, gg, gn

    return _record("modulate", out, (x, gamma, nu), adjoint)


def add_channel(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-sample channel vector v[N,C] to every pixel of x[N,C,H,W]."""
    _check_rank("add_channel", x, 4)
    if v.shape != x.shape[:2]:
        raise ShapeError(f"add_channel: vector shape {v.shape} must equal {x.shape[:2]}")
    out = x.data + v.data[:, :, None, None]

    def adjoint(g):
        gv = g.sum(axis=(2, 3), dtype=np.float64).astype(g.dtype) if v.requires_grad else None
        return g, gv

    return _record("add_channel", out, (x, v), adjoint)


# ---------------------------------------------------------------------------
# pointwise and structural


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return _record("relu", out, (x,), lambda g: (g * mask,))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[N,F] @ w[F,O] + b[O]."""
    _check_rank("dense", x, 2)
    _check_rank("dense", w, 2, "weight")
    if w.shape[0] != x.shape[1] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    out = x.data @ w.data + b.data[None, :]

    def adjoint(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0, dtype=np.float64).astype(g.dtype) if b.requires_grad else None
        return gx, gw, gb

    return _record("dense", out, (x, w, b), adjoint)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    _check_rank("global_avg_pool", x, 4)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def adjoint(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),)

    return _record("global_avg_pool", out, (x,), adjoint)


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean; H and W must be even."""
    _check_rank("avg_pool2", x, 4)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=np.float64).astype(x.dtype)

    def adjoint(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3),)

    return _record("avg_pool2", out, (x,), adjoint)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 replication along H and W."""
    _check_rank("upsample_nearest2", x, 4)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def adjoint(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample_nearest2", out, (x,), adjoint)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    return _record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)
    return _record("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate [N,Ci,H,W] tensors along the channel axis."""
    if not tensors:
        raise ShapeError("concat_channels: need at least one tensor")
    for t in tensors:
        _check_rank("concat_channels", t, 4)
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {tensors[0].shape}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def adjoint(g):
        return tuple(g[:, bounds[k] : bounds[k + 1]] for k in range(len(tensors)))

    return _record("concat_channels", out, tuple(tensors), adjoint)


def sinusoidal_embed(t: Iterable[float], dim: int, dtype=np.float32) -> Tensor:
    """Transformer-style timestep embedding, [N] -> [N,dim] (constant node)."""
    if dim < 2 or dim % 2:
        raise ShapeError(f"sinusoidal_embed: dim must be even and >= 2, got {dim}")
    steps = np.asarray(list(t) if not np.isscalar(t) else [t], dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = steps[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)
    t_out = Tensor(out)
    t_out.op = "sinusoidal_embed"
    return t_out


# ---------------------------------------------------------------------------
# scalar losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    """mean((a - b)^2) as a scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mse", a, b)
    diff = a.data.astype(np.float64) - b.data
    out = np.asarray(np.mean(diff * diff), dtype=a.dtype)
    k = 2.0 / diff.size

    def adjoint(g):
        gd = (diff * (k * float(g))).astype(a.dtype)
        return gd, -gd

    return _record("mse", out, (a, b), adjoint)


def mae(a: Tensor, b: Tensor) -> Tensor:
    """mean|a - b| as a scalar tensor (subgradient 0 at ties)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mae", a, b)
    diff = a.data.astype(np.float64) - b.data
    out = np.asarray(np.mean(np.abs(diff)), dtype=a.dtype)
    k = 1.0 / diff.size

    def adjoint(g):
        gd = (np.sign(diff) * (k * float(g))).astype(a.dtype)
        return gd, -gd

    return _record("mae", out, (a, b), adjoint)
