"""Dense float64 layer primitives with a replayable reverse-mode record.

Tensors are plain ``numpy.ndarray`` objects in float64, channel-first
(``c x h x w``). Every primitive optionally appends a :class:`Node` to a
:class:`ComputationRecord`; :func:`vjp` walks that record backwards to pull an
output adjoint back to the input. Records form a chain: each node consumes
the output of the node before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "Node",
    "ComputationRecord",
    "as_tensor",
    "conv2d",
    "relu",
    "maxpool2d",
    "bilinear_sample",
    "bilinear_sample_vjp",
    "vjp",
    "finite_diff",
]


def as_tensor(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float64)


@dataclass(frozen=True)
class Node:
    op: str
    x: np.ndarray
    y: np.ndarray
    params: dict = field(default_factory=dict)


class ComputationRecord:
    """Ordered list of executed primitives with value snapshots."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def append(self, node: Node) -> None:
        if self.nodes and self.nodes[-1].y.shape != node.x.shape:
            raise ShapeError(
                f"record is a chain: node '{node.op}' consumes shape {node.x.shape} "
                f"but previous output has shape {self.nodes[-1].y.shape}"
            )
        if not (self.nodes and node.x is self.nodes[-1].y):
            node = replace(node, x=node.x.copy())
        node.x.flags.writeable = False
        node.y.flags.writeable = False
        self.nodes.append(node)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.nodes[0].x.shape

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.nodes[-1].y.shape

    def __len__(self) -> int:
        return len(self.nodes)


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0, record: ComputationRecord | None = None):
    """Cross-correlation of a ``c_in x h x w`` input with a ``c_out x c_in x k x k`` kernel."""
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    bias = as_tensor(bias)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be c_in x h x w, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d kernel must be c_out x c_in x k x k, got shape {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d input has {x.shape[0]} channels but kernel expects c_in={c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias has shape {bias.shape}, expected ({c_out},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    h, w = x.shape[1:]
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"kernel size {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")

    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((c_out, ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            out += np.tensordot(kernel[:, :, i, j], patch, axes=(1, 0))
    out += bias[:, None, None]
    if record is not None:
        record.append(Node("conv2d", x, out, {"kernel": kernel, "stride": stride, "padding": padding}))
    return out


def _conv2d_backward(node: Node, gy: np.ndarray) -> np.ndarray:
    kernel, s, p = node.params["kernel"], node.params["stride"], node.params["padding"]
    k = kernel.shape[2]
    h, w = node.x.shape[1:]
    ho, wo = gy.shape[1:]
    gxp = np.zeros((node.x.shape[0], h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            gxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += np.tensordot(
                kernel[:, :, i, j], gy, axes=(0, 0)
            )
    return gxp[:, p : p + h, p : p + w]


def relu(x, record: ComputationRecord | None = None):
    x = as_tensor(x)
    out = np.maximum(x, 0.0)
    if record is not None:
        record.append(Node("relu", x, out))
    return out


def _relu_backward(node: Node, gy: np.ndarray) -> np.ndarray:
    return np.where(node.x > 0, gy, 0.0)


def maxpool2d(x, window: int, stride: int, record: ComputationRecord | None = None):
    """Per-window maximum; backward routes to the first maximal element in row-major order."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d input must be c x h x w, got shape {x.shape}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than spatial extent {h}x{w}")
    views = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = views.shape[1:3]
    flat = views.reshape(c, ho, wo, window * window)
    arg = np.argmax(flat, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if record is not None:
        rows = np.arange(ho)[:, None] * stride + arg // window
        cols = np.arange(wo)[None, :] * stride + arg % window
        record.append(Node("maxpool2d", x, out, {"rows": rows, "cols": cols}))
    return out


def _maxpool2d_backward(node: Node, gy: np.ndarray) -> np.ndarray:
    gx = np.zeros_like(node.x)
    c = node.x.shape[0]
    chan = np.broadcast_to(np.arange(c)[:, None, None], gy.shape)
    np.add.at(gx, (chan, node.params["rows"], node.params["cols"]), gy)
    return gx


def _bilinear_coords(h: int, w: int, location):
    u, v = float(location[0]), float(location[1])
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise ValueError(f"readout location ({u}, {v}) outside the unit square")
    gx, gy = u * (w - 1), v * (h - 1)
    x0 = min(int(np.floor(gx)), max(w - 2, 0))
    y0 = min(int(np.floor(gy)), max(h - 2, 0))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    return x0, x1, gx - x0, y0, y1, gy - y0


def bilinear_sample(featmap, location, record: ComputationRecord | None = None):
    """Sample ``(..., c, h, w)`` at ``location = (u, v)``; ``u`` runs along width, ``v`` along height."""
    featmap = as_tensor(featmap)
    if featmap.ndim < 2:
        raise ShapeError(f"feature map needs at least 2 dims, got shape {featmap.shape}")
    h, w = featmap.shape[-2:]
    x0, x1, fx, y0, y1, fy = _bilinear_coords(h, w, location)
    out = (
        (1 - fy) * (1 - fx) * featmap[..., y0, x0]
        + (1 - fy) * fx * featmap[..., y0, x1]
        + fy * (1 - fx) * featmap[..., y1, x0]
        + fy * fx * featmap[..., y1, x1]
    )
    if record is not None:
        record.append(Node("bilinear_sample", featmap, out, {"location": (float(location[0]), float(location[1]))}))
    return out


def bilinear_sample_vjp(featmap, location, g, want_map: bool = True):
    """Adjoints of :func:`bilinear_sample` w.r.t. the feature map and ``(u, v)``.

    With ``want_map=False`` the feature-map adjoint is skipped and returned as None.
    """
    featmap = as_tensor(featmap)
    g = as_tensor(g)
    h, w = featmap.shape[-2:]
    if g.shape != featmap.shape[:-2]:
        raise ShapeError(f"adjoint shape {g.shape} does not match sample shape {featmap.shape[:-2]}")
    x0, x1, fx, y0, y1, fy = _bilinear_coords(h, w, location)
    gmap = None
    if want_map:
        gmap = np.zeros_like(featmap)
        gmap[..., y0, x0] += (1 - fy) * (1 - fx) * g
        gmap[..., y0, x1] += (1 - fy) * fx * g
        gmap[..., y1, x0] += fy * (1 - fx) * g
        gmap[..., y1, x1] += fy * fx * g
    f00, f01 = featmap[..., y0, x0], featmap[..., y0, x1]
    f10, f11 = featmap[..., y1, x0], featmap[..., y1, x1]
    # a degenerate axis (size 1) carries no slope
    du = (w - 1) * np.sum(g * ((1 - fy) * (f01 - f00) + fy * (f11 - f10))) if w > 1 else 0.0
    dv = (h - 1) * np.sum(g * ((1 - fx) * (f10 - f00) + fx * (f11 - f01))) if h > 1 else 0.0
    return gmap, np.array([du, dv])


def _bilinear_backward(node: Node, gy: np.ndarray) -> np.ndarray:
    gmap, _ = bilinear_sample_vjp(node.x, node.params["location"], gy)
    return gmap


_BACKWARD: dict[str, Callable[[Node, np.ndarray], np.ndarray]] = {
    "conv2d": _conv2d_backward,
    "relu": _relu_backward,
    "maxpool2d": _maxpool2d_backward,
    "bilinear_sample": _bilinear_backward,
}


def vjp(record: ComputationRecord, output_adjoint) -> np.ndarray:
    """Pull ``output_adjoint`` back through every node of ``record``."""
    if not record.nodes:
        raise ValueError("empty computation record")
    g = as_tensor(output_adjoint)
    if g.shape != record.output_shape:
        raise ShapeError(f"adjoint shape {g.shape} does not match recorded output {record.output_shape}")
    for node in reversed(record.nodes):
        g = _BACKWARD[node.op](node, g)
    return g


def finite_diff(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = as_tensor(x).copy()
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = float(f(x))
        flat[idx] = orig - step
        fm = float(f(x))
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2 * step)
    return grad
