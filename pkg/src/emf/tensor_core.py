"""Dense float32 kernels for single-sample (C, H, W) tensors.

Every optimized kernel here has a slow reference twin (``*_reference``) that
follows the textbook definition in float64 and is used as a test oracle.

Accumulation order is fixed per output element: taps are visited row-major
over the kernel window, and for dense convolutions each tap contributes one
matrix product. Results therefore do not depend on how many threads the BLAS
library uses for the independent output rows.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from emf.errors import ShapeError

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_conv_counter: contextvars.ContextVar[Optional[list]] = contextvars.ContextVar("conv_counter", default=None)


@dataclass(frozen=True)
class ConvParams:
    """Convolution weights ``(C_out, C_in / groups, k_h, k_w)`` and bias ``(C_out,)``.

    ``padding=None`` means ``k // 2`` on each side.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: Optional[int] = None
    groups: int = 1

    @property
    def kernel(self) -> int:
        return int(self.weight.shape[-1])

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding

    @property
    def in_channels(self) -> int:
        return int(self.weight.shape[1]) * self.groups

    @property
    def out_channels(self) -> int:
        return int(self.weight.shape[0])

    def with_(self, **kw) -> "ConvParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])

    def scale(self) -> np.ndarray:
        return (self.gamma / np.sqrt(self.var + self.eps)).astype(np.float32)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "LstmState":
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32))

    def copy(self) -> "LstmState":
        return LstmState(self.h.copy(), self.c.copy())


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@contextlib.contextmanager
def count_convs():
    """Count ``conv2d`` invocations made in the current context.

    Yields a one-element list whose entry is the running count.
    """
    counter = [0]
    token = _conv_counter.set(counter)
    try:
        yield counter
    finally:
        _conv_counter.reset(token)


def _check_conv(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects a (C, H, W) input, got shape {x.shape}")
    w = p.weight
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d expects a square (C_out, C_in/g, k, k) weight, got shape {w.shape}")
    if p.groups < 1 or p.stride < 1 or p.pad < 0:
        raise ShapeError(f"invalid groups/stride/padding {p.groups}/{p.stride}/{p.pad}")
    if w.shape[0] % p.groups or x.shape[0] != w.shape[1] * p.groups:
        raise ShapeError(
            f"input shape {x.shape} incompatible with weight shape {w.shape} at groups={p.groups}"
        )
    if p.bias is not None and p.bias.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {p.bias.shape} does not match weight shape {w.shape}")
    k = p.kernel
    ho = conv_output_size(x.shape[1], k, p.stride, p.pad)
    wo = conv_output_size(x.shape[2], k, p.stride, p.pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input shape {x.shape} too small for weight shape {w.shape} with padding {p.pad}")
    return ho, wo


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def _phases(xp: np.ndarray, stride: int) -> dict:
    """Split a padded map into ``stride**2`` contiguous polyphase components."""
    if stride == 1:
        return {(0, 0): xp}
    return {
        (a, b): np.ascontiguousarray(xp[:, a::stride, b::stride])
        for a in range(stride)
        for b in range(stride)
    }


def _conv_depthwise(xp, weight, stride, ho, wo):
    c, _, k, _ = weight.shape
    out = np.zeros((c, ho, wo), np.float32)
    tmp = np.empty_like(out)
    taps = np.ascontiguousarray(weight[:, 0].transpose(1, 2, 0))[..., None, None]
    phases = _phases(xp, stride)
    for i in range(k):
        for j in range(k):
            ph = phases[i % stride, j % stride]
            i0, j0 = i // stride, j // stride
            np.multiply(ph[:, i0:i0 + ho, j0:j0 + wo], taps[i, j], out=tmp)
            out += tmp
    return out


def _conv_dense(xp, weight, stride, ho, wo):
    cout, cin, k, _ = weight.shape
    if k == 1 and stride == 1:
        return (weight.reshape(cout, cin) @ xp.reshape(cin, -1)).reshape(cout, ho, wo)
    taps = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))
    phases = _phases(xp, stride)
    out = np.zeros((cout, ho * wo), np.float32)
    for i in range(k):
        for j in range(k):
            ph = phases[i % stride, j % stride]
            i0, j0 = i // stride, j // stride
            cols = np.ascontiguousarray(ph[:, i0:i0 + ho, j0:j0 + wo]).reshape(cin, -1)
            out += taps[i, j] @ cols
    return out.reshape(cout, ho, wo)


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """2-D cross-correlation of a ``(C_in, H, W)`` map, returning float32."""
    ho, wo = _check_conv(x, p)
    counter = _conv_counter.get()
    if counter is not None:
        counter[0] += 1
    x = np.asarray(x, np.float32)
    weight = np.asarray(p.weight, np.float32)
    xp = _pad(x, p.pad)
    cin = x.shape[0]
    cout = weight.shape[0]
    if p.groups == 1:
        out = _conv_dense(xp, weight, p.stride, ho, wo)
    elif p.groups == cin and weight.shape[1] == 1 and cout == cin:
        out = _conv_depthwise(xp, weight, p.stride, ho, wo)
    else:
        gi, go = cin // p.groups, cout // p.groups
        out = np.concatenate(
            [
                _conv_dense(xp[g * gi:(g + 1) * gi], weight[g * go:(g + 1) * go], p.stride, ho, wo)
                for g in range(p.groups)
            ]
        )
    if p.bias is not None:
        out += np.asarray(p.bias, np.float32)[:, None, None]
    return out


def conv2d_reference(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Direct-definition convolution in float64, one output element at a time."""
    ho, wo = _check_conv(x, p)
    x = np.asarray(x, np.float64)
    w = np.asarray(p.weight, np.float64)
    cout, cin_g, k, _ = w.shape
    go = cout // p.groups
    xp = np.pad(x, ((0, 0), (p.pad, p.pad), (p.pad, p.pad)))
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        g = co // go
        for oy in range(ho):
            for ox in range(wo):
                y0, x0 = oy * p.stride, ox * p.stride
                patch = xp[g * cin_g:(g + 1) * cin_g, y0:y0 + k, x0:x0 + k]
                acc = float(np.sum(w[co] * patch))
                out[co, oy, ox] = acc + (0.0 if p.bias is None else float(p.bias[co]))
    return out


def batchnorm_infer(x: np.ndarray, bn: BnParams) -> np.ndarray:
    """Inference-mode batch norm: ``gamma * (x - mean) / sqrt(var + eps) + beta``."""
    if x.ndim != 3 or x.shape[0] != bn.channels:
        raise ShapeError(f"batchnorm over {bn.channels} channels got input shape {x.shape}")
    for name in ("beta", "mean", "var"):
        if getattr(bn, name).shape != bn.gamma.shape:
            raise ShapeError(f"batchnorm {name} shape {getattr(bn, name).shape} != gamma shape {bn.gamma.shape}")
    scale = bn.scale()
    shift = (bn.beta - bn.mean * scale).astype(np.float32)
    return x * scale[:, None, None] + shift[:, None, None]


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = np.asarray(x, np.float32)
    inner = np.float32(GELU_C) * (x + np.float32(GELU_A) * x * x * x)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large |x|
    return np.float32(0.5) * (np.float32(1.0) + np.tanh(np.float32(0.5) * x))


def nearest_upsample2x(x: np.ndarray) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) input, got shape {x.shape}")
    return x.repeat(2, axis=1).repeat(2, axis=2)


def pixel_lstm_step(
    x: np.ndarray, state: Optional[LstmState], gates: tuple[ConvParams, ConvParams]
) -> tuple[np.ndarray, LstmState]:
    """One LSTM step applied independently at every pixel.

    ``gates`` holds the 1x1 input-to-gates and hidden-to-gates convolutions,
    each producing ``4C`` channels ordered ``[i, f, g, o]``.
    """
    wx, wh = gates
    c_ch = x.shape[0]
    if state is None:
        state = LstmState.zeros(x.shape)
    if state.h.shape != x.shape or state.c.shape != x.shape:
        raise ShapeError(f"LSTM state shape {state.h.shape}/{state.c.shape} does not match input {x.shape}")
    if wx.out_channels != 4 * c_ch or wh.out_channels != 4 * c_ch or wx.kernel != 1 or wh.kernel != 1:
        raise ShapeError(
            f"LSTM gates must be 1x1 convs producing {4 * c_ch} channels, got {wx.weight.shape} and {wh.weight.shape}"
        )
    z = conv2d(x, wx) + conv2d(state.h, wh)
    i, f, g, o = np.split(z, 4, axis=0)
    i, f, o = sigmoid(i), sigmoid(f), sigmoid(o)
    g = np.tanh(g)
    c = f * state.c + i * g
    h = o * np.tanh(c)
    return h, LstmState(h, c)
