"""Differentiable building blocks with hand-written backward passes.

All functions take and return float64 arrays shaped (frames, dims). Forward
functions return ``(output, cache)``; the matching backward consumes the
cache.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNET_MODES = ("none", "sum", "concat", "diff_concat")


@dataclass(frozen=True)
class CodeLayout:
    """Widths of the code-layer partitions.

    For c-DcAE and pc-DcAE the code is ``[P | S | R]``. For hc-DcAE the first
    code layer is ``[C | R]`` and the second ``[P | S]``.
    """

    p_size: int
    s_size: int = 0
    r_size: int = 0
    c_size: int = 0

    def __post_init__(self):
        if self.p_size < 1:
            raise ValueError("p_size must be >= 1")
        if min(self.s_size, self.r_size, self.c_size) < 0:
            raise ValueError("code sizes must be non-negative")

    @classmethod
    def from_ratio(cls, p_size: int, ratio: float, s_size: int = 0) -> "CodeLayout":
        """R-Code width as ``round(ratio * p_size)``."""
        return cls(p_size, s_size, int(round(ratio * p_size)))

    @property
    def width(self) -> int:
        return self.p_size + self.s_size + self.r_size


@dataclass(frozen=True)
class UNetMode:
    mode: str = "none"
    weight: float = 1.0

    def __post_init__(self):
        if self.mode not in UNET_MODES:
            raise ValueError(f"unknown U-Net mode {self.mode!r}")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("U-Net weight must lie in [0, 1]")

    def out_width(self, dec_width: int, enc_width: int) -> int:
        if self.mode in ("concat", "diff_concat"):
            return dec_width + enc_width
        return dec_width


# --------------------------------------------------------------------------
# Frame-level reshaping


def _splice_index(T: int, offsets) -> np.ndarray:
    offs = np.asarray(offsets, dtype=np.int64)
    if offs.size == 0:
        raise ValueError("offsets must be non-empty")
    return np.clip(np.arange(T)[:, None] + offs[None, :], 0, T - 1)


def splice(x: np.ndarray, offsets) -> np.ndarray:
    """Concatenate ``x[clamp(t + o)]`` over offsets; edges are replicated."""
    T, D = x.shape
    return x[_splice_index(T, offsets)].reshape(T, D * len(offsets))


def splice_backward(grad: np.ndarray, offsets, T: int) -> np.ndarray:
    idx = _splice_index(T, offsets)
    D = grad.shape[1] // len(offsets)
    out = np.zeros((T, D))
    np.add.at(out, idx.ravel(), grad.reshape(-1, D))
    return out


def subsample(seq, factor: int):
    """Keep frames 0, factor, 2*factor, ... ; output length is ceil(T / factor)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return seq[::factor]


def subsample_backward(grad: np.ndarray, factor: int, T: int) -> np.ndarray:
    out = np.zeros((T,) + grad.shape[1:])
    out[::factor] = grad
    return out


# --------------------------------------------------------------------------
# Layers


def tdnnf_forward(x: np.ndarray, A: np.ndarray, B: np.ndarray, b: np.ndarray, offsets):
    """``relu(splice(x) @ A @ B + b)``; A projects into the linear bottleneck."""
    xs = splice(x, offsets)
    if xs.shape[1] != A.shape[0] or A.shape[1] != B.shape[0] or B.shape[1] != b.shape[0]:
        raise ValueError(
            f"shape mismatch: spliced {xs.shape[1]}, A {A.shape}, B {B.shape}, b {b.shape}")
    z = xs @ A
    pre = z @ B + b
    return np.maximum(pre, 0.0), (xs, z, pre, x.shape[0])


def tdnnf_backward(grad_out: np.ndarray, cache, A: np.ndarray, B: np.ndarray, offsets):
    xs, z, pre, T = cache
    g = grad_out * (pre > 0)
    grads = {"B": z.T @ g, "b": g.sum(axis=0)}
    gz = g @ B.T
    grads["A"] = xs.T @ gz
    return splice_backward(gz @ A.T, offsets, T), grads


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, relu: bool):
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: input {x.shape[1]}, W {W.shape}, b {b.shape}")
    pre = x @ W + b
    return (np.maximum(pre, 0.0) if relu else pre), (x, pre, relu)


def affine_backward(grad_out: np.ndarray, cache, W: np.ndarray):
    x, pre, relu = cache
    g = grad_out * (pre > 0) if relu else grad_out
    return g @ W.T, {"W": x.T @ g, "b": g.sum(axis=0)}


def semi_orthogonal_step(A: np.ndarray, nu: float) -> np.ndarray:
    """One step of ``A <- A - nu (A A^T - I) A`` toward ``A A^T = I``."""
    if A.shape[0] > A.shape[1]:
        raise ValueError("semi-orthogonal step needs rows <= cols")
    P = A @ A.T - np.eye(A.shape[0])
    return A - nu * (P @ A)


# --------------------------------------------------------------------------
# Code layer and U-Net


def code_split(h: np.ndarray, sizes) -> tuple[np.ndarray, ...]:
    """Contiguous column slices of widths ``sizes`` (a CodeLayout or a tuple)."""
    if isinstance(sizes, CodeLayout):
        sizes = (sizes.p_size, sizes.s_size, sizes.r_size)
    if h.shape[-1] != sum(sizes):
        raise ValueError(f"code width {h.shape[-1]} does not match layout {tuple(sizes)}")
    bounds = np.cumsum((0,) + tuple(sizes))
    return tuple(h[..., bounds[i]:bounds[i + 1]] for i in range(len(sizes)))


def code_split_backward(grads, sizes, T: int) -> np.ndarray:
    """Gradient of the split w.r.t. the code; missing parts count as zero."""
    if isinstance(sizes, CodeLayout):
        sizes = (sizes.p_size, sizes.s_size, sizes.r_size)
    return np.concatenate([g if g is not None else np.zeros((T, n))
                           for g, n in zip(grads, sizes)], axis=1)


def unet_connect(enc: np.ndarray, dec: np.ndarray, u: UNetMode) -> np.ndarray:
    if u.mode == "none":
        return dec
    if u.mode == "concat":
        return np.concatenate([dec, enc], axis=-1)
    if enc.shape != dec.shape:
        raise ValueError(f"{u.mode} needs equal widths, got {enc.shape} and {dec.shape}")
    if u.mode == "sum":
        return dec + u.weight * enc
    return np.concatenate([dec, u.weight * (enc - dec)], axis=-1)


def unet_backward(grad: np.ndarray, u: UNetMode, dec_width: int):
    """Returns ``(grad_enc, grad_dec)``; grad_enc is None for mode ``none``."""
    if u.mode == "none":
        return None, grad
    if u.mode == "sum":
        return u.weight * grad, grad
    g_dec, g_rest = grad[:, :dec_width], grad[:, dec_width:]
    if u.mode == "concat":
        return g_rest, g_dec
    return u.weight * g_rest, g_dec - u.weight * g_rest


def decoder_forward(code: np.ndarray, layers, out, taps=None, unet: UNetMode = UNetMode()):
    """Fully connected decoder: ``len(layers)`` affine+ReLU layers, then a linear output.

    ``taps[j]``, when not None, is the encoder activation joined to the output
    of hidden layer ``j`` according to ``unet``.
    """
    if not layers:
        raise ValueError("decoder depth must be >= 1")
    taps = taps or [None] * len(layers)
    h = code
    caches = []
    for (W, b), tap in zip(layers, taps):
        d, c = affine_forward(h, W, b, relu=True)
        h = unet_connect(tap, d, unet) if tap is not None else d
        caches.append((c, tap is not None, d.shape[1]))
    y, c_out = affine_forward(h, out[0], out[1], relu=False)
    return y, (caches, c_out)


def decoder_backward(grad: np.ndarray, cache, layers, out, unet: UNetMode = UNetMode()):
    """Returns ``(grad_code, layer_grads, out_grads, tap_grads)``."""
    caches, c_out = cache
    g, out_grads = affine_backward(grad, c_out, out[0])
    layer_grads = [None] * len(layers)
    tap_grads = [None] * len(layers)
    for j in range(len(layers) - 1, -1, -1):
        c, tapped, width = caches[j]
        if tapped:
            tap_grads[j], g = unet_backward(g, unet, width)
        g, layer_grads[j] = affine_backward(g, c, layers[j][0])
    return g, layer_grads, out_grads, tap_grads
