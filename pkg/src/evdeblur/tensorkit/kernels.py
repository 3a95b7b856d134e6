"""Convolution kernels: standard, modulated deformable, sampling, ConvLSTM.

Forward passes are vectorized (tap-loop im2col plus one matmul); backward
closures are hand-derived.  All sampling treats positions outside the input
as zero, matching zero-padding convolution semantics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from .core import (
    Tensor,
    _node,
    add,
    concat_channels,
    logistic,
    mul,
    slice_channels,
    tanh,
)


def _conv_geometry(x_shape, w_shape, stride, padding):
    n, cin, h, w = x_shape
    cout, cin_w, kh, kw = w_shape
    if kh != kw:
        raise ShapeError(f"kernels must be square, got {(kh, kw)}")
    if kh % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}")
    if cin != cin_w:
        raise ShapeError(f"input channels {cin} != weight channels {cin_w}")
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (w + 2 * padding - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise ShapeError(f"empty output for input {(h, w)}, kernel {kh}, padding {padding}")
    return n, cin, h, w, cout, kh, hout, wout


def _padded(arr: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return arr
    n, c, h, w = arr.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    out[:, :, padding : padding + h, padding : padding + w] = arr
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, hout: int, wout: int) -> np.ndarray:
    """(N, Cin*K*K, Hout*Wout) patch matrix gathered from the padded input."""
    n, cin = xp.shape[:2]
    cols = np.empty((n, cin, k, k, hout, wout), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = xp[
                :, :, ky : ky + stride * hout : stride, kx : kx + stride * wout : stride
            ]
    return cols.reshape(n, cin * k * k, hout * wout)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation with zero padding; NCHW input, (Cout,Cin,K,K) weight.

    The im2col buffer is rebuilt inside backward instead of captured, so a
    recorded graph holds activations only.
    """
    n, cin, h, w, cout, k, hout, wout = _conv_geometry(
        x.data.shape, weight.data.shape, stride, padding
    )
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({cout},)")
    cols = _im2col(_padded(x.data, padding), k, stride, hout, wout)
    out = np.matmul(weight.data.reshape(cout, cin * k * k), cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, hout, wout)
    del cols

    def bw(g):
        g2 = g.reshape(n, cout, hout * wout)
        if weight.requires_grad:
            cols2 = _im2col(_padded(x.data, padding), k, stride, hout, wout)
            gw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(cout, cin, k, k))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(weight.data.reshape(cout, -1).T, g2).reshape(
                n, cin, k, k, hout, wout
            )
            gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=np.float64)
            for ky in range(k):
                for kx in range(k):
                    gxp[
                        :,
                        :,
                        ky : ky + stride * hout : stride,
                        kx : kx + stride * wout : stride,
                    ] += gcols[:, :, ky, kx]
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            x.accumulate_grad(gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


# ---------------------------------------------------------------------------
# Modulated deformable convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeformConvParams:
    """Bundle of everything a deformable conv needs besides its input.

    offsets carries 2*K*K channels ordered (dy_1, dx_1, ..., dy_KK, dx_KK);
    mask carries K*K channels in [0, 1]; both live at output resolution.
    """

    weight: Tensor
    offsets: Tensor
    mask: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int | None = None

    def __post_init__(self):
        k = self.weight.data.shape[2]
        if k % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {k}")
        if self.offsets.data.shape[1] != 2 * k * k:
            raise ShapeError(
                f"offsets need {2 * k * k} channels, got {self.offsets.data.shape[1]}"
            )
        if self.mask.data.shape[1] != k * k:
            raise ShapeError(f"mask needs {k * k} channels, got {self.mask.data.shape[1]}")
        if np.any(self.mask.data < 0.0) or np.any(self.mask.data > 1.0):
            raise ShapeError("mask values must lie in [0, 1]")

    def apply(self, x: Tensor) -> Tensor:
        return modulated_deform_conv2d(
            x, self.weight, self.offsets, self.mask, self.bias,
            stride=self.stride, padding=self.padding,
        )


def modulated_deform_conv2d(
    x: Tensor,
    weight: Tensor,
    offsets: Tensor,
    mask: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int | None = None,
) -> Tensor:
    """Deformable conv: each tap samples at its grid point plus a learned
    offset (bilinear, zero outside) and is weighted by a learned mask.

    offsets has 2*K*K channels ordered (dy_1, dx_1, ..., dy_KK, dx_KK);
    mask has K*K channels; both share the output's spatial dims.
    """
    if padding is None:
        padding = weight.data.shape[2] // 2
    n, cin, h, w, cout, k, hout, wout = _conv_geometry(
        x.data.shape, weight.data.shape, stride, padding
    )
    kk = k * k
    if offsets.data.shape != (n, 2 * kk, hout, wout):
        raise ShapeError(
            f"offsets shape {offsets.data.shape} != {(n, 2 * kk, hout, wout)}"
        )
    if mask.data.shape != (n, kk, hout, wout):
        raise ShapeError(f"mask shape {mask.data.shape} != {(n, kk, hout, wout)}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({cout},)")

    p = hout * wout

    def sample_positions():
        oy, ox = np.divmod(np.arange(p), wout)
        ky, kx = np.divmod(np.arange(kk), k)
        # base sampling grid before offsets, one row per tap
        base_y = (oy[None, :] * stride - padding) + ky[:, None]  # (KK, P)
        base_x = (ox[None, :] * stride - padding) + kx[:, None]
        off = offsets.data.reshape(n, kk, 2, p)
        py = base_y[None] + off[:, :, 0]  # (N, KK, P)
        px = base_x[None] + off[:, :, 1]
        y0 = np.floor(py).astype(np.int64)
        x0 = np.floor(px).astype(np.int64)
        fy = py - y0
        fx = px - x0
        corners = []
        for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
            yc, xc = y0 + dy, x0 + dx
            valid = ((yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)).astype(np.float64)
            idx = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
            wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
            corners.append((idx, valid, wgt))
        return corners, fy, fx

    def gather(b, corners):
        """Corner values for batch item b: four (Cin, KK, P) arrays."""
        xflat = x.data.reshape(n, cin, h * w)
        return [xflat[b][:, idx[b]] * valid[b][None] for idx, valid, _ in corners]

    corners, _, _ = sample_positions()
    mk = mask.data.reshape(n, kk, p)
    wmat = weight.data.reshape(cout, cin * kk)
    out = np.empty((n, cout, p), dtype=np.float64)
    for b in range(n):
        acc = np.zeros((cin, kk, p), dtype=np.float64)
        for v, (_, _, wgt) in zip(gather(b, corners), corners):
            acc += v * wgt[b][None]
        out[b] = wmat @ ((acc * mk[b][None]).reshape(cin * kk, p))
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, cout, hout, wout)
    del corners  # sampling state is recomputed in backward to keep nodes small

    def bw(g):
        g2 = g.reshape(n, cout, p)
        corners, fy, fx = sample_positions()
        need_x = x.requires_grad
        need_off = offsets.requires_grad
        gw = np.zeros((cout, cin * kk), dtype=np.float64) if weight.requires_grad else None
        gm = np.zeros((n, kk, p), dtype=np.float64) if mask.requires_grad else None
        gx = np.zeros((n, cin, h * w), dtype=np.float64) if need_x else None
        goff = np.zeros((n, kk, 2, p), dtype=np.float64) if need_off else None
        chan_base = (np.arange(cin) * (h * w))[:, None, None]
        wmat_t = weight.data.reshape(cout, cin * kk).T
        for b in range(n):
            vals = gather(b, corners)
            sampled = np.zeros((cin, kk, p), dtype=np.float64)
            for v, (_, _, wgt) in zip(vals, corners):
                sampled += v * wgt[b][None]
            gcols = (wmat_t @ g2[b]).reshape(cin, kk, p)
            if gw is not None:
                gw += g2[b] @ (sampled * mk[b][None]).reshape(cin * kk, p).T
            if gm is not None:
                gm[b] = np.sum(gcols * sampled, axis=0)
            if not (need_x or need_off):
                continue
            gval = gcols * mk[b][None]  # d(out)/d(sampled value)
            if need_x:
                for idx, valid, wgt in corners:
                    contrib = gval * (valid[b] * wgt[b])[None]
                    flat_idx = (chan_base + idx[b][None]).ravel()
                    gx[b] += np.bincount(
                        flat_idx, weights=contrib.ravel(), minlength=cin * h * w
                    ).reshape(cin, h * w)
            if need_off:
                v00, v01, v10, v11 = vals
                dfy = (v10 - v00) * (1.0 - fx[b])[None] + (v11 - v01) * fx[b][None]
                dfx = (v01 - v00) * (1.0 - fy[b])[None] + (v11 - v10) * fy[b][None]
                goff[b, :, 0] = np.sum(gval * dfy, axis=0)
                goff[b, :, 1] = np.sum(gval * dfx, axis=0)
        if gw is not None:
            weight.accumulate_grad(gw.reshape(cout, cin, k, k))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=(0, 2)))
        if gm is not None:
            mask.accumulate_grad(gm.reshape(n, kk, hout, wout))
        if need_x:
            x.accumulate_grad(gx.reshape(n, cin, h, w))
        if need_off:
            offsets.accumulate_grad(goff.reshape(n, 2 * kk, hout, wout))

    parents = [x, weight, offsets, mask] + ([bias] if bias is not None else [])
    return _node(out, tuple(parents), bw)


# ---------------------------------------------------------------------------
# Bilinear point sampling
# ---------------------------------------------------------------------------

def bilinear_sample(x: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Sample x (NCHW) at fractional points; returns (N, C, P).

    Out-of-support neighbors contribute zero.  The coordinate gradient is
    the analytic bilinear derivative, one-sided at integer lattice points.
    """
    if x.data.ndim != 4:
        raise ShapeError("bilinear_sample expects a 4-d NCHW tensor")
    if ys.data.shape != xs.data.shape or ys.data.ndim != 1:
        raise ShapeError("coordinates must be equal-length 1-d arrays")
    n, c, h, w = x.data.shape
    p = ys.data.size
    y0 = np.floor(ys.data).astype(np.int64)
    x0 = np.floor(xs.data).astype(np.int64)
    fy = ys.data - y0
    fx = xs.data - x0
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yc, xc = y0 + dy, x0 + dx
        valid = ((yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)).astype(np.float64)
        idx = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
        wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
        corners.append((idx, valid, wgt))
    xflat = x.data.reshape(n, c, h * w)
    vals = [xflat[:, :, idx] * valid[None, None] for idx, valid, _ in corners]
    out = sum(v * wgt[None, None] for v, (_, _, wgt) in zip(vals, corners))

    def bw(g):
        if x.requires_grad:
            gx = np.zeros((n, c, h * w))
            for (idx, valid, wgt), _v in zip(corners, vals):
                contrib = g * (valid * wgt)[None, None]
                flat = (
                    np.arange(n * c)[:, None] * (h * w) + idx[None, :]
                ).ravel()
                gx += np.bincount(
                    flat, weights=contrib.reshape(n * c, p).ravel(), minlength=n * c * h * w
                ).reshape(n, c, h * w)
            x.accumulate_grad(gx.reshape(n, c, h, w))
        if ys.requires_grad or xs.requires_grad:
            v00, v01, v10, v11 = vals
            dfy = (v10 - v00) * (1.0 - fx)[None, None] + (v11 - v01) * fx[None, None]
            dfx = (v01 - v00) * (1.0 - fy)[None, None] + (v11 - v10) * fy[None, None]
            if ys.requires_grad:
                ys.accumulate_grad(np.sum(g * dfy, axis=(0, 1)))
            if xs.requires_grad:
                xs.accumulate_grad(np.sum(g * dfx, axis=(0, 1)))

    return _node(out, (x, ys, xs), bw)


# ---------------------------------------------------------------------------
# ConvLSTM cell
# ---------------------------------------------------------------------------

def convlstm_cell(
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    gate_weight: Tensor,
    gate_bias: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """One no-peephole ConvLSTM step.

    gate_weight is (4E, Cx+E, K, K) producing channels ordered (i, f, o, g):
    c = f*c_prev + i*tanh_gate, h = o*tanh(c).
    """
    if x.data.shape[2:] != h_prev.data.shape[2:] or x.data.shape[2:] != c_prev.data.shape[2:]:
        raise ShapeError("state and input spatial dims differ")
    e = h_prev.data.shape[1]
    if gate_weight.data.shape[0] != 4 * e:
        raise ShapeError(
            f"gate weight must have 4*{e} output channels, got {gate_weight.data.shape[0]}"
        )
    k = gate_weight.data.shape[2]
    z = conv2d(concat_channels([x, h_prev]), gate_weight, gate_bias, padding=k // 2)
    gate_i = logistic(slice_channels(z, 0, e))
    gate_f = logistic(slice_channels(z, e, 2 * e))
    gate_o = logistic(slice_channels(z, 2 * e, 3 * e))
    gate_g = tanh(slice_channels(z, 3 * e, 4 * e))
    c = add(mul(gate_f, c_prev), mul(gate_i, gate_g))
    h = mul(gate_o, tanh(c))
    return h, c
