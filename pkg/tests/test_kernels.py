"""Convolution kernels against naive loop oracles."""

import numpy as np
import pytest

from evdeblur.errors import ShapeError
from evdeblur.tensorkit import (
    DeformConvParams,
    Tensor,
    bilinear_sample,
    conv2d,
    convlstm_cell,
    modulated_deform_conv2d,
    sum_all,
)


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def conv2d_oracle(x, w, b=None, stride=1, padding=0):
    """Quadruple-loop cross-correlation with zero padding."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    hout = (h + 2 * padding - k) // stride + 1
    wout = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, hout, wout))
    for bi in range(n):
        for co in range(cout):
            for oy in range(hout):
                for ox in range(wout):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                iy = oy * stride - padding + ky
                                ix = ox * stride - padding + kx
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += x[bi, ci, iy, ix] * w[co, ci, ky, kx]
                    out[bi, co, oy, ox] = acc + (b[co] if b is not None else 0.0)
    return out


def bilinear_oracle(img, py, px):
    """Hand-expanded 4-neighbor interpolation; zero outside the image."""
    h, w = img.shape
    y0, x0 = int(np.floor(py)), int(np.floor(px))
    fy, fx = py - y0, px - x0

    def at(iy, ix):
        return img[iy, ix] if 0 <= iy < h and 0 <= ix < w else 0.0

    return (
        at(y0, x0) * (1 - fy) * (1 - fx)
        + at(y0, x0 + 1) * (1 - fy) * fx
        + at(y0 + 1, x0) * fy * (1 - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
    )


def mdc_oracle(x, w, offsets, mask, stride=1, padding=1):
    """Loop pixels, loop taps, bilinearly interpolate by hand."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    hout = (h + 2 * padding - k) // stride + 1
    wout = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, hout, wout))
    for bi in range(n):
        for oy in range(hout):
            for ox in range(wout):
                for ky in range(k):
                    for kx in range(k):
                        tap = ky * k + kx
                        py = oy * stride - padding + ky + offsets[bi, 2 * tap, oy, ox]
                        px = ox * stride - padding + kx + offsets[bi, 2 * tap + 1, oy, ox]
                        m = mask[bi, tap, oy, ox]
                        for ci in range(cin):
                            v = bilinear_oracle(x[bi, ci], py, px)
                            for co in range(cout):
                                out[bi, co, oy, ox] += w[co, ci, ky, kx] * v * m
    return out


class TestConv2d:
    def test_identity_1x1_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        assert np.array_equal(conv2d(x, w).data, x.data)

    def test_box_sum_on_constant_interior(self):
        x = Tensor(np.ones((1, 1, 6, 6)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, padding=1).data[0, 0]
        assert np.all(out[1:-1, 1:-1] == 9.0)
        assert out[0, 0] == 4.0

    def test_matches_naive_oracle(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        assert np.max(np.abs(out - conv2d_oracle(x, w, b, padding=1))) < 1e-12

    def test_stride_two_matches_oracle(self, rng):
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        assert np.max(np.abs(out - conv2d_oracle(x, w, stride=2, padding=1))) < 1e-12

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


class TestModulatedDeformConv:
    def test_degenerates_to_conv2d(self, rng):
        for _ in range(5):
            cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            h = int(rng.integers(5, 9))
            x = rng.standard_normal((1, cin, h, h))
            w = rng.standard_normal((cout, cin, 3, 3))
            off = np.zeros((1, 18, h, h))
            mask = np.ones((1, 9, h, h))
            got = modulated_deform_conv2d(Tensor(x), Tensor(w), Tensor(off), Tensor(mask)).data
            want = conv2d(Tensor(x), Tensor(w), padding=1).data
            assert np.max(np.abs(got - want)) < 1e-9

    def test_zero_mask_annihilates_output_and_weight_grad(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        w = leaf(rng.standard_normal((2, 2, 3, 3)))
        off = Tensor(rng.uniform(-1, 1, size=(1, 18, 6, 6)))
        mask = Tensor(np.zeros((1, 9, 6, 6)))
        out = modulated_deform_conv2d(x, w, off, mask)
        assert np.all(out.data == 0.0)
        sum_all(out).backward()
        assert np.all(w.grad == 0.0)

    def test_matches_naive_oracle_fractional_offsets(self, rng):
        x = rng.standard_normal((1, 1, 6, 6))
        w = rng.standard_normal((2, 1, 3, 3))
        off = rng.uniform(-1.6, 1.6, size=(1, 18, 6, 6))
        mask = rng.uniform(0, 1, size=(1, 9, 6, 6))
        got = modulated_deform_conv2d(Tensor(x), Tensor(w), Tensor(off), Tensor(mask)).data
        want = mdc_oracle(x, w, off, mask)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_matches_oracle_multichannel_batch(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((2, 3, 3, 3))
        off = rng.uniform(-2, 2, size=(2, 18, 5, 5))
        mask = rng.uniform(0, 1, size=(2, 9, 5, 5))
        got = modulated_deform_conv2d(Tensor(x), Tensor(w), Tensor(off), Tensor(mask)).data
        assert np.max(np.abs(got - mdc_oracle(x, w, off, mask))) < 1e-12

    def test_offset_shape_enforced(self, rng):
        with pytest.raises(ShapeError):
            modulated_deform_conv2d(
                Tensor(np.zeros((1, 1, 4, 4))),
                Tensor(np.zeros((1, 1, 3, 3))),
                Tensor(np.zeros((1, 10, 4, 4))),
                Tensor(np.zeros((1, 9, 4, 4))),
            )

    def test_params_bundle_applies_and_validates(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        w = Tensor(rng.standard_normal((2, 2, 3, 3)))
        off = Tensor(rng.uniform(-1, 1, size=(1, 18, 6, 6)))
        mask = Tensor(rng.uniform(0, 1, size=(1, 9, 6, 6)))
        params = DeformConvParams(weight=w, offsets=off, mask=mask)
        direct = modulated_deform_conv2d(x, w, off, mask)
        assert np.array_equal(params.apply(x).data, direct.data)
        with pytest.raises(ShapeError):
            DeformConvParams(weight=w, offsets=off, mask=Tensor(np.full((1, 9, 6, 6), 1.5)))
        with pytest.raises(ShapeError):
            DeformConvParams(weight=Tensor(np.zeros((2, 2, 2, 2))), offsets=off, mask=mask)


class TestBilinearSample:
    def test_integer_coordinates_exact(self, rng):
        img = rng.standard_normal((1, 1, 4, 4))
        out = bilinear_sample(Tensor(img), Tensor([2.0]), Tensor([3.0]))
        assert out.data[0, 0, 0] == img[0, 0, 2, 3]

    def test_cell_center_midpoint(self):
        img = np.array([[0.0, 0.0], [1.0, 1.0]])[None, None]
        out = bilinear_sample(Tensor(img), Tensor([0.5]), Tensor([0.5]))
        assert out.data[0, 0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_matches_hand_expansion(self, rng):
        img = rng.standard_normal((1, 2, 5, 6))
        py, px = 2.37, 4.81
        out = bilinear_sample(Tensor(img), Tensor([py]), Tensor([px])).data
        for c in range(2):
            assert out[0, c, 0] == pytest.approx(bilinear_oracle(img[0, c], py, px), abs=1e-13)

    def test_outside_support_is_zero(self, rng):
        img = rng.standard_normal((1, 1, 4, 4))
        out = bilinear_sample(Tensor(img), Tensor([-2.0, 10.0]), Tensor([1.0, 1.0]))
        assert np.all(out.data == 0.0)


def convlstm_oracle(x, h_prev, c_prev, w, b):
    """Scalar-loop gate equations on top of the conv oracle."""
    e = h_prev.shape[1]
    z = conv2d_oracle(np.concatenate([x, h_prev], axis=1), w, b, padding=w.shape[2] // 2)

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    gi = sig(z[:, 0:e])
    gf = sig(z[:, e : 2 * e])
    go = sig(z[:, 2 * e : 3 * e])
    gg = np.tanh(z[:, 3 * e : 4 * e])
    c = gf * c_prev + gi * gg
    return go * np.tanh(c), c


class TestConvLstm:
    def test_zero_weights_zero_state_fixed_point(self):
        e = 3
        x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 4, 4)))
        h0 = Tensor(np.zeros((1, e, 4, 4)))
        c0 = Tensor(np.zeros((1, e, 4, 4)))
        w = Tensor(np.zeros((4 * e, 2 + e, 3, 3)))
        b = Tensor(np.zeros(4 * e))
        h, c = convlstm_cell(x, h0, c0, w, b)
        assert np.all(h.data == 0.0)
        assert np.all(c.data == 0.0)

    def test_saturated_forget_gate_passes_cell_through(self, rng):
        e = 2
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        h0 = Tensor(np.zeros((1, e, 4, 4)))
        c_val = rng.standard_normal((1, e, 4, 4))
        c0 = Tensor(c_val)
        w = Tensor(np.zeros((4 * e, 2 + e, 3, 3)))
        # forget bias +20, input/output/g biases -20: c ~= c_prev
        b = np.full(4 * e, -20.0)
        b[e : 2 * e] = 20.0
        _, c = convlstm_cell(x, h0, c0, w, Tensor(b))
        assert np.max(np.abs(c.data - c_val)) < 1e-6

    def test_matches_scalar_oracle(self, rng):
        e, cx = 2, 3
        x = rng.standard_normal((1, cx, 4, 4))
        h0 = rng.standard_normal((1, e, 4, 4))
        c0 = rng.standard_normal((1, e, 4, 4))
        w = rng.standard_normal((4 * e, cx + e, 3, 3)) * 0.3
        b = rng.standard_normal(4 * e) * 0.1
        h, c = convlstm_cell(Tensor(x), Tensor(h0), Tensor(c0), Tensor(w), Tensor(b))
        h_want, c_want = convlstm_oracle(x, h0, c0, w, b)
        assert np.max(np.abs(h.data - h_want)) < 1e-12
        assert np.max(np.abs(c.data - c_want)) < 1e-12

    def test_spatial_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            convlstm_cell(
                Tensor(np.zeros((1, 2, 4, 4))),
                Tensor(np.zeros((1, 2, 5, 5))),
                Tensor(np.zeros((1, 2, 5, 5))),
                Tensor(np.zeros((8, 4, 3, 3))),
            )
