import numpy as np
import pytest

from htmnet.autodiff import ShapeError, Tensor, grad_check
from htmnet.decoder import MSFM, ChannelAttention, Decoder, SpatialAttention, align, channel_shuffle


class TestAlign:
    def test_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 3, 3)))
        assert align(x, 4, 3, 3) is x

    def test_channel_tiling(self):
        x = Tensor(np.array([1.0, 2.0]).reshape(1, 2, 1, 1))
        assert align(x, 4, 1, 1).data.ravel().tolist() == [1.0, 2.0, 1.0, 2.0]

    def test_pooling_block_means(self, f64):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(align(x, 1, 2, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_channel_multiple_required(self):
        with pytest.raises(ShapeError):
            align(Tensor(np.zeros((1, 3, 4, 4))), 4, 2, 2)

    def test_cannot_grow(self):
        with pytest.raises(ShapeError):
            align(Tensor(np.zeros((1, 2, 2, 2))), 2, 4, 4)


class TestChannelShuffle:
    def test_two_groups(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
        assert channel_shuffle(x, 2).data.ravel().tolist() == [1.0, 3.0, 2.0, 4.0]

    def test_inverse_pair(self, rng):
        x = Tensor(rng.standard_normal((2, 12, 3, 3)))
        back = channel_shuffle(channel_shuffle(x, 3), 4)
        assert back.data.tobytes() == x.data.tobytes()

    def test_multiset_preserved(self, rng):
        x = Tensor(rng.standard_normal((1, 8, 2, 2)))
        np.testing.assert_array_equal(np.sort(channel_shuffle(x, 2).data.ravel()), np.sort(x.data.ravel()))

    def test_groups_must_divide(self):
        with pytest.raises(ShapeError):
            channel_shuffle(Tensor(np.zeros((1, 6, 1, 1))), 4)

    def test_gradient_is_inverse_permutation(self, f64, rng):
        x = Tensor(rng.standard_normal((1, 8, 2, 2)))
        assert grad_check(lambda t: channel_shuffle(t, 2), [x]) <= 1e-8


class TestAttention:
    def test_spatial_constant_input(self, f64, rng):
        sa = SpatialAttention(rng)
        out = sa(Tensor(np.full((1, 5, 9, 9), 0.3))).data
        # away from the zero-padded border the 7x7 response is constant
        np.testing.assert_allclose(out[0, 0, 3:6, 3:6], out[0, 0, 4, 4], rtol=1e-12)
        assert out.shape == (1, 1, 9, 9)

    @pytest.mark.parametrize("c", [1, 3, 16])
    def test_spatial_shape(self, rng, c):
        assert SpatialAttention(rng)(Tensor(np.zeros((2, c, 5, 6)))).shape == (2, 1, 5, 6)

    def test_channel_permutation_invariance(self, f64, rng):
        ca = ChannelAttention(8, rng)
        x = rng.standard_normal((1, 8, 4, 4))
        perm = rng.permutation(16)
        y = x.reshape(1, 8, 16)[..., perm].reshape(1, 8, 4, 4)
        np.testing.assert_allclose(ca(Tensor(x)).data, ca(Tensor(y)).data, rtol=1e-12)
        assert ca(Tensor(x)).shape == (1, 8, 1, 1)

    def test_channel_ratio_must_divide(self, rng):
        with pytest.raises(ShapeError):
            ChannelAttention(6, rng, ratio=4)

    def test_gradients(self, f64, rng):
        sa, ca = SpatialAttention(rng), ChannelAttention(8, rng)
        x = Tensor(rng.standard_normal((1, 8, 5, 5)))
        assert grad_check(lambda t, *p: sa(t), [x] + sa.parameters()) <= 1e-4
        assert grad_check(lambda t, *p: ca(t), [x] + ca.parameters()) <= 1e-4


class TestMSFM:
    def test_open_gate_passes_deep_branch(self, f64, rng):
        m = MSFM(8, rng)
        m.reduce.weight.data[...] = 0.0
        m.reduce.bias.data[...] = 80.0         # sigmoid saturates at 1
        for conv in (m.out_deep, m.out_shallow):
            conv.weight.data[...] = np.eye(8).reshape(8, 8, 1, 1)
            conv.bias.data[...] = 0.0
        f = Tensor(rng.standard_normal((1, 8, 4, 4)))
        out = m(f, Tensor(rng.standard_normal((1, 4, 8, 8))))
        np.testing.assert_allclose(out.data, f.data, rtol=1e-12, atol=1e-15)

    def test_gate_strictly_inside_unit_interval(self, rng):
        m = MSFM(8, rng)
        m(Tensor(rng.standard_normal((2, 8, 4, 4))), Tensor(rng.standard_normal((2, 8, 8, 8))))
        assert m.last_gate.shape == (2, 8, 4, 4)
        assert np.all((m.last_gate > 0) & (m.last_gate < 1))

    def test_gradients(self, f64, rng):
        m = MSFM(8, rng)
        f, g = Tensor(rng.standard_normal((1, 8, 4, 4))), Tensor(rng.standard_normal((1, 4, 8, 8)))
        assert grad_check(lambda a, b, *p: m(a, b), [f, g] + m.parameters(), samples=12) <= 1e-4


class TestDecoder:
    def test_output_geometry(self, rng):
        dec = Decoder([24, 48, 96, 192], rng)
        skips = [Tensor(np.zeros((1, 24, 16, 16))), Tensor(np.zeros((1, 48, 8, 8))), Tensor(np.zeros((1, 96, 4, 4)))]
        assert dec(Tensor(rng.standard_normal((1, 192, 2, 2))), skips).shape == (1, 1, 64, 64)

    def test_zero_head_gives_zero_residual(self, rng):
        dec = Decoder([8, 8, 16, 16], rng)
        skips = [Tensor(rng.standard_normal((1, c, s, s))) for c, s in ((8, 8), (8, 4), (16, 2))]
        assert not np.any(dec(Tensor(rng.standard_normal((1, 16, 1, 1))), skips).data)

    @pytest.mark.parametrize("use_msfm", [True, False])
    def test_msfm_toggle_keeps_shape(self, rng, use_msfm):
        dec = Decoder([8, 8, 16, 16], rng, use_msfm=use_msfm)
        skips = [Tensor(np.ones((2, c, s, s))) for c, s in ((8, 8), (8, 4), (16, 2))]
        assert dec(Tensor(np.ones((2, 16, 1, 1))), skips).shape == (2, 1, 32, 32)
