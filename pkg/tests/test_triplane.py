import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from compinv.tensorlab import ShapeError, finite_diff_check
from compinv.triplane import IN_HEAD, OOD_HEAD, MlpDecoder, OodLatent, TriPlane, decode_in, decode_ood, sample_triplane


def texel_planes(resolution=4, channels=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return TriPlane(torch.randn(3, channels, resolution, resolution, generator=gen), bound=1.0)


def texel_value(tp, plane, i, j):
    # planes[p, c, j, i]: i runs along the plane's first axis
    return tp.planes[plane, :, j, i]


def bilinear_ref(tp, x):
    """Direct bilinear reads summed over the three planes."""
    r = tp.resolution
    total = torch.zeros(tp.channels)
    for p, (a, b) in enumerate([(0, 1), (0, 2), (1, 2)]):
        u = (min(max(x[a] / tp.bound, -1), 1) + 1) / 2 * (r - 1)
        v = (min(max(x[b] / tp.bound, -1), 1) + 1) / 2 * (r - 1)
        i0, j0 = min(math.floor(float(u)), r - 2), min(math.floor(float(v)), r - 2)
        fu, fv = u - i0, v - j0
        total = total + ((1 - fu) * (1 - fv) * texel_value(tp, p, i0, j0) + fu * (1 - fv) * texel_value(tp, p, i0 + 1, j0)
                         + (1 - fu) * fv * texel_value(tp, p, i0, j0 + 1) + fu * fv * texel_value(tp, p, i0 + 1, j0 + 1))
    return total


class TestSampling:
    def test_corner_reads_exact_texels(self):
        tp = texel_planes()
        x = torch.tensor([[-1.0, -1.0, -1.0]])
        expected = texel_value(tp, 0, 0, 0) + texel_value(tp, 1, 0, 0) + texel_value(tp, 2, 0, 0)
        torch.testing.assert_close(sample_triplane(tp, x)[0], expected, rtol=0, atol=1e-14)

    def test_orientation(self):
        # x = +1 is the last texel along the first axis of XY and XZ
        tp = TriPlane.zeros(4, 1)
        tp.planes[0, 0, 0, 3] = 1.0  # XY at (i=3, j=0)
        assert float(sample_triplane(tp, torch.tensor([[1.0, -1.0, 0.3]]))) == pytest.approx(1.0)
        assert float(sample_triplane(tp, torch.tensor([[-1.0, 1.0, 0.3]]))) == pytest.approx(0.0)

    def test_midpoint_is_average(self):
        tp = TriPlane.zeros(3, 1)
        tp.planes[2, 0, 0, 0] = 2.0  # YZ plane, (y=-1, z=-1)
        tp.planes[2, 0, 0, 1] = 4.0  # YZ plane, (y=0, z=-1)
        out = sample_triplane(tp, torch.tensor([[0.7, -0.5, -1.0]]))
        assert float(out) == pytest.approx(3.0, abs=1e-14)

    def test_outside_clamps_to_boundary(self):
        tp = texel_planes()
        inside = sample_triplane(tp, torch.tensor([[1.0, 0.2, -1.0]]))
        outside = sample_triplane(tp, torch.tensor([[3.0, 0.2, -7.0]]))
        torch.testing.assert_close(inside, outside, rtol=0, atol=0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3), st.integers(0, 100))
    def test_matches_direct_bilinear(self, xyz, seed):
        tp = texel_planes(5, 3, seed)
        x = torch.tensor(xyz)
        torch.testing.assert_close(sample_triplane(tp, x[None])[0], bilinear_ref(tp, x), rtol=1e-12, atol=1e-12)

    def test_batch_shape(self):
        tp = texel_planes()
        assert sample_triplane(tp, torch.zeros(2, 5, 3)).shape == (2, 5, 2)

    def test_gradients_planes_and_points(self):
        tp = texel_planes(6, 2)
        tp.planes.requires_grad_(True)
        x = torch.tensor([[0.13, -0.41, 0.27], [0.6, 0.05, -0.33]], requires_grad=True)
        assert finite_diff_check(lambda: sample_triplane(tp, x).square().sum(), [tp.planes, x], n_probes=40) <= 1e-6

    def test_invalid(self):
        with pytest.raises(ShapeError):
            TriPlane(torch.zeros(2, 1, 3, 3))
        with pytest.raises(ValueError):
            TriPlane(torch.zeros(3, 1, 3, 3), bound=0.0)


class TestSerialization:
    def test_layout_and_round_trip(self):
        tp = texel_planes(4, 3)
        sd = tp.state_dict()
        assert set(sd) == {"triplane.xy", "triplane.xz", "triplane.yz"}
        assert sd["triplane.xz"].shape == (4, 4, 3)
        # [i, j, c]
        np.testing.assert_array_equal(sd["triplane.xz"][2, 1, :], texel_value(tp, 1, 2, 1).numpy())
        back = TriPlane.from_state_dict(sd, 1.0)
        torch.testing.assert_close(back.planes, tp.planes, rtol=0, atol=0)


class TestDecoder:
    def test_head_widths(self):
        assert MlpDecoder(16, (64, 64), IN_HEAD).widths == [16, 64, 64, 4]
        assert MlpDecoder(16 + 32, (64, 64), OOD_HEAD).widths == [48, 64, 64, 5]

    def test_width_mismatch(self):
        with pytest.raises(ShapeError, match="width 16"):
            MlpDecoder(16)(torch.zeros(3, 8))

    def test_decode_ranges(self):
        gen = torch.Generator().manual_seed(0)
        dec = MlpDecoder(4, (8,), OOD_HEAD).init_normal(0.5, gen)
        feat = torch.randn(100, 4, generator=gen) * 3
        c, s, b = decode_ood(feat[:, :2], torch.randn(2, generator=gen), dec)
        assert c.shape == (100, 3) and s.shape == (100,) and b.shape == (100,)
        assert (c > 0).all() and (c < 1).all() and (s > 0).all() and (b > 0).all() and (b < 1).all()

    def test_head_kind_enforced(self):
        with pytest.raises(ValueError):
            decode_in(torch.zeros(1, 4), MlpDecoder(4, (8,), OOD_HEAD))

    def test_zero_decoder(self):
        dec = MlpDecoder(4, (8,), IN_HEAD).zero_()
        c, s = decode_in(torch.randn(5, 4), dec)
        assert torch.all(c == 0.5)
        torch.testing.assert_close(s, torch.full((5,), float(np.log(2))))

    def test_entries_round_trip(self):
        dec = MlpDecoder(4, (8,), IN_HEAD).init_normal(0.1, torch.Generator().manual_seed(1))
        other = MlpDecoder(4, (8,), IN_HEAD).to(torch.float64).load_entries(dec.state_entries("d"), "d")
        for a, b in zip(dec.parameters(), other.parameters()):
            torch.testing.assert_close(a, b, rtol=0, atol=0)


class TestOodLatent:
    def test_shapes_and_entries(self):
        phi = OodLatent.random(5, 32, 1.0, torch.Generator().manual_seed(0))
        assert len(phi) == 5 and phi.dim == 32
        back = OodLatent.from_entries(phi.state_entries(), 5)
        for a, b in zip(phi.parameters(), back.parameters()):
            torch.testing.assert_close(a.detach(), b, rtol=0, atol=0)

    def test_mixed_dims_rejected(self):
        with pytest.raises(ShapeError):
            OodLatent([torch.zeros(3), torch.zeros(4)])
