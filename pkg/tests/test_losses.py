import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from compinv.losses import (EmptyMaskError, PerceptualProxy, binary_entropy, blend_entropy, blend_sparsity,
                            latent_delta_reg, masked_l2, mse, perceptual_proxy_loss, sr_loss)
from compinv.tensorlab import finite_diff_check


def gray(values):
    """1 x N gray image (channels equal)."""
    v = torch.tensor(values, dtype=torch.float64)
    return v[None, :, None].expand(1, len(values), 3).clone()


def rand_img(seed, h=12, w=12):
    return torch.rand(h, w, 3, generator=torch.Generator().manual_seed(seed))


class TestMaskedL2:
    def test_identical(self):
        x = rand_img(0)
        assert float(masked_l2(x, x, torch.ones(12, 12))) == 0.0

    def test_hand_arithmetic(self):
        x, x_hat = gray([0.0, 1.0]), gray([0.0, 0.0])
        assert float(masked_l2(x, x_hat, torch.tensor([[1.0, 1.0]]))) == 0.5
        assert float(masked_l2(x, x_hat, torch.tensor([[0.0, 1.0]]))) == 1.0

    def test_empty_mask_raises(self):
        with pytest.raises(EmptyMaskError):
            masked_l2(rand_img(0), rand_img(1), torch.zeros(12, 12))

    def test_full_mask_is_mse(self):
        x, y = rand_img(0), rand_img(1)
        torch.testing.assert_close(masked_l2(x, y, torch.ones(12, 12)), mse(x, y))

    def test_normalized_by_mask_area(self):
        x = torch.zeros(4, 4, 3)
        y = torch.full((4, 4, 3), 0.3)
        full = masked_l2(x, y, torch.ones(4, 4))
        half = torch.zeros(4, 4)
        half[:2] = 1.0
        torch.testing.assert_close(masked_l2(x, y, half), full)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            masked_l2(torch.zeros(2, 2, 3), torch.zeros(2, 3, 3), torch.ones(2, 2))


class TestPerceptual:
    def test_identical_zero(self):
        x = rand_img(3)
        assert float(perceptual_proxy_loss(x, x)) == 0.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000))
    def test_symmetric_and_nonnegative(self, seed):
        x, y = rand_img(seed), rand_img(seed + 1)
        a, b = perceptual_proxy_loss(x, y), perceptual_proxy_loss(y, x)
        assert float(a) == float(b) and float(a) >= 0.0

    def test_monotone_toward_target(self):
        x, y = rand_img(5), rand_img(6)
        vals = [float(perceptual_proxy_loss(x, x + s * (y - x))) for s in (1.0, 0.5, 0.0)]
        assert vals[0] > vals[1] > vals[2] == 0.0

    def test_seeded_filters(self):
        a, b, c = PerceptualProxy(seed=4), PerceptualProxy(seed=4), PerceptualProxy(seed=5)
        assert all(torch.equal(f, g) for f, g in zip(a.filters, b.filters))
        assert not torch.equal(a.filters[0], c.filters[0])
        # copies are returned; the bank cannot be mutated from outside
        a.filters[0].zero_()
        assert torch.equal(a.filters[0], b.filters[0])

    def test_mask_ignores_outside(self):
        x = rand_img(7, 16, 16)
        y = x.clone()
        y[:, 10:] = 1.0 - y[:, 10:]
        m = torch.zeros(16, 16)
        m[:, :6] = 1.0
        assert float(perceptual_proxy_loss(x, y, m)) == 0.0
        assert float(perceptual_proxy_loss(x, y)) > 0.0

    def test_differentiable(self):
        x = rand_img(8, 8, 8)
        y = rand_img(9, 8, 8).requires_grad_(True)
        m = torch.ones(8, 8)
        m[:3] = 0
        assert finite_diff_check(lambda: perceptual_proxy_loss(x, y, m), [y], n_probes=40) <= 1e-5


class TestLatentDelta:
    def test_identical_rows(self):
        assert float(latent_delta_reg(torch.ones(4, 16) * 0.3)) == 0.0

    def test_unit_delta(self):
        w = torch.zeros(2, 5)
        w[1, 2] = 1.0
        assert float(latent_delta_reg(w)) == 1.0

    def test_sum_of_squares(self):
        w = torch.zeros(3, 4)
        w[1, :2] = 1.0  # |d1|^2 = 2
        w[2, :3] = 1.0  # |d2|^2 = 3
        assert float(latent_delta_reg(w)) == 5.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 1000), st.floats(-3, 3))
    def test_shift_invariant(self, seed, c):
        w = torch.randn(4, 6, generator=torch.Generator().manual_seed(seed))
        shift = torch.full((1, 6), c)
        torch.testing.assert_close(latent_delta_reg(w + shift), latent_delta_reg(w), rtol=1e-12, atol=1e-12)


class TestBlendTerms:
    def test_sparsity(self):
        assert float(blend_sparsity(torch.zeros(2, 2, 3))) == 0.0
        b = torch.tensor([[[0.2, 0.3, 0.5]]])
        assert float(blend_sparsity(b, torch.zeros(1, 1))) == pytest.approx(1.0, abs=1e-15)
        assert float(blend_sparsity(torch.rand(3, 3, 4), torch.ones(3, 3))) == 0.0

    def test_sparsity_only_outside_mask(self):
        b = torch.ones(2, 1, 4)
        m = torch.tensor([[1.0], [0.0]])
        assert float(blend_sparsity(b, m)) == 4.0

    def test_entropy_values(self):
        assert float(blend_entropy(torch.tensor([0.5]))) == pytest.approx(math.log(2), abs=1e-15)
        assert float(blend_entropy(torch.tensor([0.0, 1.0]))) == 0.0
        assert float(blend_entropy(torch.tensor([0.25, 0.25]))) == pytest.approx(1.124670, abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 1.0))
    def test_entropy_symmetric_bounded(self, b):
        x = torch.tensor([b])
        torch.testing.assert_close(binary_entropy(x), binary_entropy(1.0 - x), rtol=1e-9, atol=1e-12)
        assert 0.0 <= float(binary_entropy(x)) <= math.log(2) + 1e-15

    def test_entropy_gradient(self):
        b = torch.tensor([0.1, 0.3, 0.55, 0.9], requires_grad=True)
        assert finite_diff_check(lambda: blend_entropy(b), [b], n_probes=4) <= 1e-6


class TestSrLoss:
    def test_identical(self):
        x = rand_img(1)
        assert float(sr_loss(x, x)) == 0.0

    def test_definition(self):
        x, y = rand_img(1), rand_img(2)
        expected = masked_l2(x, y, torch.ones(12, 12)) + perceptual_proxy_loss(x, y)
        torch.testing.assert_close(sr_loss(x, y), expected)

    def test_nonnegative(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(1000):
            x, y = torch.rand(4, 4, 3, generator=gen), torch.rand(4, 4, 3, generator=gen)
            assert float(sr_loss(x, y)) >= 0.0
