import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from raydose.loss import build_weight_map, weighted_noise_loss


def region_masks():
    """A 6x6 layout with body, target, one organ, and outside pixels."""
    body = np.zeros((6, 6), dtype=bool)
    body[1:5, 1:5] = True
    ptv = np.zeros_like(body)
    ptv[2:4, 2:4] = True
    oar = np.zeros_like(body)
    oar[4, 1:3] = True
    return ptv, oar, body


class TestBuildWeightMap:
    def test_region_values(self):
        ptv, oar, body = region_masks()
        w = build_weight_map(ptv, [oar], body)
        assert w[2, 2] == 4.0  # target
        assert w[4, 1] == 4.0  # organ at risk
        assert w[1, 1] == 2.0  # body elsewhere
        assert w[0, 0] == 1.0  # outside body
        assert w.shape == body.shape

    def test_focus_takes_precedence_over_body(self):
        ptv, oar, body = region_masks()
        w = build_weight_map(ptv, [oar], body, focus_weight=7.0, body_weight=3.0)
        assert np.all(w[ptv] == 7.0)
        assert np.all(w[oar] == 7.0)

    def test_unit_weights_give_uniform_map(self):
        ptv, oar, body = region_masks()
        w = build_weight_map(ptv, [oar], body, 1.0, 1.0)
        np.testing.assert_array_equal(w, np.ones_like(w))

    def test_overlapping_masks_counted_once(self):
        ptv, _, body = region_masks()
        w = build_weight_map(ptv, [ptv.copy()], body)
        assert np.all(w[ptv] == 4.0)

    def test_ordering_violation_warns(self):
        ptv, oar, body = region_masks()
        with pytest.warns(UserWarning):
            build_weight_map(ptv, [oar], body, focus_weight=1.0, body_weight=3.0)

    def test_shape_mismatch(self):
        ptv, oar, body = region_masks()
        with pytest.raises(ValueError):
            build_weight_map(ptv[:4], [oar], body)
        with pytest.raises(ValueError):
            build_weight_map(ptv, [oar[:, :3]], body)


class TestWeightedNoiseLoss:
    def test_zero_residual(self, rng):
        eps = rng.standard_normal((2, 1, 4, 4))
        w = np.full_like(eps, 2.0)
        assert weighted_noise_loss(eps, eps.copy(), w) == 0.0

    def test_uniform_weights_equal_plain_mae(self, rng):
        a = rng.standard_normal((3, 1, 5, 5))
        b = rng.standard_normal((3, 1, 5, 5))
        w = np.ones_like(a)
        assert weighted_noise_loss(a, b, w) == np.abs(a - b).mean()

    def test_hand_computed_cases(self):
        # |residual| all ones under weights [[4,2],[1,1]] averages to 1.
        pred = np.array([[1.0, 1.0], [1.0, 1.0]])
        true = np.zeros((2, 2))
        w = np.array([[4.0, 2.0], [1.0, 1.0]])
        assert weighted_noise_loss(pred, true, w) == 1.0
        # A single unit residual at the weight-4 pixel: 4 / 8 = 0.5.
        pred2 = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert weighted_noise_loss(pred2, true, w) == 0.5

    def test_unnormalized_variant_averages_over_batch(self):
        pred = np.ones((2, 1, 2, 2))
        true = np.zeros_like(pred)
        w = np.full_like(pred, 3.0)
        # Per-image weighted sum is 12; mean over the 2-image batch is 12.
        assert weighted_noise_loss(pred, true, w, normalize=False) == 12.0

    def test_single_pixel_linearity(self):
        # Increasing the residual at one focus pixel moves the loss by
        # focus_weight / total_weight per unit.
        w = np.array([[4.0, 2.0], [1.0, 1.0]])
        true = np.zeros((2, 2))
        base = np.array([[1.0, 0.5], [0.2, 0.1]])
        bumped = base.copy()
        bumped[0, 0] += 0.25
        delta = weighted_noise_loss(bumped, true, w) - weighted_noise_loss(base, true, w)
        assert delta == pytest.approx(4.0 / 8.0 * 0.25, rel=1e-12)

    def test_gradient_formula_and_finite_differences(self):
        torch.manual_seed(0)
        pred = torch.randn(6, 6, dtype=torch.float64, requires_grad=True)
        true = torch.randn(6, 6, dtype=torch.float64)
        ptv, oar, body = region_masks()
        w = torch.tensor(build_weight_map(ptv, [oar], body))
        loss = weighted_noise_loss(pred, true, w)
        loss.backward()
        expected = w * torch.sign(pred.detach() - true) / w.sum()
        assert torch.allclose(pred.grad, expected, atol=1e-12)
        # central finite differences at a few coordinates
        eps = 1e-7
        with torch.no_grad():
            for r, c in [(0, 0), (2, 2), (4, 1), (5, 5)]:
                orig = pred[r, c].item()
                pred[r, c] = orig + eps
                up = float(weighted_noise_loss(pred, true, w))
                pred[r, c] = orig - eps
                down = float(weighted_noise_loss(pred, true, w))
                pred[r, c] = orig
                fd = (up - down) / (2 * eps)
                g = pred.grad[r, c].item()
                assert abs(fd - g) / max(abs(fd), abs(g)) < 1e-4

    def test_shape_mismatches(self):
        with pytest.raises(ValueError):
            weighted_noise_loss(np.zeros((2, 2)), np.zeros((3, 2)), np.ones((2, 2)))
        with pytest.raises(ValueError):
            weighted_noise_loss(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((4, 4)))

    @settings(max_examples=40, deadline=None)
    @given(
        pred=arrays(np.float64, (3, 3), elements=st.floats(-5, 5)),
        true=arrays(np.float64, (3, 3), elements=st.floats(-5, 5)),
    )
    def test_nonnegative_and_zero_iff_equal(self, pred, true):
        w = np.full((3, 3), 2.0)
        value = weighted_noise_loss(pred, true, w)
        assert value >= 0.0
        if np.array_equal(pred, true):
            assert value == 0.0
        elif np.abs(pred - true).max() > 1e-12:
            assert value > 0.0
