import math

import numpy as np
import pytest
import torch

from styler.errors import InvalidInput, TrainingDiverged
from styler.objectives import (
    PARTS,
    compute_losses,
    duration_loss,
    mel_loss,
    per_item_losses,
    total_loss,
    variance_loss,
)

from conftest import make_model, random_batch


def naive_masked_mse(pred, target, lengths):
    total, count = 0.0, 0
    for b in range(pred.shape[0]):
        for t in range(int(lengths[b])):
            for c in range(pred.shape[2]):
                total += (float(pred[b, t, c]) - float(target[b, t, c])) ** 2
                count += 1
    return total / count


class TestParts:
    def test_trivial_values(self):
        x = torch.randn(2, 5, 3)
        assert mel_loss(x, x).item() == 0
        assert mel_loss(x + 1, x).item() == pytest.approx(1.0)
        assert variance_loss(torch.tensor([1.0, 3.0]), torch.tensor([2.0, 2.0])).item() == 1.0

    def test_against_double_loop(self):
        rng = np.random.default_rng(0)
        pred = torch.from_numpy(rng.normal(size=(3, 9, 4)))
        target = torch.from_numpy(rng.normal(size=(3, 9, 4)))
        lengths = torch.tensor([9, 4, 1])
        mask = torch.arange(9)[None] < lengths[:, None]
        assert mel_loss(pred, target, mask).item() == pytest.approx(naive_masked_mse(pred, target, lengths), abs=1e-7)

    def test_duration_in_log_domain(self):
        target = torch.tensor([[0, 3, 7]])
        pred = torch.log(torch.tensor([[1.0, 4.0, 8.0]]))
        assert duration_loss(pred, target).item() == pytest.approx(0.0, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInput):
            mel_loss(torch.zeros(1, 3, 2), torch.zeros(1, 4, 2))
        with pytest.raises(InvalidInput):
            variance_loss(torch.zeros(3), torch.zeros(2))

    def test_finite_difference(self):
        torch.manual_seed(0)
        pred = torch.randn(2, 5, 3, dtype=torch.float64, requires_grad=True)
        target = torch.randn(2, 5, 3, dtype=torch.float64)
        mask = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
        mel_loss(pred, target, mask).backward()
        eps = 1e-6
        for idx in [(0, 0, 0), (0, 4, 1), (1, 2, 2)]:
            p = pred.detach().clone()
            p[idx] += eps
            hi = mel_loss(p, target, mask).item()
            p[idx] -= 2 * eps
            lo = mel_loss(p, target, mask).item()
            assert pred.grad[idx].item() == pytest.approx((hi - lo) / (2 * eps), abs=1e-4)


class TestTotals:
    def test_example_sum(self):
        t = lambda v: torch.tensor(v, dtype=torch.float64)
        total, parts = total_loss(t(1.2), t(0.3), t(0.05), t(0.0))
        assert parts.loss_clean == pytest.approx(1.55)
        assert parts.loss_total == parts.loss_clean
        assert parts.l_mel_noisy == 0 and parts.l_aug == 0
        total, parts = total_loss(t(1.0), t(0.5), t(0.25), t(0.125), t(2.0), t(4.0))
        assert parts.loss_clean == 1.875 and parts.loss_total == 7.875
        assert total.item() == 7.875

    @pytest.mark.parametrize("bad", [math.nan, math.inf])
    def test_non_finite_raises(self, bad):
        with pytest.raises(TrainingDiverged):
            total_loss(torch.tensor(1.0), torch.tensor(bad), torch.tensor(0.0), torch.tensor(0.0))

    def test_model_losses_decompose(self, cfg):
        m = make_model(cfg)
        b = random_batch(cfg, [(4, 12), (5, 15)], seed=2)
        total, parts = compute_losses(m(b), b)
        d = parts.to_dict()
        clean = sum(d[k] for k in PARTS[:4])
        assert d["loss_clean"] == pytest.approx(clean, abs=1e-6)
        assert d["loss_total"] == pytest.approx(clean + d["l_mel_noisy"] + d["l_aug"], abs=1e-6)
        _, parts = compute_losses(m(b, noise_modeling=False), b, noise_modeling=False)
        assert parts.l_mel_noisy == 0.0 and parts.l_aug == 0.0

    def test_per_item_shapes(self, cfg):
        m = make_model(cfg).eval()
        b = random_batch(cfg, [(4, 12), (5, 15), (2, 5)])
        with torch.no_grad():
            items = per_item_losses(m(b), b)
        assert all(v.shape == (3,) for v in items.values())
