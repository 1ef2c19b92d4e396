import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tabrep.losses import (
    LossConfig,
    classification_loss,
    contrastive_loss,
    cross_entropy,
    reconstruction_loss,
    regularization_penalty,
    self_loss,
    semi_loss,
)


def t64(values):
    return torch.tensor(values, dtype=torch.float64)


# ---------------------------------------------------------------- oracles


def reconstruction_oracle(x1, xh1, x2, xh2):
    b, m = x1.shape
    total = 0.0
    for i in range(b):
        first = sum((x1[i, j] - xh1[i, j]) ** 2 for j in range(m)) / m
        second = sum((x2[i, j] - xh2[i, j]) ** 2 for j in range(m)) / m
        total += first + second
    return total / b


def classification_oracle(logits1, logits2, y1, y2):
    def nll(logits, y):
        total = 0.0
        for row, label in zip(logits, y):
            shifted = row - row.max()
            probs = np.exp(shifted) / np.exp(shifted).sum()
            total += min(-math.log(max(probs[label], 1e-12)), -math.log(1e-12))
        return total / len(y)

    return nll(logits1, y1) + nll(logits2, y2)


def contrastive_oracle(z1, z2, y1, y2, margin):
    total = 0.0
    for i in range(len(z1)):
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(z1[i], z2[i])))
        if y1[i] == y2[i]:
            total += 0.5 * d * d
        else:
            total += 0.5 * max(0.0, margin - d) ** 2
    return total / len(z1)


# ---------------------------------------------------------------- tests


class TestReconstruction:
    def test_perfect_reconstruction_is_zero(self, rng):
        x1 = t64(rng.random((4, 3)))
        x2 = t64(rng.random((4, 3)))
        assert float(reconstruction_loss(x1, x1, x2, x2)) == 0.0

    def test_hand_example(self):
        x1 = t64([[0.0, 0.0]])
        xh1 = t64([[1.0, 1.0]])
        x2 = t64([[0.3, 0.7]])
        assert float(reconstruction_loss(x1, xh1, x2, x2)) == pytest.approx(1.0, abs=0)

    def test_doubling_residuals_quadruples(self, rng):
        x1 = t64(rng.random((5, 4)))
        x2 = t64(rng.random((5, 4)))
        r1 = t64(rng.random((5, 4)))
        r2 = t64(rng.random((5, 4)))
        small = float(reconstruction_loss(x1, x1 + r1, x2, x2 + r2))
        big = float(reconstruction_loss(x1, x1 + 2 * r1, x2, x2 + 2 * r2))
        assert big == pytest.approx(4 * small, rel=1e-15)

    def test_matches_bruteforce_oracle(self, rng):
        for _ in range(20):
            b, m = int(rng.integers(1, 9)), int(rng.integers(1, 7))
            arrays = [rng.random((b, m)) for _ in range(4)]
            ours = float(reconstruction_loss(*[t64(a) for a in arrays]))
            assert ours == pytest.approx(reconstruction_oracle(*arrays), abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            reconstruction_loss(
                torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 3), torch.zeros(2, 3)
            )


class TestPenalty:
    def test_zero_weights(self):
        assert float(regularization_penalty(t64([0.0, 0.0]), 0.5, 2)) == 0.0

    def test_l2_hand_example(self):
        value = float(regularization_penalty(t64([3.0, 4.0]), 0.01, 2))
        assert value == pytest.approx(0.05, abs=1e-15)

    def test_l1_hand_example(self):
        value = float(regularization_penalty(t64([1.0, -1.0]), 0.5, 1))
        assert value == pytest.approx(1.0, abs=0)

    def test_invalid_norm_order(self):
        with pytest.raises(ValueError):
            regularization_penalty(t64([1.0]), 0.1, 3)


class TestSelfLoss:
    def test_zero_penalty_reduces_to_reconstruction(self):
        assert float(self_loss(t64(0.75), t64(0.0))) == 0.75

    def test_sum(self):
        assert float(self_loss(t64(1.0), t64(0.05))) == pytest.approx(1.05, abs=0)

    def test_monotone_in_both_terms(self):
        base = float(self_loss(t64(1.0), t64(0.5)))
        assert float(self_loss(t64(1.2), t64(0.5))) > base
        assert float(self_loss(t64(1.0), t64(0.7))) > base


class TestClassification:
    def test_confident_correct_prediction_is_zero(self):
        logits = t64([[100.0, -100.0]])
        y = torch.tensor([0])
        assert float(classification_loss(logits, logits, y, y)) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_uniform_logits_binary(self):
        logits = t64([[0.3, 0.3]])
        y = torch.tensor([1])
        value = float(classification_loss(logits, logits, y, y))
        assert value == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_matches_bruteforce_oracle(self, rng):
        for _ in range(30):
            b, c = int(rng.integers(1, 9)), int(rng.integers(2, 5))
            l1, l2 = rng.normal(0, 3, (b, c)), rng.normal(0, 3, (b, c))
            y1, y2 = rng.integers(0, c, b), rng.integers(0, c, b)
            ours = float(
                classification_loss(
                    t64(l1), t64(l2), torch.tensor(y1), torch.tensor(y2)
                )
            )
            assert ours == pytest.approx(
                classification_oracle(l1, l2, y1, y2), abs=1e-12
            )

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError, match="labels"):
            cross_entropy(t64([[0.0, 0.0]]), torch.tensor([2]))

    def test_probability_clamp_caps_loss(self):
        logits = t64([[800.0, -800.0]])
        value = float(cross_entropy(logits, torch.tensor([1])))
        assert value == pytest.approx(-math.log(1e-12), rel=1e-12)


class TestContrastive:
    def test_identical_similar_pair_is_zero(self):
        z = t64([[0.6, 0.8]])
        y = torch.tensor([1])
        assert float(contrastive_loss(z, z, y, y, margin=2.0)) == 0.0

    def test_dissimilar_beyond_margin_is_zero(self):
        z1 = t64([[0.0, 0.0]])
        z2 = t64([[3.0, 0.0]])
        value = contrastive_loss(z1, z2, torch.tensor([0]), torch.tensor([1]), 2.0)
        assert float(value) == 0.0

    def test_dissimilar_inside_margin_hand_value(self):
        z1 = t64([[1.0, 0.0]])
        z2 = t64([[0.875, math.sqrt(1 - 0.875**2)]])
        value = contrastive_loss(z1, z2, torch.tensor([0]), torch.tensor([1]), 2.0)
        assert float(value) == pytest.approx(1.125, abs=1e-12)

    def test_matches_bruteforce_oracle(self, rng):
        for _ in range(30):
            b, k = int(rng.integers(1, 10)), int(rng.integers(1, 6))
            z1, z2 = rng.normal(0, 1, (b, k)), rng.normal(0, 1, (b, k))
            y1, y2 = rng.integers(0, 2, b), rng.integers(0, 2, b)
            ours = float(
                contrastive_loss(
                    t64(z1), t64(z2), torch.tensor(y1), torch.tensor(y2), 2.0
                )
            )
            assert ours == pytest.approx(
                contrastive_oracle(z1, z2, y1, y2, 2.0), abs=1e-12
            )

    def test_unlabeled_row_rejected(self):
        z = t64([[1.0, 0.0]])
        with pytest.raises(ValueError, match="label"):
            contrastive_loss(z, z, torch.tensor([-1]), torch.tensor([0]), 2.0)

    def test_gradient_finite_when_pair_coincides(self):
        z1 = t64([[0.6, 0.8], [0.0, 1.0]]).requires_grad_(True)
        z2 = z1.detach().clone()
        y = torch.tensor([1, 0])
        loss = contrastive_loss(z1, z2, y, torch.tensor([1, 1]), margin=2.0)
        loss.backward()
        assert torch.isfinite(z1.grad).all()

    def test_batch_permutation_invariance(self, rng):
        b, k = 8, 3
        z1, z2 = rng.normal(0, 1, (b, k)), rng.normal(0, 1, (b, k))
        y1, y2 = rng.integers(0, 2, b), rng.integers(0, 2, b)
        perm = rng.permutation(b)
        base = float(
            contrastive_loss(t64(z1), t64(z2), torch.tensor(y1), torch.tensor(y2), 2.0)
        )
        shuffled = float(
            contrastive_loss(
                t64(z1[perm]), t64(z2[perm]),
                torch.tensor(y1[perm]), torch.tensor(y2[perm]), 2.0,
            )
        )
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_normalized_pairs_stay_in_bound(self, rng):
        # unit embeddings keep d in [0, 2], so c_i <= max(2, m^2/2)
        for _ in range(10):
            z1 = rng.normal(0, 1, (6, 4))
            z2 = rng.normal(0, 1, (6, 4))
            z1 /= np.linalg.norm(z1, axis=1, keepdims=True)
            z2 /= np.linalg.norm(z2, axis=1, keepdims=True)
            y1, y2 = rng.integers(0, 2, 6), rng.integers(0, 2, 6)
            value = float(
                contrastive_loss(
                    t64(z1), t64(z2), torch.tensor(y1), torch.tensor(y2), 2.0
                )
            )
            assert 0.0 <= value <= 2.0


class TestSemiLoss:
    def test_reduction_to_self_is_bit_exact(self, rng):
        for _ in range(25):
            s = t64(float(rng.random()))
            c = t64(float(rng.random() * 5))
            k = t64(float(rng.random() * 5))
            assert float(semi_loss(s, c, k, 0.0, 0.0)) == float(s)

    def test_weighted_sum(self):
        assert float(semi_loss(t64(1.0), t64(0.5), t64(0.25), 1.0, 1.0)) == 1.75
        assert float(semi_loss(t64(1.0), t64(0.5), t64(7.0), 2.0, 0.0)) == 2.0


class TestLossConfig:
    def test_defaults_match_training_recipe(self):
        config = LossConfig()
        assert config.lam == 0.01
        assert config.p == 2
        assert config.alpha == 1.0
        assert config.beta == 1.0
        assert config.margin == 2.0

    @pytest.mark.parametrize(
        "kw",
        [
            {"lam": -0.1},
            {"p": 3},
            {"alpha": -1.0},
            {"beta": float("nan")},
            {"margin": 0.0},
        ],
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(min_value=-10, max_value=10), min_size=1, max_size=8),
    st.floats(min_value=0, max_value=5),
)
def test_penalty_nonnegative(w, lam):
    for p in (1, 2):
        assert float(regularization_penalty(t64(w), lam, p)) >= 0.0


def test_all_losses_nonnegative(rng):
    for _ in range(20):
        b, m, k, c = 4, 5, 3, 3
        x = [t64(rng.random((b, m))) for _ in range(4)]
        assert float(reconstruction_loss(*x)) >= 0.0
        logits = t64(rng.normal(0, 2, (b, c)))
        y = torch.tensor(rng.integers(0, c, b))
        assert float(cross_entropy(logits, y)) >= 0.0
        z1, z2 = t64(rng.normal(0, 1, (b, k))), t64(rng.normal(0, 1, (b, k)))
        y2 = torch.tensor(rng.integers(0, c, b))
        assert float(contrastive_loss(z1, z2, y, y2, 2.0)) >= 0.0


def test_loss_gradients_match_finite_differences(rng):
    # central differences, step 1e-5, on each loss's direct tensor inputs
    h = 1e-5

    def check(fn, *arrays):
        tensors = [t64(a).requires_grad_(True) for a in arrays]
        fn(*tensors).backward()
        for t in tensors:
            grad = t.grad.numpy()
            flat = t.detach().numpy().ravel()
            for idx in range(flat.size):
                original = flat[idx]
                flat[idx] = original + h
                up = float(fn(*[d.detach() for d in tensors]))
                flat[idx] = original - h
                down = float(fn(*[d.detach() for d in tensors]))
                flat[idx] = original
                fd = (up - down) / (2 * h)
                analytic = grad.ravel()[idx]
                denom = max(abs(fd), abs(analytic), 1e-6)
                assert abs(fd - analytic) / denom < 1e-6

    x1, xh1, x2, xh2 = (rng.random((2, 3)) for _ in range(4))
    check(reconstruction_loss, x1, xh1, x2, xh2)
    check(lambda w: regularization_penalty(w, 0.3, 2), rng.random(4) + 0.1)
    y = torch.tensor([0, 1])
    check(lambda a, b: classification_loss(a, b, y, y), rng.normal(0, 1, (2, 2)), rng.normal(0, 1, (2, 2)))
    y2 = torch.tensor([1, 0])
    check(
        lambda a, b: contrastive_loss(a, b, y, y2, 2.0),
        rng.normal(0, 1, (2, 3)),
        rng.normal(0, 1, (2, 3)),
    )
