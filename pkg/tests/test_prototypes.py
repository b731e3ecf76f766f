import math

import numpy as np
import pytest
import torch

from histomoe.prototypes import (
    PrototypeBank,
    init_prototypes,
    init_prototypes_kmeans,
    init_prototypes_random_unit,
    nearest_exemplars,
    proto_distance,
    proto_logits,
    proto_loss,
)


class TestDistance:
    def test_identical_vectors_zero(self):
        f = torch.tensor([0.3, -1.2, 2.0])
        assert proto_distance(f, f).item() == pytest.approx(0.0, abs=1e-7)

    def test_antipodal_is_two(self):
        f = torch.tensor([1.0, 2.0, -0.5])
        assert proto_distance(f, -f).item() == pytest.approx(2.0, abs=1e-6)

    def test_orthogonal_unit_vectors_sqrt2(self):
        d = proto_distance(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))
        assert d.item() == pytest.approx(math.sqrt(2.0), abs=1e-6)

    def test_scale_invariance(self, rng):
        for _ in range(50):
            f = torch.as_tensor(rng.standard_normal(8))
            p = torch.as_tensor(rng.standard_normal(8))
            alpha = float(rng.uniform(0.01, 100.0))
            assert proto_distance(alpha * f, p).item() == pytest.approx(
                proto_distance(f, p).item(), abs=1e-9
            )

    def test_range_bound(self, rng):
        f = torch.as_tensor(rng.standard_normal((100, 6)))
        p = torch.as_tensor(rng.standard_normal((100, 6)))
        d = proto_distance(f, p)
        assert (d >= 0).all() and (d <= 2.0 + 1e-9).all()


class TestLogits:
    def test_feature_equal_to_prototype_gives_zero_logit(self):
        bank = init_prototypes_random_unit(3, 2, 5, seed=0)
        f = bank[1, 0].unsqueeze(0) * 4.0  # scaled copy of a class-1 prototype
        logits = proto_logits(f, bank)
        assert logits[0, 1].item() == pytest.approx(0.0, abs=1e-6)
        assert logits[0, 1] == logits.max()

    def test_min_over_prototypes(self):
        # class prototypes at distances 0.3 and 0.9 -> logit -0.3
        f = torch.tensor([[1.0, 0.0]])
        theta_near = 2 * math.asin(0.15)  # chord 0.3
        theta_far = 2 * math.asin(0.45)  # chord 0.9
        bank = torch.stack(
            [
                torch.stack(
                    [
                        torch.tensor([math.cos(theta_near), math.sin(theta_near)]),
                        torch.tensor([math.cos(theta_far), math.sin(theta_far)]),
                    ]
                )
            ]
        )
        bank = torch.cat([bank, torch.tensor([[[0.0, -1.0], [0.0, -1.0]]])])
        logits = proto_logits(f, bank)
        assert logits[0, 0].item() == pytest.approx(-0.3, abs=1e-6)

    def test_identical_prototypes_tie(self):
        p = torch.nn.functional.normalize(torch.randn(4), dim=0)
        bank = p.expand(3, 2, 4).contiguous()
        logits = proto_logits(torch.randn(5, 4), bank)
        assert torch.allclose(logits[:, 0], logits[:, 1])
        assert torch.allclose(logits[:, 0], logits[:, 2])

    def test_bounded_in_minus_two_zero(self, rng):
        bank = init_prototypes_random_unit(8, 3, 16, seed=1)
        f = torch.as_tensor(rng.standard_normal((1000, 16)) * 10, dtype=torch.float32)
        logits = proto_logits(f, bank)
        assert (logits <= 0).all() and (logits >= -2.0 - 1e-6).all()


class TestLoss:
    def _bank_with_distances(self, d_own, d_other):
        # 2-D construction: place class-0 prototype at chord distance d_own
        # from [1, 0] and class-1 prototype at chord distance d_other
        def at_chord(d):
            theta = 2 * math.asin(d / 2)
            return torch.tensor([math.cos(theta), math.sin(theta)])

        return torch.stack([at_chord(d_own).unsqueeze(0), at_chord(d_other).unsqueeze(0)])

    def test_perfect_pull_satisfied_margin_zero_loss(self):
        bank = self._bank_with_distances(0.0, 1.2)
        f = torch.tensor([[1.0, 0.0]])
        loss = proto_loss(f, torch.tensor([0]), bank, margin=0.3, push_weight=1.0)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_hand_evaluation(self):
        # D_y=0.5, min other=0.6, margin 0.3, beta 1 -> 0.5 + 0.2 = 0.7
        bank = self._bank_with_distances(0.5, 0.6)
        f = torch.tensor([[1.0, 0.0]])
        loss = proto_loss(f, torch.tensor([0]), bank, margin=0.3, push_weight=1.0)
        assert loss.item() == pytest.approx(0.7, abs=1e-6)

    def test_beta_zero_pure_pull(self):
        bank = self._bank_with_distances(0.5, 0.1)
        f = torch.tensor([[1.0, 0.0]])
        loss = proto_loss(f, torch.tensor([0]), bank, margin=0.3, push_weight=0.0)
        assert loss.item() == pytest.approx(0.5, abs=1e-6)

    def test_single_class_rejected(self):
        bank = torch.randn(1, 2, 4)
        with pytest.raises(ValueError):
            proto_loss(torch.randn(1, 4), torch.tensor([0]), bank, 0.5, 1.0)

    def test_nonnegative_everywhere(self, rng):
        bank = init_prototypes_random_unit(4, 3, 8, seed=2)
        f = torch.as_tensor(rng.standard_normal((200, 8)), dtype=torch.float32)
        y = torch.as_tensor(rng.integers(0, 4, 200))
        assert proto_loss(f, y, bank, 0.5, 1.0).item() >= 0.0

    def test_hinge_inactive_gradient_zero(self):
        # when the margin is satisfied, d(loss)/d(other-class prototype) == 0
        bank = torch.nn.Parameter(self._bank_with_distances(0.1, 1.5))
        f = torch.tensor([[1.0, 0.0]])
        loss = proto_loss(f, torch.tensor([0]), bank, margin=0.3, push_weight=1.0)
        loss.backward()
        assert torch.allclose(bank.grad[1], torch.zeros_like(bank.grad[1]))
        assert not torch.allclose(bank.grad[0], torch.zeros_like(bank.grad[0]))

    def test_pull_step_decreases_own_distance(self):
        # one beta=0 gradient step on the feature reduces D_y
        bank = init_prototypes_random_unit(3, 2, 6, seed=3)
        f = torch.nn.Parameter(torch.randn(1, 6, dtype=torch.float64))
        bank = bank.double()
        y = torch.tensor([1])
        loss = proto_loss(f, y, bank, margin=0.5, push_weight=0.0)
        loss.backward()
        with torch.no_grad():
            f2 = f - 1e-3 * f.grad
        d_before = loss.item()
        d_after = proto_loss(f2, y, bank, margin=0.5, push_weight=0.0).item()
        assert d_after < d_before


class TestInit:
    def test_random_unit_reproducible_unit_rows(self):
        a = init_prototypes_random_unit(4, 3, 16, seed=5)
        b = init_prototypes_random_unit(4, 3, 16, seed=5)
        assert torch.equal(a, b)
        assert torch.allclose(a.norm(dim=-1), torch.ones(4, 3), atol=1e-6)

    def test_kmeans_j1_is_normalized_class_mean(self, rng):
        feats = rng.standard_normal((30, 4)).astype(np.float64)
        labels = np.repeat([0, 1, 2], 10)
        bank = init_prototypes_kmeans(feats, labels, 3, 1, seed=0)
        for c in range(3):
            mean = feats[labels == c].mean(axis=0)
            expected = mean / np.linalg.norm(mean)
            assert np.allclose(bank[c, 0].numpy(), expected, atol=1e-5)

    def test_kmeans_two_subclusters_centroids_in_hulls(self, rng):
        # two well-separated 2-D subclusters; each centroid must stay inside
        # its subcluster's bounding box (brute-force oracle on toy data)
        left = rng.normal(-5.0, 0.2, (20, 2))
        right = rng.normal(5.0, 0.2, (20, 2))
        feats = np.vstack([left, right])
        labels = np.zeros(40, dtype=int)
        extra = rng.normal(0.0, 0.3, (8, 2)) + 20.0  # second class, far away
        feats = np.vstack([feats, extra])
        labels = np.concatenate([labels, np.ones(8, dtype=int)])
        bank = init_prototypes_kmeans(feats, labels, 2, 2, seed=0).numpy()
        c0 = bank[0] * np.linalg.norm(feats, axis=1).mean()  # rescale for sign check
        sides = sorted(np.sign(c0[:, 0]))
        assert sides == [-1.0, 1.0]  # one centroid per subcluster

    def test_kmeans_falls_back_when_class_too_small(self, rng):
        feats = rng.standard_normal((5, 4))
        labels = np.array([0, 0, 0, 1, 1])
        with pytest.warns(UserWarning, match="random init"):
            bank = init_prototypes_kmeans(feats, labels, 2, 3, seed=0)
        assert bank.shape == (2, 3, 4)

    def test_dispatch(self):
        with pytest.raises(ValueError, match="strategy"):
            init_prototypes("bogus", 2, 2, 4)
        with pytest.raises(ValueError, match="features"):
            init_prototypes("kmeans_per_class", 2, 2, 4)


class TestBankModule:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            PrototypeBank(4, 2, 8, margin=0.0)
        with pytest.raises(ValueError):
            PrototypeBank(4, 2, 8, push_weight=-1.0)

    def test_set_values_shape_checked(self):
        bank = PrototypeBank(4, 2, 8)
        with pytest.raises(ValueError):
            bank.set_values(torch.zeros(4, 3, 8))

    def test_nearest_exemplars(self, rng):
        protos = init_prototypes_random_unit(2, 1, 4, seed=0)
        feats = np.vstack([protos[0, 0].numpy() * 3.0, protos[1, 0].numpy() * 2.0,
                           rng.standard_normal(4)])
        ids = ["a", "b", "c"]
        out = nearest_exemplars(protos, feats, ids)
        assert out[0][0] == "a"
        assert out[1][0] == "b"
