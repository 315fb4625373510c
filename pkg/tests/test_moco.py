import collections
import math

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from mrn.errors import ContractError, NumericalError
from mrn.model import ProjectionHead
from mrn.moco import (
    MemoryBank,
    MocoConfig,
    bank_gather,
    batch_contrastive_loss,
    contrastive_loss,
    make_teacher,
    momentum_update,
)


def literal_loss(z, pos, neg, tau) -> float:
    """Direct evaluation of the averaged log-softmax-share formula with scalar arithmetic."""
    z, pos, neg = z.tolist(), pos.tolist(), neg.tolist()

    def dot(a, b):
        return sum(x * y for x, y in zip(a, b))

    neg_sum = sum(math.exp(dot(z, n) / tau) for n in neg)
    total = 0.0
    for p in pos:
        e = math.exp(dot(z, p) / tau)
        total += math.log(e / (e + neg_sum))
    return -total / len(pos)


def unit(g, *shape):
    return F.normalize(torch.randn(*shape, generator=g, dtype=torch.float64), dim=-1)


class TestContrastiveLoss:
    def test_no_negatives(self):
        g = torch.Generator().manual_seed(0)
        assert float(contrastive_loss(unit(g, 8), unit(g, 1, 8), torch.zeros(0, 8, dtype=torch.float64), 0.1)) == 0

    def test_symmetric_pair(self):
        z = torch.tensor([1.0, 0.0], dtype=torch.float64)
        k = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert math.isclose(float(contrastive_loss(z, k, k.clone(), 0.1)), math.log(2), rel_tol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_literal(self, seed):
        g = torch.Generator().manual_seed(seed)
        z, pos, neg = unit(g, 8), unit(g, 3, 8), unit(g, 5, 8)
        assert abs(float(contrastive_loss(z, pos, neg, 0.1)) - literal_loss(z, pos, neg, 0.1)) < 1e-9

    def test_positive_with_negatives(self):
        g = torch.Generator().manual_seed(1)
        assert float(contrastive_loss(unit(g, 8), unit(g, 2, 8), unit(g, 1, 8), 0.5)) > 0

    def test_vanishes_as_negatives_recede(self):
        z = torch.tensor([1.0, 0.0], dtype=torch.float64)
        pos = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        neg = torch.tensor([[-1.0, 0.0]], dtype=torch.float64)
        assert float(contrastive_loss(z, pos, neg, 0.01)) < 1e-80

    def test_monotone_in_negative_similarity(self):
        g = torch.Generator().manual_seed(2)
        z, pos, neg = unit(g, 4), unit(g, 2, 4), unit(g, 3, 4)
        base = contrastive_loss(z, pos, neg, 0.2)
        closer = neg.clone()
        closer[1] = F.normalize(closer[1] + 0.5 * z, dim=0)
        assert float(z @ closer[1]) > float(z @ neg[1])
        assert contrastive_loss(z, pos, closer, 0.2) > base

    def test_monotone_in_positive_similarity(self):
        g = torch.Generator().manual_seed(3)
        z, pos, neg = unit(g, 4), unit(g, 1, 4), unit(g, 3, 4)
        closer = F.normalize(pos + 0.5 * z, dim=1)
        assert contrastive_loss(z, closer, neg, 0.2) < contrastive_loss(z, pos, neg, 0.2)

    def test_needs_positive(self):
        with pytest.raises(ContractError):
            contrastive_loss(torch.ones(2), torch.zeros(0, 2), torch.ones(1, 2), 0.1)

    def test_gradient_against_finite_differences(self):
        g = torch.Generator().manual_seed(4)
        z, pos, neg = unit(g, 8), unit(g, 3, 8), unit(g, 5, 8)
        z.requires_grad_(True)
        contrastive_loss(z, pos, neg, 0.1).backward()
        eps = 1e-6
        num = torch.zeros(8, dtype=torch.float64)
        with torch.no_grad():
            for i in range(8):
                zp, zm = z.clone(), z.clone()
                zp[i] += eps
                zm[i] -= eps
                num[i] = (contrastive_loss(zp, pos, neg, 0.1) - contrastive_loss(zm, pos, neg, 0.1)) / (2 * eps)
        assert (z.grad - num).norm() / num.norm() < 1e-6

    def test_batch_version_matches_per_anchor(self):
        g = torch.Generator().manual_seed(5)
        anchors, keys = unit(g, 4, 8), unit(g, 7, 8)
        labels = torch.tensor([0, 1, 1, 0])
        key_labels = torch.tensor([0, 0, 1, 1, 1, 0, 1])
        loss, used = batch_contrastive_loss(anchors, labels, keys, key_labels, 0.1)
        ref = [contrastive_loss(a, keys[key_labels == y], keys[key_labels != y], 0.1) for a, y in zip(anchors, labels)]
        assert used == 4 and abs(float(loss) - float(torch.stack(ref).mean())) < 1e-12

    def test_batch_skips_anchor_without_positive(self):
        g = torch.Generator().manual_seed(6)
        loss, used = batch_contrastive_loss(unit(g, 2, 8), torch.tensor([0, 1]), unit(g, 2, 8),
                                            torch.tensor([0, 0]), 0.1)
        assert used == 1 and torch.isfinite(loss)


class TestConfig:
    def test_defaults(self):
        cfg = MocoConfig()
        assert (cfg.tau, cfg.bank_size, cfg.momentum) == (0.1, 1024, 0.999)

    def test_low_temperature_warns(self, caplog):
        MocoConfig(tau=0.07)
        assert "unstabl" in caplog.text

    def test_invalid(self):
        with pytest.raises(ContractError):
            MocoConfig(tau=0)


class TestProjection:
    def test_unit_norm(self):
        torch.manual_seed(0)
        z = ProjectionHead(32, 128)(torch.randn(5, 32))
        assert z.shape == (5, 128) and torch.allclose(z.norm(dim=-1), torch.ones(5), atol=1e-6)

    def test_scale_invariance_without_bias(self):
        torch.manual_seed(0)
        head = ProjectionHead(16, 8, bias=False).double()
        r = torch.randn(3, 16, dtype=torch.float64)
        assert torch.allclose(head(r), head(7.5 * r), atol=1e-12)

    def test_zero_output_rejected(self):
        head = ProjectionHead(4, 4, bias=False)
        with pytest.raises(NumericalError):
            head(torch.zeros(1, 4))


class TestBank:
    def test_single_enqueue(self):
        bank = MemoryBank(4, 2)
        bank.enqueue(torch.ones(2), 0)
        assert bank.size == [1, 0] and len(bank) == 1

    def test_fifo_eviction(self):
        bank = MemoryBank(4, 1)
        for i in range(1, 7):
            bank.enqueue(torch.tensor([float(i)]), 1)
        assert bank.entries(1).flatten().tolist() == [3, 4, 5, 6]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.lists(st.tuples(st.integers(0, 1), st.integers(-100, 100)), max_size=60))
    def test_matches_reference_deque(self, capacity, ops):
        bank = MemoryBank(capacity, 1)
        ref = [collections.deque(maxlen=capacity), collections.deque(maxlen=capacity)]
        for label, value in ops:
            bank.enqueue(torch.tensor([float(value)]), label)
            ref[label].append(float(value))
            assert bank.size[label] <= capacity
        for c in (0, 1):
            assert bank.entries(c).flatten().tolist() == list(ref[c])

    def test_state_round_trip(self):
        bank = MemoryBank(3, 2)
        for i in range(5):
            bank.enqueue(torch.full((2,), float(i)), i % 2)
        other = MemoryBank(3, 2)
        other.load_state_dict(bank.state_dict())
        assert all(torch.equal(bank.entries(c), other.entries(c)) for c in (0, 1))

    def test_wrong_dim(self):
        with pytest.raises(ContractError):
            MemoryBank(3, 2).enqueue(torch.ones(3), 0)


class TestGather:
    def test_counts(self):
        bank = MemoryBank(1024, 2)
        for _ in range(10):
            bank.enqueue(torch.ones(2), 0)
        for _ in range(7):
            bank.enqueue(torch.ones(2), 1)
        keys = torch.ones(4, 2)
        pos, neg = bank_gather(bank, 0, keys, [0, 0, 1, 1])
        assert (pos.shape[0], neg.shape[0]) == (12, 9)

    def test_cold_start_pair(self):
        pos, neg = bank_gather(MemoryBank(8, 2), 0, torch.ones(2, 2), [0, 1])
        assert (pos.shape[0], neg.shape[0]) == (1, 1)

    def test_cold_start_single_class_skipped(self):
        assert bank_gather(MemoryBank(8, 2), 1, torch.ones(2, 2), [0, 0]) is None


def scalar_model(value):
    m = nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        m.weight.fill_(value)
    return m.double()


class TestMomentum:
    @pytest.mark.parametrize("m, expected", [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5), (0.999, 0.001)])
    def test_spot_values(self, m, expected):
        teacher, student = scalar_model(0.0), scalar_model(1.0)
        momentum_update(teacher, student, m)
        assert abs(teacher.weight.item() - expected) < 1e-15

    def test_teacher_is_frozen_copy(self):
        student = scalar_model(2.0)
        teacher = make_teacher(student)
        assert not any(p.requires_grad for p in teacher.parameters()) and not teacher.training
        loss = (student(torch.ones(1, 1, dtype=torch.float64)) + teacher(torch.ones(1, 1, dtype=torch.float64))).sum()
        loss.backward()
        assert teacher.weight.grad is None and student.weight.grad is not None

    def test_teacher_lag_bound(self):
        # Closed-form lag after a sequence of student moves.
        teacher, student = scalar_model(0.0), scalar_model(0.0)
        m, moved = 0.9, 0.0
        for step in [0.3, -0.1, 0.5, 0.2]:
            with torch.no_grad():
                student.weight.add_(step)
            moved += abs(step)
            momentum_update(teacher, student, m)
            assert abs(teacher.weight.item() - student.weight.item()) <= moved + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            momentum_update(nn.Linear(2, 1), nn.Linear(3, 1), 0.5)
