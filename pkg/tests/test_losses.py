import math

import numpy as np
import pytest
import torch

from cattle_interaction.losses import (
    EPS,
    UndefinedSimilarityError,
    cosine_sim,
    individual_loss,
    interaction_loss,
    nt_xent_batch,
    total_loss,
)

from oracles import central_difference, literal_nt_xent

T = torch.tensor


def rel_err(a, b):
    a, b = torch.as_tensor(a).flatten(), torch.as_tensor(b).flatten()
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


class TestCosine:
    def test_identity(self):
        z = T([0.3, -1.2, 2.0])
        assert float(cosine_sim(z, z)) == pytest.approx(1.0)

    def test_antipodal(self):
        z = T([0.3, -1.2, 2.0])
        assert float(cosine_sim(z, -z)) == pytest.approx(-1.0)

    def test_orthogonal(self):
        assert float(cosine_sim(T([1.0, 0.0]), T([0.0, 1.0]))) == 0.0

    def test_zero_vector(self):
        with pytest.raises(UndefinedSimilarityError):
            cosine_sim(T([0.0, 0.0]), T([1.0, 0.0]))


class TestNTXent:
    def test_single_pair_identical(self):
        z = T([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
        assert float(nt_xent_batch(z, 0.5)) == pytest.approx(0.0, abs=1e-7)

    def test_two_pair_hand_case(self):
        z = T([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
        expected = math.log(1 + 2 * math.exp(-2))
        assert expected == pytest.approx(0.23956, abs=5e-5)
        assert literal_nt_xent(z, 0.5) == pytest.approx(expected, abs=1e-12)
        assert float(nt_xent_batch(z, 0.5)) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("m", [1, 2, 4, 8])
    @pytest.mark.parametrize("dim", [4, 128])
    @pytest.mark.parametrize("asym", [False, True])
    def test_matches_literal_loops(self, m, dim, asym):
        g = torch.Generator().manual_seed(m * 1000 + dim)
        for temp in (0.1, 0.5, 2.0):
            z = torch.randn(2 * m, dim, generator=g, dtype=torch.float64)
            got = float(nt_xent_batch(z, temp, asymmetric_temperature=asym))
            assert got == pytest.approx(literal_nt_xent(z, temp, asym), abs=1e-6)

    def test_scale_invariance(self):
        z = torch.randn(8, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
        base = nt_xent_batch(z, 0.5)
        for s in (0.01, 3.0, 1e4):
            assert float(nt_xent_batch(z * s, 0.5)) == pytest.approx(float(base), abs=1e-10)

    def test_monotone_in_positive_similarity(self):
        # rotate view 1 towards view 0; everything else fixed
        z = torch.randn(6, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
        prev = None
        for t in np.linspace(0, 1, 6):
            w = z.clone()
            w[1] = (1 - t) * z[1] / z[1].norm() + t * z[0] / z[0].norm()
            loss = float(nt_xent_batch(w, 0.5))
            if prev is not None:
                assert loss < prev
            prev = loss

    def test_uniform_similarity_regime(self):
        # all embeddings identical: every similarity equals 1 -> loss = ln(2M - 1)
        z = torch.ones(10, 4)
        assert float(nt_xent_batch(z, 0.5)) == pytest.approx(math.log(9), abs=1e-5)

    @pytest.mark.parametrize("temp", [0.0, -1.0])
    def test_bad_temperature(self, temp):
        with pytest.raises(ValueError):
            nt_xent_batch(torch.randn(4, 3), temp)

    def test_odd_count(self):
        with pytest.raises(ValueError):
            nt_xent_batch(torch.randn(3, 3), 0.5)

    def test_zero_embedding(self):
        z = torch.randn(4, 3)
        z[2] = 0
        with pytest.raises(UndefinedSimilarityError):
            nt_xent_batch(z, 0.5)


class TestInteractionLoss:
    def test_half_everywhere(self):
        for targets in ([1, 0, 0], [0, 0, 0], [1, 1, 0]):
            loss = interaction_loss(torch.full((1, 3), 0.5), T([targets]))
            assert float(loss) == pytest.approx(math.log(2), abs=1e-6)

    def test_paper_mode_is_halved(self):
        loss = interaction_loss(torch.full((2, 3), 1.0), T([[1, 0, 0], [0, 1, 0]]), upper=2.0)
        assert float(loss) == pytest.approx(math.log(2), abs=1e-6)

    def test_perfect_prediction(self):
        targets = T([[1.0, 0.0, 1.0]], dtype=torch.float64)
        scores = torch.where(targets > 0, 1 - EPS, EPS).to(torch.float64)
        loss = float(interaction_loss(scores, targets))
        assert 0 <= loss <= 2 * EPS * math.log(1 / EPS)

    def test_permutation_equivariance(self):
        g = torch.Generator().manual_seed(0)
        s = torch.rand(4, 5, generator=g)
        t = (torch.rand(4, 5, generator=g) > 0.5).float()
        perm = torch.randperm(5, generator=g)
        assert float(interaction_loss(s[:, perm], t[:, perm])) == pytest.approx(float(interaction_loss(s, t)))

    def test_softmax_variant(self):
        s = T([[0.0, 0.0, 0.0]])
        assert float(interaction_loss(s, T([[0.0, 1.0, 0.0]]), kind="softmax")) == pytest.approx(math.log(3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            interaction_loss(torch.rand(1, 3), torch.rand(1, 2))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            interaction_loss(torch.rand(1, 3), torch.rand(1, 3), kind="focal")


class TestIndividualLoss:
    def test_uniform(self):
        d = torch.full((1, 4), 0.25)
        assert float(individual_loss(d, d, T([0]), T([3]))) == pytest.approx(math.log(4))

    def test_one_hot(self):
        d = T([[0.0, 1.0, 0.0, 0.0]])
        assert float(individual_loss(d, d, T([1]), T([1]))) == 0.0

    def test_monotone(self):
        prev = None
        for p in (0.9, 0.7, 0.5, 0.2, 0.05):
            d = T([[p, (1 - p) / 3, (1 - p) / 3, (1 - p) / 3]])
            loss = float(individual_loss(d, d, T([0]), T([0])))
            if prev is not None:
                assert loss > prev
            prev = loss

    def test_invalid_index(self):
        d = torch.full((1, 4), 0.25)
        with pytest.raises(IndexError):
            individual_loss(d, d, T([4]), T([0]))


class TestTotalLoss:
    def test_sum(self):
        r = total_loss(T(1.0), T(0.5))
        assert float(r.l_entire) == 1.5

    def test_zero(self):
        assert float(total_loss(T(0.0), T(0.0)).l_entire) == 0.0


def _toy_problem(seed=0, dim=16):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(3, dim, dtype=torch.float64, generator=g, requires_grad=True)
    return logits, g


def test_total_loss_gradient_is_sum_of_parts():
    logits, g = _toy_problem()
    targets = (torch.rand(1, 16, generator=g) > 0.5).double()
    act = torch.tensor([3]), torch.tensor([11])

    def parts():
        l_ind = individual_loss(torch.softmax(logits[0:1], -1), torch.softmax(logits[1:2], -1), *act)
        l_int = interaction_loss(torch.sigmoid(logits[2:3]), targets)
        return l_ind, l_int

    l_ind, l_int = parts()
    (g_ind,) = torch.autograd.grad(l_ind, logits)
    (g_int,) = torch.autograd.grad(l_int, logits)
    (g_all,) = torch.autograd.grad(total_loss(*parts()).l_entire, logits)
    torch.testing.assert_close(g_all, g_ind + g_int)
    fd = central_difference(lambda: total_loss(*parts()).l_entire, [logits.detach()], step=1e-3)[0]
    assert rel_err(g_all, fd) < 1e-4


@pytest.mark.parametrize("fn", ["nt_xent", "interaction", "individual"])
def test_loss_gradients_match_finite_differences(fn):
    logits, g = _toy_problem(seed=7)
    z = torch.randn(8, 16, dtype=torch.float64, generator=g, requires_grad=True)
    targets = (torch.rand(3, 16, generator=g) > 0.5).double()
    funcs = {
        "nt_xent": (lambda: nt_xent_batch(z, 0.5), z),
        "interaction": (lambda: interaction_loss(torch.sigmoid(logits), targets), logits),
        "individual": (lambda: individual_loss(torch.softmax(logits[:1], -1), torch.softmax(logits[1:2], -1),
                                               torch.tensor([2]), torch.tensor([9])), logits),
    }
    f, x = funcs[fn]
    (analytic,) = torch.autograd.grad(f(), x)
    fd = central_difference(f, [x.detach()], step=1e-3)[0]
    assert rel_err(analytic, fd) < 1e-4
