import itertools
import math

import pytest
import torch

from unity_s2st import core


# --------------------------------------------------------------------------
# grad_check


def test_grad_check_linear_function(f64):
    assert core.grad_check(lambda x: 3 * x, torch.tensor([1.0, 2.0])) < 1e-8


def test_grad_check_constant_function(f64):
    assert core.grad_check(lambda x: torch.tensor(4.0) + 0 * x.sum(), torch.tensor([1.0, -2.0, 0.5])) < 1e-8


def test_grad_check_softmax_sum_of_squares(f64):
    x = torch.tensor([0.3, -1.1, 2.0])
    assert core.grad_check(lambda v: torch.softmax(v, 0).pow(2).sum(), x, step=1e-5) < 1e-6


def test_grad_check_detects_wrong_gradient(f64):
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.pow(2)

        @staticmethod
        def backward(ctx, g):
            return g  # true derivative is 2x

    assert core.grad_check(lambda x: Wrong.apply(x).sum(), torch.tensor([1.5, -0.7])) > 0.1


def test_grad_check_non_finite(f64):
    with pytest.raises(core.NonFiniteError, match="non-finite forward"):
        core.grad_check(lambda x: torch.log(x).sum(), torch.tensor([-1.0, 1.0]))


def test_grad_check_rejects_bad_step(f64):
    with pytest.raises(ValueError):
        core.grad_check(lambda x: x.sum(), torch.ones(2), step=0.0)


@pytest.mark.parametrize("seed", range(10))
def test_ops_pass_grad_check_on_random_inputs(f64, seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, 5, generator=gen)
    q = torch.randn(2, 3, 5, generator=gen)
    target = torch.randint(0, 5, (2, 3), generator=gen)
    mask = torch.tensor([[True, True, True], [True, False, False]])
    assert core.grad_check(lambda v: core.sequence_xent(v, target, mask, 0.2), x) < 1e-4
    assert core.grad_check(lambda v: core.symmetric_kl(v, q, mask), x) < 1e-4
    assert core.grad_check(lambda v: core.ctc_loss(torch.log_softmax(v, -1), [1, 2]), x[0]) < 1e-4


def test_directional_grad_check_on_parameters(f64):
    lin = torch.nn.Linear(3, 2).double()
    x = torch.randn(4, 3, generator=torch.Generator().manual_seed(0))
    errs = core.directional_grad_check(lambda: torch.tanh(lin(x)).pow(2).sum(), dict(lin.named_parameters()), 1e-5)
    assert set(errs) == {"weight", "bias"}
    assert max(errs.values()) < 1e-6


# --------------------------------------------------------------------------
# precision


def test_precision_context_restores():
    before = core.get_precision()
    with core.precision("float64"):
        assert torch.get_default_dtype() == torch.float64
        assert core.get_precision() == "float64"
    assert core.get_precision() == before
    with pytest.raises(ValueError):
        core.set_precision("float16")


# --------------------------------------------------------------------------
# op counter


def test_flops_linear_expected():
    assert core.flops_linear_expected(2, 3, 4) == 24
    assert core.flops_linear_expected(1, 1, 1) == 1


def test_counter_matmul_2x3_by_3x4():
    with core.count_ops() as counter:
        core.matmul(torch.ones(2, 3), torch.ones(3, 4))
    assert counter.total == 24
    assert counter.counts["other"] == 24


def test_counter_categories_sum_to_total():
    with core.count_ops() as counter:
        core.linear(torch.ones(5, 3), torch.ones(4, 3), None, "feed_forward")  # 5*3*4
        core.matmul(torch.ones(2, 2, 3), torch.ones(2, 3, 6), "attention")  # 2*2*6*3
    assert counter.counts["feed_forward"] == 60
    assert counter.counts["attention"] == 72
    assert counter.total == 132 == sum(counter.counts.values())


def test_counter_inactive_outside_scope():
    with core.count_ops() as counter:
        pass
    core.matmul(torch.ones(2, 3), torch.ones(3, 4))
    assert counter.total == 0


# --------------------------------------------------------------------------
# label-smoothed cross entropy


@pytest.mark.parametrize("eps", [0.0, 0.2, 0.7])
def test_xent_uniform_logits_is_log_v(f64, eps):
    assert float(core.xent_label_smoothed(torch.zeros(7), 3, eps)) == pytest.approx(math.log(7), abs=1e-12)


def test_xent_eps_zero_is_nll(f64):
    logits = torch.tensor([0.5, -1.0, 2.0])
    nll = -math.log(math.exp(-1.0) / (math.exp(0.5) + math.exp(-1.0) + math.exp(2.0)))
    assert float(core.xent_label_smoothed(logits, 1, 0.0)) == pytest.approx(nll, abs=1e-12)


def test_xent_hand_oracle_two_classes(f64):
    # p0 = sigmoid(2); NLL0 = -ln p0, NLL1 = -ln(1 - p0)
    p0 = 1 / (1 + math.exp(-2))
    nll0, nll1 = -math.log(p0), -math.log(1 - p0)
    expected = 0.8 * nll0 + 0.2 * 0.5 * (nll0 + nll1)
    assert expected == pytest.approx(0.32692801104297253, abs=1e-12)
    assert float(core.xent_label_smoothed(torch.tensor([2.0, 0.0]), 0, 0.2)) == pytest.approx(expected, abs=1e-12)


def test_xent_target_out_of_range():
    with pytest.raises(ValueError):
        core.xent_label_smoothed(torch.zeros(3), 3, 0.1)
    with pytest.raises(ValueError):
        core.xent_label_smoothed(torch.zeros(3), 0, 1.0)


def test_sequence_xent_token_mean_then_batch_mean(f64):
    logits = torch.zeros(2, 3, 4)
    target = torch.zeros(2, 3, dtype=torch.long)
    mask = torch.tensor([[True, True, True], [True, False, False]])
    assert float(core.sequence_xent(logits, target, mask, 0.0)) == pytest.approx(math.log(4))


# --------------------------------------------------------------------------
# KL


def test_kl_identical_is_zero(f64):
    p = torch.randn(3, 5, generator=torch.Generator().manual_seed(1))
    assert abs(float(core.kl_categorical(p, p))) < 1e-12


def test_kl_hand_oracle_and_asymmetry(f64):
    p = torch.log(torch.tensor([0.9, 0.1]))
    q = torch.log(torch.tensor([0.5, 0.5]))
    pq = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    qp = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert pq == pytest.approx(0.3680642071684971, abs=1e-12)
    assert float(core.kl_categorical(p, q)) == pytest.approx(pq, abs=1e-12)
    assert float(core.kl_categorical(q, p)) == pytest.approx(qp, abs=1e-12)
    assert abs(pq - qp) > 0.1
    assert float(core.symmetric_kl(p, q)) == pytest.approx(0.5 * (pq + qp), abs=1e-12)


def test_kl_sum_over_positions_divided_by_length(f64):
    p = torch.log(torch.tensor([[0.9, 0.1], [0.5, 0.5], [0.5, 0.5]]))
    q = torch.log(torch.tensor([[0.5, 0.5], [0.5, 0.5], [0.9, 0.1]]))
    pq = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    qp = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert float(core.kl_categorical(p, q)) == pytest.approx((pq + qp) / 3, abs=1e-12)
    mask = torch.tensor([True, True, False])
    assert float(core.kl_categorical(p, q, mask)) == pytest.approx(pq / 2, abs=1e-12)


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        core.kl_categorical(torch.zeros(2, 3), torch.zeros(2, 4))


# --------------------------------------------------------------------------
# CTC


def brute_force_ctc(probs: list[list[float]], target: list[int], blank: int) -> float:
    """-log of the summed probability of every path collapsing to ``target``."""
    total = 0.0
    for path in itertools.product(range(len(probs[0])), repeat=len(probs)):
        collapsed = [k for i, k in enumerate(path) if (i == 0 or k != path[i - 1]) and k != blank]
        if collapsed == target:
            total += math.prod(probs[t][k] for t, k in enumerate(path))
    return -math.log(total)


def test_ctc_single_frame(f64):
    lp = torch.log(torch.full((1, 3), 1 / 3))
    assert float(core.ctc_loss(lp, [0])) == pytest.approx(-math.log(1 / 3), abs=1e-12)


def test_ctc_two_frames_three_paths(f64):
    lp = torch.log(torch.full((2, 3), 1 / 3))
    assert float(core.ctc_loss(lp, [0])) == pytest.approx(-math.log(3 / 9), abs=1e-12)


def test_ctc_empty_target(f64):
    lp = torch.log(torch.full((2, 3), 1 / 3))
    assert float(core.ctc_loss(lp, [])) == pytest.approx(2 * math.log(3), abs=1e-12)


def test_ctc_target_too_long():
    lp = torch.log(torch.full((2, 3), 1 / 3))
    with pytest.raises(ValueError, match="target too long"):
        core.ctc_loss(lp, [0, 1, 0])
    with pytest.raises(ValueError, match="target too long"):
        core.ctc_loss(lp, [1, 1])  # a repeat needs a blank in between


def test_ctc_matches_brute_force_random(f64):
    gen = torch.Generator().manual_seed(3)
    lp = torch.log_softmax(torch.randn(5, 4, generator=gen), -1)
    for target in ([0], [1, 1], [0, 2, 1], [2, 2, 0]):
        expected = brute_force_ctc(lp.exp().tolist(), target, 3)
        assert float(core.ctc_loss(lp, target)) == pytest.approx(expected, abs=1e-10)


def test_ctc_batch_matches_per_sequence(f64):
    gen = torch.Generator().manual_seed(4)
    lp = torch.log_softmax(torch.randn(3, 6, 4, generator=gen), -1)
    lengths = torch.tensor([6, 3, 1])
    targets = [[0, 1, 1], [2], []]
    batch = core.ctc_loss_batch(lp, lengths, targets)
    for b in range(3):
        single = core.ctc_loss(lp[b, : lengths[b]], targets[b])
        assert float(batch[b]) == pytest.approx(float(single), abs=1e-12)


def test_ctc_gradients_finite_with_impossible_paths(f64):
    x = torch.randn(4, 3, generator=torch.Generator().manual_seed(0), requires_grad=True)
    core.ctc_loss(torch.log_softmax(x, -1), [0, 1]).backward()
    assert torch.isfinite(x.grad).all()


# --------------------------------------------------------------------------
# dropout


def test_dropout_identity_without_rng():
    x = torch.ones(10)
    assert torch.equal(core.dropout(x, 0.5, None), x)


def test_dropout_seeded_and_inverted_scaling():
    x = torch.ones(1000)
    a = core.dropout(x, 0.25, torch.Generator().manual_seed(7))
    b = core.dropout(x, 0.25, torch.Generator().manual_seed(7))
    assert torch.equal(a, b)
    kept = a[a != 0]
    assert torch.allclose(kept, torch.full_like(kept, 1 / 0.75))
    assert 0.15 < float((a == 0).float().mean()) < 0.35
