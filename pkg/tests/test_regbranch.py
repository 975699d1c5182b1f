import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from _fd import directional_check
from iat.geometry import ContractError
from iat.regbranch import (BoxScorer, NumericError, from_param, kl_cross_entropy, label_log_density,
                           predictive_distribution, predictive_logits, refine_box, reg_loss,
                           sample_candidates, to_param)

SIGMA = (0.05, 0.05, 0.1, 0.1)


def test_param_round_trip():
    box = np.array([40.0, 70.5, 22.0, 31.0])
    np.testing.assert_allclose(from_param(to_param(box, 128), 128), box, rtol=1e-14)
    y = torch.as_tensor(to_param(box, 128))
    np.testing.assert_allclose(from_param(y, 128).numpy(), box, rtol=1e-14)


def test_too_few_candidates():
    with pytest.raises(ContractError):
        sample_candidates(np.zeros(4), SIGMA, 1, np.random.default_rng(0))


def test_candidates_are_seed_deterministic():
    y = to_param([64, 64, 30, 30], 128)
    a = sample_candidates(y, SIGMA, 16, np.random.default_rng(5))
    b = sample_candidates(y, SIGMA, 16, np.random.default_rng(5))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_tiny_sigma_collapses_gaussian_half():
    y = to_param([64, 64, 30, 30], 128)
    cands, _ = sample_candidates(y, (1e-12,) * 4, 8, np.random.default_rng(0))
    np.testing.assert_allclose(cands[:4].numpy(), np.tile(y, (4, 1)), atol=1e-10)


def test_gaussian_component_mean():
    y = to_param([50, 70, 20, 40], 128)
    cands, _ = sample_candidates(y, SIGMA, 20_000, np.random.default_rng(1))
    g = cands[:10_000].numpy()
    se = np.asarray(SIGMA) / math.sqrt(len(g))
    assert np.all(np.abs(g.mean(0) - y) < 3 * se)


def test_proposal_density_is_the_mixture():
    y = torch.as_tensor(to_param([64, 64, 30, 30], 128))
    cands, log_q = sample_candidates(y.numpy(), SIGMA, 6, np.random.default_rng(2))
    lo, hi = math.log(0.1), 0.0
    for c, lq in zip(cands, log_q):
        gauss = math.exp(float(label_log_density(c[None], y, SIGMA)))
        inside = all(0 <= float(c[i]) <= 1 for i in (0, 1)) and all(lo <= float(c[i]) <= hi for i in (2, 3))
        unif = 1.0 / (hi - lo) ** 2 if inside else 0.0
        assert float(lq) == pytest.approx(math.log(0.5 * gauss + 0.5 * unif), rel=1e-12)


class _Const(torch.nn.Module):
    def forward(self, features, y):
        return torch.zeros(y.shape[0], dtype=y.dtype)


def test_constant_scorer_gives_importance_weights_alone():
    log_q = torch.log(torch.tensor([0.1, 0.2, 0.7], dtype=torch.float64))
    logits = predictive_logits(_Const(), torch.zeros(1), torch.zeros(3, 4, dtype=torch.float64))
    p = predictive_distribution(logits, log_q)
    w = torch.exp(-log_q)
    torch.testing.assert_close(p, w / w.sum(), rtol=1e-14, atol=0)


def test_two_equal_candidates_split_evenly():
    p = predictive_distribution(torch.zeros(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))
    assert p.tolist() == [0.5, 0.5]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 64))
def test_predictive_distribution_sums_to_one(seed, m):
    gen = torch.Generator().manual_seed(seed)
    p = predictive_distribution(10 * torch.randn(m, generator=gen, dtype=torch.float64),
                                torch.randn(m, generator=gen, dtype=torch.float64))
    assert abs(float(p.sum()) - 1.0) < 1e-9


def test_two_candidate_cross_entropy_is_log_two():
    log_q = torch.zeros(2, dtype=torch.float64)
    label = torch.tensor([0.0, -math.inf], dtype=torch.float64)
    loss = kl_cross_entropy(torch.zeros(2, dtype=torch.float64), log_q, label)
    assert float(loss) == pytest.approx(math.log(2), abs=1e-15)


def test_matching_scorer_leaves_only_the_entropy():
    torch.manual_seed(0)
    log_q = torch.randn(12, dtype=torch.float64)
    log_p = torch.randn(12, dtype=torch.float64)
    w = torch.softmax(log_p - log_q, 0)
    entropy = -float((w * torch.log(w)).sum())
    # logits equal to the label log density make p_hat equal to the label weights
    assert float(kl_cross_entropy(log_p, log_q, log_p)) == pytest.approx(entropy, rel=1e-12)
    for _ in range(20):
        other = kl_cross_entropy(torch.randn(12, dtype=torch.float64), log_q, log_p)
        assert float(other) - entropy >= -1e-6


def test_non_finite_logit_names_the_index():
    class Bad(torch.nn.Module):
        def forward(self, f, y):
            out = torch.zeros(y.shape[0])
            out[3] = float("nan")
            return out

    with pytest.raises(NumericError, match="index 3"):
        predictive_logits(Bad(), torch.zeros(1), torch.zeros(5, 4))


@pytest.fixture
def scorer():
    torch.manual_seed(3)
    return BoxScorer(8, 128, stride=8, pool_size=3, hidden=16).double()


def test_reg_loss_is_deterministic_and_differentiable(scorer):
    feats = torch.randn(8, 16, 16, dtype=torch.float64)
    y = to_param([60.37, 66.91, 30.3, 24.7], 128)
    a = reg_loss(scorer, feats, y, SIGMA, 8, np.random.default_rng(4))
    b = reg_loss(scorer, feats, y, SIGMA, 8, np.random.default_rng(4))
    assert torch.equal(a, b)
    cands = sample_candidates(y, SIGMA, 8, np.random.default_rng(4))
    feats.requires_grad_(True)
    err = directional_check(lambda: reg_loss(scorer, feats, y, SIGMA, 8, None, cands),
                            list(scorer.parameters()) + [feats])
    assert err < 1e-4


def test_scorer_is_differentiable_in_the_box(scorer):
    feats = torch.randn(8, 16, 16, dtype=torch.float64)
    y = torch.as_tensor(np.stack([to_param([60.37, 66.91, 30.3, 24.7], 128), to_param([41.13, 50.77, 21.9, 36.2], 128)]))
    y.requires_grad_(True)
    assert directional_check(lambda: scorer(feats, y).sum(), [y]) < 1e-4


def test_refine_with_zero_steps_returns_the_input(scorer):
    feats = torch.randn(8, 16, 16, dtype=torch.float64)
    y0 = torch.as_tensor(to_param([60.37, 66.91, 30.3, 24.7], 128))
    y, _ = refine_box(lambda v: scorer(feats, v), y0, 0, 0.01)
    assert torch.equal(y, y0)


def test_refine_converges_on_a_concave_quadratic():
    target = torch.tensor([0.4, 0.6, -1.2, -0.9], dtype=torch.float64)

    def score(y):
        return -((y - target) ** 2).sum(-1)

    y, s = refine_box(score, torch.zeros(4, dtype=torch.float64), 100, 0.1)
    assert float((y - target).abs().max()) < 1e-3


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_refine_never_lowers_the_score(seed):
    torch.manual_seed(seed % 1000)
    scorer = BoxScorer(4, 64, stride=8, hidden=8).double()
    gen = torch.Generator().manual_seed(seed)
    feats = torch.randn(4, 8, 8, generator=gen, dtype=torch.float64)
    y0 = torch.tensor([[0.5, 0.5, -1.0, -1.2]], dtype=torch.float64) + 0.05 * torch.randn(1, 4, generator=gen,
                                                                                          dtype=torch.float64)
    with torch.no_grad():
        s0 = scorer(feats, y0)
    _, s = refine_box(lambda v: scorer(feats, v), y0, 5, 0.05, crop_size=64)
    assert bool((s >= s0).all())
