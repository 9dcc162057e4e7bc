import math
from collections import Counter

import pytest
import torch

from dest_qa.numeric import grad_check
from dest_qa.objectives import (
    AlignHead,
    LossWeights,
    align_loss,
    combine_losses,
    qa_loss,
    qa_targets,
    trm_loss,
)


def test_trm_loss_uniform_logits():
    assert trm_loss(torch.zeros(3), 1).item() == pytest.approx(math.log(3))


def test_trm_loss_two_candidates_by_hand():
    loss = trm_loss(torch.tensor([[1.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(0.3133, abs=1e-4)


def test_trm_loss_candidate_mask_ignores_padding():
    logits = torch.tensor([[0.0, 0.0, 50.0]])
    mask = torch.tensor([[True, True, False]])
    assert trm_loss(logits, [0], mask).item() == pytest.approx(math.log(2))


def test_trm_loss_label_range():
    with pytest.raises(ValueError, match="candidate range"):
        trm_loss(torch.zeros(3), 3)
    with pytest.raises(ValueError, match="candidate range"):
        trm_loss(torch.zeros(1, 3), [2], torch.tensor([[True, True, False]]))
    with pytest.raises(ValueError, match="labels for"):
        trm_loss(torch.zeros(2, 3), [0])


def test_align_loss_single_pair_is_zero():
    v = torch.tensor([[1.0, 0.0]])
    assert align_loss(v, v, torch.tensor(0.07)).item() == pytest.approx(0.0, abs=1e-6)


def test_align_loss_orthonormal_pairs_by_hand():
    eye = torch.eye(2)
    assert align_loss(eye, eye, torch.tensor(1.0)).item() == pytest.approx(0.3133, abs=1e-4)


def test_align_loss_is_finite_at_low_temperature():
    v = torch.nn.functional.normalize(torch.randn(4, 3, generator=torch.Generator().manual_seed(0)), dim=-1)
    c = v.flip(0)
    assert torch.isfinite(align_loss(v, c, torch.tensor(1e-4)))


def test_align_loss_shape_checks():
    with pytest.raises(ValueError, match="matching"):
        align_loss(torch.zeros(2, 3), torch.zeros(3, 3), torch.tensor(1.0))
    with pytest.raises(ValueError, match="matching"):
        align_loss(torch.zeros(0, 3), torch.zeros(0, 3), torch.tensor(1.0))


def test_align_head_temperature_and_gradients():
    head = AlignHead(dim=4, projection_dim=2, init_temperature=0.07)
    assert head.temperature.item() == pytest.approx(0.07)
    g = torch.Generator().manual_seed(1)
    loss = head(torch.randn(3, 4, generator=g), torch.randn(3, 4, generator=g))
    loss.backward()
    assert head.log_temperature.grad is not None
    assert head.video_projection.weight.grad.abs().sum() > 0


def test_combine_losses_unweighted_and_uncertainty():
    l_trm, l_align = torch.tensor(0.3), torch.tensor(0.5)
    assert combine_losses(l_trm, l_align, LossWeights("unweighted")).item() == pytest.approx(0.8)

    weights = LossWeights("uncertainty")
    assert combine_losses(l_trm, l_align, weights).item() == pytest.approx(0.4)

    with torch.no_grad():
        weights.log_var_trm.fill_(-math.log(2))
        weights.log_var_align.fill_(-math.log(2))
    assert combine_losses(l_trm, l_align, weights).item() == pytest.approx(0.8 - 2 * math.log(2), abs=1e-6)


def test_uncertainty_weight_is_stationary_where_loss_matches_variance():
    weights = LossWeights("uncertainty")
    combine_losses(torch.tensor(2.0), torch.tensor(1.0), weights).backward()
    # d/ds1 = 1 - 0.5 * exp(-s1) * l_trm
    assert weights.log_var_trm.grad.item() == pytest.approx(0.0, abs=1e-6)
    assert weights.log_var_align.grad.item() == pytest.approx(0.5)


def test_loss_weights_rejects_unknown_mode():
    with pytest.raises(ValueError):
        LossWeights("average")


def test_qa_loss_uniform_and_out_of_vocabulary():
    skipped = Counter()
    loss = qa_loss(torch.zeros(2, 2), [7, 99], vocabulary=[3, 7], skipped=skipped)
    assert loss.item() == pytest.approx(math.log(2))
    assert skipped["out_of_vocabulary"] == 1


def test_qa_loss_all_out_of_vocabulary_is_zero():
    logits = torch.zeros(1, 2, requires_grad=True)
    loss = qa_loss(logits, [5], vocabulary=[3, 7])
    assert loss.item() == 0.0
    loss.backward()
    assert torch.equal(logits.grad, torch.zeros(1, 2))


def test_qa_loss_width_check():
    with pytest.raises(ValueError, match="vocabulary of 3"):
        qa_loss(torch.zeros(1, 2), [3], vocabulary=[3, 7, 8])


def test_qa_targets():
    targets = qa_targets([8, 1, 3], [3, 8])
    assert targets.indices.tolist() == [1, 0]
    assert targets.keep.tolist() == [True, False, True]


def unit_rows(n, dim, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.nn.functional.normalize(torch.randn(n, dim, generator=g, dtype=torch.float64), dim=-1)


def test_align_loss_invariant_under_batch_permutation():
    v, c = unit_rows(6, 5, 2), unit_rows(6, 5, 3)
    order = torch.randperm(6, generator=torch.Generator().manual_seed(4))
    temperature = torch.tensor(0.1, dtype=torch.float64)
    assert align_loss(v[order], c[order], temperature).item() == pytest.approx(
        align_loss(v, c, temperature).item(), abs=1e-6
    )


def test_align_loss_of_unrelated_pairs_is_near_log_batch():
    batch = 16
    losses = [
        align_loss(unit_rows(batch, 256, seed), unit_rows(batch, 256, seed + 100), torch.tensor(1.0)).item()
        for seed in range(10)
    ]
    assert sum(losses) / len(losses) == pytest.approx(math.log(batch), rel=0.1)


def test_qa_loss_gradient_matches_finite_differences():
    logits = torch.randn(3, 4, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    logits.requires_grad_(True)
    report = grad_check(lambda: qa_loss(logits, [7, 2, 9], vocabulary=[2, 5, 7, 9]), {"logits": logits})
    assert report.passed, report.summary()
