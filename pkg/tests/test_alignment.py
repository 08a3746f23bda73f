import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from auxlatent import numkernel as nk
from auxlatent.alignment import AlignWeights, align_loss, consistency_loss, stage2_loss, stage3_ce

rows = arrays(np.float64, (3, 4), elements=st.floats(-5, 5, allow_nan=False))


def t(x):
    return torch.as_tensor(x, dtype=nk.DTYPE)


def test_identical_states_have_zero_loss():
    h = t(np.random.default_rng(0).normal(size=(10, 6)))
    assert align_loss(h, h.clone()).item() == pytest.approx(0.0, abs=1e-15)
    assert consistency_loss(h, h.clone()).item() == pytest.approx(0.0, abs=1e-15)


def test_opposite_unit_row():
    assert align_loss(t([[-1.0, 0.0]]), t([[1.0, 0.0]]), AlignWeights(1, 1)).item() == pytest.approx(4.0)


def test_orthogonal_rows_have_unit_consistency():
    assert consistency_loss(t([[0.0, 2.0], [3.0, 0.0]]), t([[5.0, 0.0], [0.0, 1.0]])).item() == 1.0


@given(rows, rows, st.floats(0.1, 10))
def test_align_loss_nonnegative_and_cosine_scale_invariant(a, b, c):
    a, b = t(a), t(b)
    assert align_loss(a, b) >= -1e-12
    cos_only = AlignWeights(1.0, 0.0)
    if float(a.norm(dim=-1).min()) > 1e-3 and float(b.norm(dim=-1).min()) > 1e-3:
        assert align_loss(c * a, b, cos_only).item() == pytest.approx(align_loss(a, b, cos_only).item(), abs=1e-12)


def test_zero_row_is_guarded():
    out = align_loss(t([[0.0, 0.0]]), t([[1.0, 0.0]]))
    assert math.isfinite(out.item())


def test_weights_validated():
    with pytest.raises(ValueError):
        AlignWeights(0.0, 0.0)
    with pytest.raises(ValueError):
        AlignWeights(-1.0, 1.0)


def test_consistency_blocks_gradient_to_image_stream():
    rng = np.random.default_rng(1)
    h_txt = t(rng.normal(size=(4, 5))).requires_grad_()
    h_img = t(rng.normal(size=(4, 5))).requires_grad_()
    consistency_loss(h_txt, h_img).backward()
    assert h_img.grad is None or torch.count_nonzero(h_img.grad) == 0
    assert torch.count_nonzero(h_txt.grad) > 0


@pytest.mark.parametrize("args,want", [((0, 0, 0, 0), 0.0), ((1, 0, 0, 0), 0.1), ((2, 0.5, 0.7, 0.3), 1.7)])
def test_stage2_combination(args, want):
    assert stage2_loss(*args) == pytest.approx(want, abs=1e-15)


def test_stage3_ce_examples():
    targets = torch.tensor([[2, 0, 1]])
    mask = torch.ones(1, 3, dtype=torch.bool)
    one_hot = torch.nn.functional.one_hot(targets, 5).to(nk.DTYPE) * 80.0
    assert stage3_ce(one_hot, targets, mask).item() == pytest.approx(0.0, abs=1e-12)
    assert stage3_ce(torch.zeros(1, 3, 5, dtype=nk.DTYPE), targets, mask).item() == pytest.approx(math.log(5))


def test_stage3_ce_rejects_empty_mask():
    with pytest.raises(ValueError):
        stage3_ce(torch.zeros(1, 2, 3, dtype=nk.DTYPE), torch.zeros(1, 2, dtype=torch.long),
                  torch.zeros(1, 2, dtype=torch.bool))


def test_shape_mismatch_rejected():
    with pytest.raises(nk.ShapeError):
        align_loss(torch.zeros(2, 3, dtype=nk.DTYPE), torch.zeros(3, 2, dtype=nk.DTYPE))
