import math
import zlib

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from auxlatent import numkernel as nk

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_softmax_of_equal_logits_is_uniform():
    assert nk.softmax(nk.tensor([0.0, 0.0])).tolist() == [0.5, 0.5]


def test_cosine_of_vector_with_itself():
    u = nk.tensor([[3.0, -4.0, 1.0]])
    assert nk.row_cosine(u, u).item() == pytest.approx(1.0, abs=1e-15)


def test_mse_is_mean_over_elements():
    assert nk.mse(nk.tensor([1.0, 2.0]), nk.tensor([1.0, 4.0])).item() == 2.0
    assert nk.MSE_REDUCTION == "mean"


@given(arrays(np.float64, (3, 7), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = nk.softmax(nk.tensor(x)).sum(-1)
    assert torch.all((s - 1).abs() < 1e-12)


@given(arrays(np.float64, (4, 9), elements=finite))
def test_layer_norm_rows_centered(x):
    y = nk.layer_norm(nk.tensor(x))
    assert float(y.mean(-1).abs().max()) < 1e-10


def test_large_logits_do_not_overflow():
    p = nk.softmax(nk.tensor([1000.0, 1000.0, -1000.0]))
    assert p.tolist() == pytest.approx([0.5, 0.5, 0.0])


def test_shape_mismatch_names_shapes():
    with pytest.raises(nk.ShapeError, match=r"\(2,\) vs \(3,\)"):
        nk.add(nk.tensor([1.0, 2.0]), nk.tensor([1.0, 2.0, 3.0]))
    with pytest.raises(nk.ShapeError, match="matmul"):
        nk.matmul(torch.ones(2, 3, dtype=nk.DTYPE), torch.ones(2, 3, dtype=nk.DTYPE))


def test_non_finite_input_rejected():
    with pytest.raises(nk.NonFiniteError):
        nk.softmax(nk.tensor([1.0, 2.0]) * float("inf"))
    with pytest.raises(nk.NonFiniteError):
        nk.tensor([float("nan")])


def test_backward_square():
    x = nk.tensor(3.0, requires_grad=True)
    nk.backward(nk.mul(x, x))
    assert x.grad.item() == 6.0


def test_backward_accumulates_until_reset():
    x = nk.tensor(3.0, requires_grad=True)
    nk.backward(x * x)
    nk.backward(x * x)
    assert x.grad.item() == 12.0


def test_backward_of_sum_wx_is_broadcast_x():
    w = nk.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x = nk.tensor([1.0, -2.0, 0.5])
    nk.backward(nk.sum_(nk.matmul(w, x)))
    assert torch.equal(w.grad, x.expand(2, 3))


def test_backward_rejects_vector_loss():
    x = nk.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(nk.ShapeError):
        nk.backward(x * 2)


def test_grad_check_square():
    assert nk.grad_check(lambda x: (x * x).sum(), [3.0], step=1e-5) < 1e-7


def test_grad_check_constant_is_zero():
    assert nk.grad_check(lambda x: torch.zeros((), dtype=nk.DTYPE) + 5.0, [1.0, 2.0]) == 0.0


def test_grad_check_reports_non_finite_coordinates():
    err, info = nk.grad_check(lambda x: torch.log(x).sum(), [1e-6, 1.0], step=1e-5, return_details=True)
    assert err == math.inf and info["non_finite"] == [0]


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return torch.ones(3, dtype=nk.DTYPE) * g

    assert nk.grad_check(Bad.apply, [1.5, -2.0, 3.0]) > 0.1


_OPS = {
    "matmul": lambda x: nk.sum_(nk.matmul(x.reshape(2, 3), torch.linspace(-1, 1, 12, dtype=nk.DTYPE).reshape(3, 4)) ** 2),
    "add_mul": lambda x: nk.sum_(nk.mul(nk.add(x, x.flip(0)), x)),
    "scale": lambda x: nk.sum_(nk.scale(x, -1.7) ** 3),
    "exp": lambda x: nk.sum_(nk.exp(0.3 * x)),
    "softmax": lambda x: (nk.softmax(x.reshape(2, 3)) * torch.arange(6.0, dtype=nk.DTYPE).reshape(2, 3)).sum(),
    "log_softmax": lambda x: nk.log_softmax(x)[2],
    "layer_norm": lambda x: (nk.layer_norm(x.reshape(2, 3)) * torch.tensor([1.0, -2.0, 0.5], dtype=nk.DTYPE)).sum(),
    "embedding": lambda x: nk.sum_(nk.embedding(x.reshape(3, 2), torch.tensor([0, 2, 2])) ** 2),
    "mean": lambda x: nk.mean(x ** 2),
    "row_cosine": lambda x: nk.mean(nk.row_cosine(x.reshape(2, 3), torch.tensor([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]], dtype=nk.DTYPE))),
    "mse": lambda x: nk.mse(x, torch.linspace(0, 1, 6, dtype=nk.DTYPE)),
}


@pytest.mark.parametrize("name", sorted(_OPS))
def test_op_gradients_match_central_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(nk.grad_check(_OPS[name], rng.normal(size=6)) for _ in range(100))
    assert worst < 1e-4


def test_clip_scales_to_max_norm():
    g = [nk.tensor([0.0, 4.0]), nk.tensor([0.0])]
    assert nk.clip_global_norm(g, 2.0) == 0.5
    assert g[0].tolist() == [0.0, 2.0]


def test_clip_leaves_small_and_zero_gradients():
    g = [nk.tensor([0.6, 0.8])]
    assert nk.clip_global_norm(g, 2.0) == 1.0 and g[0].tolist() == [0.6, 0.8]
    z = [torch.zeros(3, dtype=nk.DTYPE), None]
    assert nk.clip_global_norm(z, 2.0) == 1.0


def _store(values):
    p = nk.tensor(values, requires_grad=True)
    return nk.ParamStore([("p", p)]), p


def test_zero_gradient_no_decay_is_noop():
    store, p = _store([1.0, -2.0])
    p.grad = torch.zeros_like(p)
    state = nk.OptState()
    nk.optimizer_step(store, state, lr=1e-3, weight_decay=0.0)
    assert p.tolist() == [1.0, -2.0] and state.step == 1


def test_decoupled_decay_shrinks_by_lr_wd_p():
    store, p = _store([3.0])
    p.grad = torch.zeros_like(p)
    nk.optimizer_step(store, nk.OptState(), lr=1e-5, weight_decay=0.01)
    assert p.item() == pytest.approx(3.0 - 1e-5 * 0.01 * 3.0, abs=1e-18)


def test_constant_gradient_update_approaches_lr():
    store, p = _store([0.0])
    state = nk.OptState()
    lr = 1e-3
    prev = 0.0
    for _ in range(3000):
        p.grad = torch.full_like(p, 0.7)
        nk.optimizer_step(store, state, lr=lr, weight_decay=0.0)
        step, prev = prev - p.item(), p.item()
    assert step == pytest.approx(lr, rel=1e-6)


def test_non_finite_gradient_skipped():
    store, p = _store([1.0])
    p.grad = torch.tensor([float("nan")], dtype=nk.DTYPE)
    state = nk.OptState()
    nk.optimizer_step(store, state, lr=1.0)
    assert p.item() == 1.0 and state.skipped == 1


def test_optimizer_is_bit_deterministic():
    def run():
        torch.manual_seed(0)
        store, p = _store(torch.randn(5, dtype=nk.DTYPE))
        st_ = nk.OptState()
        for i in range(20):
            p.grad = torch.sin(p.detach() * (i + 1))
            nk.optimizer_step(store, st_, lr=1e-2)
        return p.detach().clone()

    assert torch.equal(run(), run())


def test_param_store_order_and_duplicates():
    s = nk.ParamStore([("b", nk.tensor(1.0)), ("a", nk.tensor(2.0))])
    assert s.names() == ["b", "a"]
    with pytest.raises(KeyError):
        s.add("a", nk.tensor(3.0))
