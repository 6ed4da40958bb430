import math

import numpy as np
import pytest
import torch

from cityfields.hashgrid import ContractError
from cityfields.nn import (Adam, AppearanceEmbedding, Head, Mlp, adam_step, fourier_time,
                           log_linear_lr, mlp_backward, mlp_forward)


def make(in_dim=4, hidden=(16, 16), heads=(Head("a", 2, "sigmoid"), Head("b", 1, "softplus"),
                                            Head("c", 3, "identity"), Head("d", 1, "exp")), seed=0):
    return Mlp(in_dim, hidden, heads, torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_zero_network_sigmoid_head_is_half():
    m = make(heads=(Head("c", 3, "sigmoid"),))
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    y, _ = mlp_forward(m, torch.randn(5, 4, dtype=torch.float64))
    assert torch.equal(y, torch.full((5, 3), 0.5, dtype=torch.float64))


def test_exp_head_on_zero_input_is_one():
    m = Mlp(1, (), (Head("sigma", 1, "exp"),), dtype=torch.float64)
    with torch.no_grad():
        m.weights[0].fill_(1.0)
        m.biases[0].zero_()
    y, _ = mlp_forward(m, torch.zeros(1, 1, dtype=torch.float64))
    assert y.item() == 1.0


def test_softplus_head_at_zero():
    m = Mlp(1, (), (Head("sigma", 1, "softplus"),), dtype=torch.float64)
    with torch.no_grad():
        m.biases[0].zero_()
    y, _ = mlp_forward(m, torch.zeros(1, 1, dtype=torch.float64))
    assert y.item() == pytest.approx(math.log(2))


def straight_line(m, x):
    """Independent evaluation: plain loops over layers and heads."""
    h = x.numpy()
    ws = [w.detach().numpy() for w in m.weights]
    bs = [b.detach().numpy() for b in m.biases]
    for w, b in zip(ws[:-1], bs[:-1]):
        h = np.maximum(h @ w.T + b, 0)
    z = h @ ws[-1].T + bs[-1]
    cols, s = [], 0
    fns = {"sigmoid": lambda v: 1 / (1 + np.exp(-v)), "softplus": lambda v: np.log(1 + np.exp(v)),
           "identity": lambda v: v, "exp": np.exp}
    for head in m.heads:
        cols.append(fns[head.activation](z[:, s:s + head.size]))
        s += head.size
    return np.concatenate(cols, 1)


def test_forward_matches_straight_line():
    m = make(hidden=(16, 16))
    x = torch.randn(7, 4, dtype=torch.float64)
    y, _ = mlp_forward(m, x)
    np.testing.assert_allclose(y.numpy(), straight_line(m, x), rtol=1e-12, atol=1e-12)


def test_nonfinite_input_rejected():
    with pytest.raises(ContractError):
        mlp_forward(make(), torch.tensor([[0.0, float("nan"), 0.0, 0.0]], dtype=torch.float64))


def test_zero_upstream_gives_zero_gradients():
    m = make()
    x = torch.randn(3, 4, dtype=torch.float64)
    y, cache = mlp_forward(m, x)
    grads, gx = mlp_backward(m, cache, torch.zeros_like(y))
    assert all(torch.count_nonzero(g) == 0 for g in grads)
    assert torch.count_nonzero(gx) == 0


def test_single_linear_layer_gradient_is_outer_product():
    m = Mlp(3, (), (Head("y", 2),), dtype=torch.float64)
    x = torch.randn(1, 3, dtype=torch.float64)
    up = torch.randn(1, 2, dtype=torch.float64)
    _, cache = mlp_forward(m, x)
    grads, _ = mlp_backward(m, cache, up)
    torch.testing.assert_close(grads[0], torch.outer(up[0], x[0]))
    torch.testing.assert_close(grads[1], up[0])


def test_backward_matches_finite_differences():
    m = make(hidden=(16, 16), seed=3)
    x = torch.randn(4, 4, dtype=torch.float64)
    up = torch.randn(4, 7, dtype=torch.float64)
    _, cache = mlp_forward(m, x)
    grads, gx = mlp_backward(m, cache, up)
    h = 1e-6

    def value():
        return (mlp_forward(m, x)[0] * up).sum().item()

    for p, g in zip(m.parameters(), grads):
        flat = p.detach().view(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 25)):
            old = flat[i].item()
            flat[i] = old + h
            plus = value()
            flat[i] = old - h
            minus = value()
            flat[i] = old
            fd = (plus - minus) / (2 * h)
            assert abs(fd - g.view(-1)[i].item()) <= 1e-6 * max(abs(fd), 1e-3)
    for n in range(4):
        for k in range(4):
            xp, xm = x.clone(), x.clone()
            xp[n, k] += h
            xm[n, k] -= h
            fd = ((mlp_forward(m, xp)[0] - mlp_forward(m, xm)[0]) * up).sum().item() / (2 * h)
            assert abs(fd - gx[n, k].item()) <= 1e-6 * max(abs(fd), 1e-3)


def test_stale_cache_rejected():
    m = make()
    y, cache = mlp_forward(m, torch.randn(2, 4, dtype=torch.float64))
    with torch.no_grad():
        m.weights[0].add_(1.0)
    with pytest.raises(ContractError):
        mlp_backward(m, cache, torch.ones_like(y))


def test_autograd_wrapper_agrees_with_manual_backward():
    m = make()
    x = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    up = torch.randn(5, 7, dtype=torch.float64)
    out = m(x)
    y = torch.cat([out[h.name] for h in m.heads], 1)
    (y * up).sum().backward()
    _, cache = mlp_forward(m, x.detach())
    grads, gx = mlp_backward(m, cache, up)
    for p, g in zip(m.parameters(), grads):
        torch.testing.assert_close(p.grad, g)
    torch.testing.assert_close(x.grad, gx)


def test_fourier_time_at_zero():
    f = fourier_time(torch.zeros(3, dtype=torch.float64), 6)
    assert f.shape == (3, 12)
    assert torch.equal(f[:, 0::2], torch.zeros(3, 6, dtype=torch.float64))
    assert torch.equal(f[:, 1::2], torch.ones(3, 6, dtype=torch.float64))
    g = fourier_time(torch.rand(100, dtype=torch.float64), 6)
    assert g.abs().max() <= 1


def test_appearance_embedding_rejects_unknown_video():
    emb = AppearanceEmbedding(2, dtype=torch.float64)
    with pytest.raises(ContractError):
        emb(torch.zeros(1, dtype=torch.float64), torch.tensor([3]))


def test_adam_zero_gradient_leaves_params():
    p = torch.randn(4, dtype=torch.float64)
    before = p.clone()
    opt = Adam([p], total_steps=10)
    opt.step([torch.zeros(4, dtype=torch.float64)], 0)
    assert torch.equal(p, before)


def test_adam_constant_gradient_step_tends_to_lr():
    p = torch.zeros(3, dtype=torch.float64)
    g = torch.tensor([2.0, -0.5, 1e-3], dtype=torch.float64)
    opt = Adam([p], total_steps=10_000, lr_init=1e-3, lr_final=1e-3)
    prev = p.clone()
    for i in range(500):
        opt.step([g], i)
    step = p - prev
    step_last = -(p.clone())
    opt.step([g], 500)
    step_last += p
    np.testing.assert_allclose(step_last.numpy(), -np.sign(g.numpy()) * 1e-3, rtol=1e-3)
    assert (torch.sign(step) == -torch.sign(g)).all()


def test_adam_matches_torch_reference():
    torch.manual_seed(0)
    p = torch.randn(6, dtype=torch.float64)
    q = p.clone().requires_grad_(True)
    ours = Adam([p], total_steps=10, lr_init=5e-3, lr_final=5e-3)
    ref = torch.optim.Adam([q], lr=5e-3, betas=(0.9, 0.999), eps=1e-15)
    for i in range(10):
        g = torch.randn(6, dtype=torch.float64)
        ours.step([g], i)
        q.grad = g.clone()
        ref.step()
        torch.testing.assert_close(p, q.detach(), rtol=1e-12, atol=1e-14)


def test_learning_rate_decay_endpoints():
    assert log_linear_lr(0, 100) == pytest.approx(5e-3)
    assert log_linear_lr(100, 100) == pytest.approx(5e-4)
    assert log_linear_lr(50, 100) == pytest.approx(math.sqrt(5e-3 * 5e-4))
