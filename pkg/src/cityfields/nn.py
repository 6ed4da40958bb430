"""Small fully-connected networks with hand-written reverse mode, Fourier time
features, per-video appearance matrices and the Adam update."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .hashgrid import ContractError

ACTIVATIONS = ("identity", "sigmoid", "softplus", "exp")


@dataclass(frozen=True)
class Head:
    name: str
    size: int
    activation: str = "identity"
    init_bias: float = 0.0
    """Added to the initial output bias of this head."""

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown head activation {self.activation!r}")


def _activate(kind, z):
    if kind == "sigmoid":
        return torch.sigmoid(z)
    if kind == "softplus":
        return torch.log1p(torch.exp(-z.abs())) + z.clamp(min=0)
    if kind == "exp":
        return torch.exp(z)
    return z


def _activate_grad(kind, z, y):
    """d(activation)/dz given pre-activation z and output y."""
    if kind == "sigmoid":
        return y * (1 - y)
    if kind == "softplus":
        return torch.sigmoid(z)
    if kind == "exp":
        return y
    return torch.ones_like(z)


class Mlp:
    """ReLU trunk with one linear output layer split into activated heads."""

    def __init__(self, in_dim: int, hidden: Sequence[int], heads: Sequence[Head],
                 generator: torch.Generator | None = None, dtype=torch.float32):
        self.in_dim = in_dim
        self.heads = tuple(heads)
        widths = [in_dim, *hidden, sum(h.size for h in self.heads)]
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1 / math.sqrt(fan_in)
            w = (torch.rand(fan_out, fan_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound
            b = (torch.rand(fan_out, generator=generator, dtype=torch.float64) * 2 - 1) * bound
            self.weights.append(w.to(dtype).requires_grad_(True))
            self.biases.append(b.to(dtype).requires_grad_(True))
        with torch.no_grad():
            start = 0
            for h in self.heads:
                self.biases[-1][start:start + h.size] += h.init_bias
                start += h.size

    @property
    def widths(self):
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def parameters(self) -> list[torch.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def __call__(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        y = _MlpFn.apply(x, self, *self.parameters())
        out, start = {}, 0
        for h in self.heads:
            out[h.name] = y[:, start:start + h.size]
            start += h.size
        return out


@torch.no_grad()
def mlp_forward(mlp: Mlp, x: torch.Tensor):
    """Evaluate ``mlp`` on a batch (N, in_dim). Returns (outputs, cache)."""
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise ContractError(f"expected input of width {mlp.in_dim}, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ContractError("non-finite MLP input")
    acts = [x]
    h = x
    n_layers = len(mlp.weights)
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w.T + b
        if i < n_layers - 1:
            h = z.clamp(min=0)
            acts.append(h)
        else:
            pre = z
    outs, start = [], 0
    for head in mlp.heads:
        outs.append(_activate(head.activation, pre[:, start:start + head.size]))
        start += head.size
    y = torch.cat(outs, 1)
    cache = {"acts": acts, "pre": pre, "out": y, "versions": _versions(mlp)}
    return y, cache


@torch.no_grad()
def mlp_backward(mlp: Mlp, cache, grad_out: torch.Tensor):
    """Reverse pass for a cached forward.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
    ``mlp.parameters()`` (weight, bias per layer).
    """
    if cache is None or cache["versions"] != _versions(mlp):
        raise ContractError("stale MLP cache: parameters changed since the forward pass")
    pre, y = cache["pre"], cache["out"]
    gz = torch.empty_like(pre)
    start = 0
    for head in mlp.heads:
        sl = slice(start, start + head.size)
        gz[:, sl] = grad_out[:, sl] * _activate_grad(head.activation, pre[:, sl], y[:, sl])
        start += head.size
    grads = []
    acts = cache["acts"]
    for i in reversed(range(len(mlp.weights))):
        a = acts[i]
        grads.append(gz.sum(0))
        grads.append(gz.T @ a)
        g_in = gz @ mlp.weights[i]
        if i > 0:
            gz = g_in * (a > 0).to(g_in.dtype)
    grads.reverse()
    return grads, g_in


def _versions(mlp):
    return tuple(p._version for p in mlp.parameters())


class _MlpFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, mlp, *params):
        y, cache = mlp_forward(mlp, x.detach())
        ctx.mlp = mlp
        ctx.cache = cache
        return y

    @staticmethod
    def backward(ctx, grad_out):
        grads, g_in = mlp_backward(ctx.mlp, ctx.cache, grad_out)
        ctx.cache = None
        return (g_in, None, *grads)


def fourier_time(t: torch.Tensor, n_bands: int) -> torch.Tensor:
    """(sin, cos) of 2^j * pi * t for j < n_bands, interleaved per band -> (N, 2K)."""
    freqs = (2.0 ** torch.arange(n_bands, dtype=t.dtype)) * math.pi
    ang = t.reshape(-1, 1) * freqs
    return torch.stack([torch.sin(ang), torch.cos(ang)], -1).reshape(t.shape[0], 2 * n_bands)


class AppearanceEmbedding:
    """Per-video matrices A_vid (E x 2K); latent = A_vid @ fourier_time(t)."""

    def __init__(self, n_videos: int, dim: int = 16, n_bands: int = 6,
                 generator: torch.Generator | None = None, dtype=torch.float32):
        self.n_videos, self.dim, self.n_bands = n_videos, dim, n_bands
        a = torch.randn(n_videos, dim, 2 * n_bands, generator=generator, dtype=torch.float64) * 0.1
        self.matrices = a.to(dtype).requires_grad_(True)

    def __call__(self, t: torch.Tensor, video_id: torch.Tensor) -> torch.Tensor:
        vid = torch.as_tensor(video_id, dtype=torch.int64).reshape(-1).expand(t.shape[0])
        if (vid < 1).any() or (vid > self.n_videos).any():
            raise ContractError(f"unknown video id (valid: 1..{self.n_videos})")
        f = fourier_time(t.to(self.matrices.dtype), self.n_bands)
        return torch.einsum("nek,nk->ne", self.matrices[vid - 1], f)


def log_linear_lr(iteration: int, total: int, lr_init: float = 5e-3, lr_final: float = 5e-4) -> float:
    frac = min(max(iteration / max(total, 1), 0.0), 1.0)
    return math.exp(math.log(lr_init) * (1 - frac) + math.log(lr_final) * frac)


class Adam:
    """Adam with a log-linear learning-rate decay over ``total_steps``."""

    def __init__(self, params: Sequence[torch.Tensor], total_steps: int, lr_init: float = 5e-3,
                 lr_final: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-15):
        self.params = list(params)
        self.total_steps = total_steps
        self.lr_init, self.lr_final = lr_init, lr_final
        self.betas, self.eps = betas, eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.step_count = 0

    def lr(self, iteration: int) -> float:
        return log_linear_lr(iteration, self.total_steps, self.lr_init, self.lr_final)

    def step(self, grads: Sequence[torch.Tensor | None], iteration: int):
        adam_step(self, self.params, grads, iteration)

    def state_tensors(self) -> list[torch.Tensor]:
        return self.m + self.v


@torch.no_grad()
def adam_step(state: Adam, params, grads, iteration: int):
    """In-place Adam update of ``params``; ``None`` gradients count as zero."""
    state.step_count += 1
    b1, b2 = state.betas
    lr = state.lr(iteration)
    bc1 = 1 - b1 ** state.step_count
    bc2 = 1 - b2 ** state.step_count
    params = list(params)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if any(g.shape != p.shape for p, g in zip(params, grads)):
        raise ContractError("gradient shape does not match parameter")
    torch._foreach_mul_(state.m, b1)
    torch._foreach_add_(state.m, grads, alpha=1 - b1)
    torch._foreach_mul_(state.v, b2)
    torch._foreach_addcmul_(state.v, grads, grads, value=1 - b2)
    denom = torch._foreach_div(state.v, bc2)
    torch._foreach_sqrt_(denom)
    torch._foreach_add_(denom, state.eps)
    step = torch._foreach_div(state.m, bc1)
    torch._foreach_div_(step, denom)
    torch._foreach_mul_(step, lr)
    torch._foreach_sub_(params, step)
