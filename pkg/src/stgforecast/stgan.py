"""Spatiotemporal WGAN-GP: graph convolution + gated recurrence generator and critic."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .errors import NonFiniteState, ShapeMismatch
from .spatial import SpatialWeights


@dataclass
class GanConfig:
    f1: int = 32
    f2: int = 64
    hidden: int = 64
    normalization: str = "affine"

    def __post_init__(self):
        if min(self.f1, self.f2, self.hidden) < 1:
            raise ValueError("f1, f2 and hidden must all be >= 1")

    def desk_scale(self) -> "GanConfig":
        """Narrow widths for CPU runs."""
        return replace(self, f1=8, f2=16, hidden=16)


class GraphConv(nn.Module):
    """Two propagation layers: A . relu(A . X . W0) . W1, shared across time steps."""

    def __init__(self, in_features: int, f1: int, f2: int):
        super().__init__()
        self.W0 = nn.Parameter(torch.empty(in_features, f1))
        self.W1 = nn.Parameter(torch.empty(f1, f2))
        nn.init.xavier_uniform_(self.W0)
        nn.init.xavier_uniform_(self.W1)

    def forward(self, X: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        # X: (..., Q, N, F_in), A: (..., N, N)
        if X.shape[-1] != self.W0.shape[0] or X.shape[-2] != A.shape[-1]:
            raise ShapeMismatch(f"features {tuple(X.shape)} incompatible with weights "
                                f"{tuple(A.shape)} / W0 {tuple(self.W0.shape)}")
        A = A.unsqueeze(-3)
        inner = torch.relu(A @ X @ self.W0)
        return A @ inner @ self.W1


class GatedRecurrence(nn.Module):
    """LSTM over the time axis with weights shared by all regions.

    Gate blocks in the fused matrices are ordered input, forget, output, cell.
    """

    def __init__(self, in_features: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.W_x = nn.Parameter(torch.empty(in_features, 4 * hidden))
        self.W_h = nn.Parameter(torch.empty(hidden, 4 * hidden))
        self.b = nn.Parameter(torch.zeros(4 * hidden))
        bound = 1.0 / math.sqrt(hidden)
        nn.init.uniform_(self.W_x, -bound, bound)
        nn.init.uniform_(self.W_h, -bound, bound)

    def forward(self, H: torch.Tensor) -> torch.Tensor:
        # H: (..., Q, N, F) -> (..., Q, N, d); rows = every (batch, region) pair
        Q, N = H.shape[-3], H.shape[-2]
        lead = H.shape[:-3]
        d = self.hidden
        xs = (H @ self.W_x + self.b).movedim(-3, 0).reshape(Q, -1, 4 * d)
        h = H.new_zeros(xs.shape[1], d)
        c = torch.zeros_like(h)
        outputs = []
        # unbind once: indexing per step makes backward materialize full-size zeros
        for x_t in xs.unbind(0):
            # split (not slicing) keeps the backward pass to a single concatenation
            pre, cand = torch.addmm(x_t, h, self.W_h).split([3 * d, d], dim=1)
            i, f, o = torch.sigmoid(pre).chunk(3, dim=1)
            c = f * c + i * torch.tanh(cand)
            h = o * torch.tanh(c)
            outputs.append(h)
        out = torch.stack(outputs).reshape(Q, *lead, N, d).movedim(0, -3)
        if not torch.isfinite(out).all():
            raise NonFiniteState("recurrent state left the finite range")
        return out


class Generator(nn.Module):
    """Maps noise z and a real condition window y (both Q x N) to a Q x N virtual window."""

    def __init__(self, n_regions: int, q: int, config: GanConfig):
        super().__init__()
        self.n_regions, self.q = n_regions, q
        self.gcn = GraphConv(2, config.f1, config.f2)
        self.rnn = GatedRecurrence(config.f2, config.hidden)
        self.W_g = nn.Parameter(torch.empty(config.hidden, 1))
        self.b_g = nn.Parameter(torch.zeros(q))
        nn.init.xavier_uniform_(self.W_g)

    def forward(self, z: torch.Tensor, y: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        if z.shape != y.shape or z.shape[-2:] != (self.q, self.n_regions):
            raise ShapeMismatch(f"noise {tuple(z.shape)} / condition {tuple(y.shape)} "
                                f"do not match Q={self.q}, N={self.n_regions}")
        h = self.rnn(self.gcn(torch.stack([z, y], dim=-1), A))
        return (h @ self.W_g).squeeze(-1) + self.b_g[:, None]


class Discriminator(nn.Module):
    """Wasserstein critic: unbounded score from the last recurrent state of all regions."""

    def __init__(self, n_regions: int, config: GanConfig):
        super().__init__()
        self.n_regions = n_regions
        self.gcn = GraphConv(1, config.f1, config.f2)
        self.rnn = GatedRecurrence(config.f2, config.hidden)
        self.W_disc = nn.Parameter(torch.empty(n_regions * config.hidden))
        self.b_disc = nn.Parameter(torch.zeros(()))
        nn.init.uniform_(self.W_disc, -1.0 / math.sqrt(config.hidden), 1.0 / math.sqrt(config.hidden))

    def forward(self, X: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        if X.shape[-1] != self.n_regions:
            raise ShapeMismatch(f"critic expects N={self.n_regions}, got {tuple(X.shape)}")
        h = self.rnn(self.gcn(X.unsqueeze(-1), A))
        last = h[..., -1, :, :].flatten(-2)
        return last @ self.W_disc + self.b_disc


@dataclass
class NoiseWindow:
    z: torch.Tensor
    condition: torch.Tensor


@dataclass
class GanState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: GanConfig = field(default_factory=GanConfig)
    iter: int = 0


def init_gan(n_regions: int, q: int, config: GanConfig | None = None, *, lr_g: float = 2e-4,
             lr_d: float = 2e-4, betas=(0.5, 0.9), dtype=torch.float32) -> GanState:
    """Fresh generator/critic pair; seed torch beforehand for reproducible weights."""
    config = config or GanConfig()
    gen = Generator(n_regions, q, config).to(dtype)
    disc = Discriminator(n_regions, config).to(dtype)
    return GanState(gen, disc,
                    torch.optim.Adam(gen.parameters(), lr=lr_g, betas=tuple(betas)),
                    torch.optim.Adam(disc.parameters(), lr=lr_d, betas=tuple(betas)),
                    config)


def as_tensor(x, like: torch.Tensor | nn.Module | None = None) -> torch.Tensor:
    if isinstance(x, SpatialWeights):
        x = x.normalized
    dtype = torch.get_default_dtype()
    if isinstance(like, nn.Module):
        dtype = next(like.parameters()).dtype
    elif isinstance(like, torch.Tensor):
        dtype = like.dtype
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def gcn_forward(X, weights, params: GraphConv) -> torch.Tensor:
    """H = A relu(A X W0) W1 at every step of a (..., Q, N, F) input."""
    return params(as_tensor(X, params), as_tensor(weights, params))


def lstm_forward(H, params: GatedRecurrence) -> torch.Tensor:
    return params(as_tensor(H, params))


def generate(noise: NoiseWindow, weights, state: GanState) -> torch.Tensor:
    """Virtual window(s) in the scaled domain; a trailing singleton feature axis is accepted."""
    g = state.generator
    z, y = as_tensor(noise.z, g), as_tensor(noise.condition, g)
    if z.shape[-1] == 1 and z.dim() >= 3 and z.shape[-2] == g.n_regions:
        z, y = z.squeeze(-1), y.squeeze(-1)
    return g(z, y, as_tensor(weights, g))


def discriminate(X, weights, state: GanState) -> torch.Tensor:
    d = state.discriminator
    return d(as_tensor(X, d), as_tensor(weights, d))


def _critic_fn(critic):
    if isinstance(critic, GanState):
        critic = critic.discriminator
    return critic


def gradient_penalty(critic, real, fake, weights=None, generator: torch.Generator | None = None,
                     create_graph: bool = True) -> torch.Tensor:
    """E[(||grad_x D(x_hat)||_2 - 1)^2] on per-sample random interpolates of real and fake.

    ``critic`` is a GanState, a Discriminator, or any callable ``(x, weights) -> scores``.
    Inputs are (B, L, N) or a single (L, N) window.
    """
    fn = _critic_fn(critic)
    real = torch.as_tensor(real)
    fake = torch.as_tensor(fake)
    if real.shape != fake.shape:
        raise ShapeMismatch(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    single = real.dim() == 2
    if single:
        real, fake = real.unsqueeze(0), fake.unsqueeze(0)
        if weights is not None:
            weights = as_tensor(weights, real).unsqueeze(0)
    elif weights is not None:
        weights = as_tensor(weights, real)
    x_hat = interpolates(real, fake, generator)
    return penalty(fn(x_hat, weights), x_hat, create_graph)


def interpolates(real: torch.Tensor, fake: torch.Tensor, generator: torch.Generator | None = None):
    """eps * real + (1 - eps) * fake with one uniform eps per sample, as a grad-requiring leaf."""
    eps = torch.rand(real.shape[0], *([1] * (real.dim() - 1)), generator=generator,
                     dtype=real.dtype)
    return (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)


def penalty(scores: torch.Tensor, x_hat: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """mean over samples of (||d scores / d x_hat||_2 - 1)^2."""
    grad, = torch.autograd.grad(scores.sum(), x_hat, create_graph=create_graph)
    norms = grad.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def d_loss(real_scores, fake_scores, gp, lambda_gp: float = 10.0):
    """Critic loss -(E[D(real)] - E[D(fake)]) + lambda_gp * gp."""
    real_scores, fake_scores = torch.as_tensor(real_scores), torch.as_tensor(fake_scores)
    return -(real_scores.mean() - fake_scores.mean()) + lambda_gp * gp


def g_loss(fake_scores):
    return -torch.as_tensor(fake_scores).mean()
