"""Motion latent space: per-motion Gaussians, the latent-conditioned decoder,
interpolation, and a bag-of-words prompt projector."""

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import nn

from . import geom
from .errors import DomainError, NumericError

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 5.0


@dataclass
class LatentTable:
    mu: torch.Tensor  # (M, D)
    log_var: torch.Tensor  # (M, D)

    def __post_init__(self):
        if self.mu.ndim != 2 or self.mu.shape[0] < 1 or self.mu.shape[1] < 1:
            raise DomainError(f"latent table must be (M>=1, D>=1), got {tuple(self.mu.shape)}")
        if self.log_var.shape != self.mu.shape:
            raise DomainError("mu and log_var shapes differ")

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    @classmethod
    def init(cls, motions: int, dim: int, generator=None, mu_std=0.5, log_var=-4.0, dtype=torch.float32):
        mu = mu_std * torch.randn(motions, dim, generator=generator, dtype=dtype)
        return cls(mu, torch.full((motions, dim), float(log_var), dtype=dtype))


def sample_latent(mu, log_var, generator: torch.Generator | None = None, deterministic: bool = False):
    """Reparameterized draw ``mu + exp(log_var / 2) * eps``; eps carries no gradient."""
    if deterministic:
        return mu
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)) * eps


def positional_embedding(x, num_freqs: int) -> torch.Tensor:
    """Sinusoidal features of every component, with the raw input appended.

    For a (..., C) input the output is (..., (2F + 1) C), laid out as
    ``[sin(2^0 pi x_0), cos(2^0 pi x_0), ..., cos(2^{F-1} pi x_0), ..., x_0 .. x_{C-1}]``.
    """
    if num_freqs < 1:
        raise DomainError("num_freqs must be >= 1")
    x = torch.as_tensor(x)
    if x.ndim == 0:
        x = x[None]
    freqs = (2.0 ** torch.arange(num_freqs, dtype=x.dtype)) * math.pi
    ang = x[..., :, None] * freqs  # (..., C, F)
    feats = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., C, F, 2)
    return torch.cat([feats.flatten(-3), x], dim=-1)


class MotionDecoder(nn.Module):
    """MLP (z, PE(p), PE(t)) -> quaternion residual (4) + translation (3).

    The input is re-injected before layer ``depth // 2``. The last layer
    starts at zero so a fresh decoder outputs identity transforms.
    """

    def __init__(self, latent_dim=8, width=128, depth=8, pos_freqs=6, time_freqs=4, seed=0):
        super().__init__()
        if depth < 2:
            raise DomainError("decoder needs at least two layers")
        self.latent_dim = latent_dim
        self.width = width
        self.depth = depth
        self.pos_freqs = pos_freqs
        self.time_freqs = time_freqs
        self.skip = depth // 2
        in_dim = latent_dim + 3 * (2 * pos_freqs + 1) + (2 * time_freqs + 1)
        self.in_dim = in_dim
        dims = []
        for i in range(depth):
            fan_in = in_dim if i == 0 else width
            if i == self.skip and i != 0:
                fan_in += in_dim
            dims.append((fan_in, 7 if i == depth - 1 else width))
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in dims)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in self.layers[:-1]:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.uniform_(-math.sqrt(6.0 / layer.in_features), math.sqrt(6.0 / layer.in_features),
                                      generator=gen)
                layer.bias.uniform_(-bound, bound, generator=gen)
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()

    def config(self) -> dict:
        return {
            "latent_dim": self.latent_dim, "width": self.width, "depth": self.depth,
            "pos_freqs": self.pos_freqs, "time_freqs": self.time_freqs,
        }

    def features(self, z, positions, times) -> torch.Tensor:
        """z (B, D), positions (N, 3), times (B,) -> inputs (B, N, in_dim)."""
        b, n = z.shape[0], positions.shape[0]
        pe_p = positional_embedding(positions, self.pos_freqs)  # (N, 39)
        pe_t = positional_embedding(times[:, None], self.time_freqs)  # (B, 9)
        return torch.cat(
            [z[:, None, :].expand(b, n, -1), pe_p[None].expand(b, n, -1), pe_t[:, None, :].expand(b, n, -1)], dim=-1
        )

    def forward(self, z, positions, times) -> torch.Tensor:
        x = self.features(z, positions, times)
        h = x
        for i, layer in enumerate(self.layers):
            if i == self.skip and i != 0:
                h = torch.cat([h, x], dim=-1)
            h = layer(h)
            if i < self.depth - 1:
                h = torch.relu(h)
            if not bool(torch.isfinite(h).all()):
                raise NumericError(f"non-finite activation at decoder layer {i}")
        return h


def decode_motion(decoder: MotionDecoder, z, keypoint_positions, t) -> geom.SE3:
    """Per-keypoint SE(3) for latent(s) ``z`` at normalized time(s) ``t``.

    Accepts a single latent (D,) with scalar ``t`` -> (N_k, ...) outputs, or a
    batch (B, D) with (B,) times -> (B, N_k, ...) outputs.
    """
    z = torch.as_tensor(z)
    single = z.ndim == 1
    zb = z[None] if single else z
    t = torch.as_tensor(t, dtype=zb.dtype).reshape(-1)
    if t.numel() == 1 and zb.shape[0] > 1:
        t = t.expand(zb.shape[0])
    if bool(((t < 0) | (t > 1)).any()):
        raise DomainError("time must be normalized to [0, 1]")
    raw = decoder(zb, keypoint_positions, t)
    base = raw.new_tensor([1.0, 0.0, 0.0, 0.0])
    quat = geom.quat_canonical(geom.quat_normalize(base + raw[..., :4]))
    out = geom.SE3(quat, raw[..., 4:])
    if single:
        out = geom.SE3(out.rotation[0], out.translation[0])
    return out


def interpolate_latents(mu_a, mu_b, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * mu_a + alpha * mu_b


# ----------------------------------------------------------------------------


def token_slot(token: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(token.lower().encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


class PromptProjector(nn.Module):
    """Hashed bag-of-words embedding (frozen table) followed by a 2-layer MLP."""

    def __init__(self, latent_dim=8, embed_dim=64, hidden=64, vocab_size=1024, seed=0):
        super().__init__()
        self.latent_dim = latent_dim
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.vocab_size = vocab_size
        gen = torch.Generator().manual_seed(int(seed))
        self.register_buffer("table", torch.randn(vocab_size, embed_dim, generator=gen))
        self.fc1 = nn.Linear(embed_dim, hidden)
        self.fc2 = nn.Linear(hidden, latent_dim)
        with torch.no_grad():
            for layer in (self.fc1, self.fc2):
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.uniform_(-bound, bound, generator=gen)

    def config(self) -> dict:
        return {"latent_dim": self.latent_dim, "embed_dim": self.embed_dim, "hidden": self.hidden,
                "vocab_size": self.vocab_size}

    def pooled(self, tokens) -> torch.Tensor:
        if not tokens:
            raise DomainError("empty prompt")
        slots = torch.tensor([token_slot(t, self.vocab_size) for t in tokens])
        return self.table[slots].mean(0)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(pooled)))


def project_prompt(tokens, projector: PromptProjector) -> torch.Tensor:
    return projector(projector.pooled(list(tokens)))
