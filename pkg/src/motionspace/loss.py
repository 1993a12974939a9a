"""Training objectives: photometric L1, ARAP rigidity, latent KL, Chamfer."""

from dataclasses import dataclass

import torch

from .errors import DomainError
from .latent import LOG_VAR_MAX, LOG_VAR_MIN, LatentTable

_DIST_EPS = 1e-12


@dataclass
class LossWeights:
    w_rgb: float = 1.0
    w_mask: float = 0.5
    w_arap: float = 0.1
    w_kl: float = 1e-4
    w_chamfer: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise DomainError(f"loss weight {name} must be nonnegative")


def photometric_loss(rgb, alpha, target_rgb, target_mask, w_rgb=1.0, w_mask=0.5) -> torch.Tensor:
    """L1 on color against the mask-premultiplied target plus L1 on alpha vs mask.

    Both terms are means over pixels (and channels), so a unit-contrast image
    costs ``w_rgb + w_mask``.
    """
    if rgb.shape[:-1] != target_rgb.shape[:-1] or alpha.shape != target_mask.shape or rgb.shape != target_rgb.shape:
        raise DomainError(f"render {tuple(rgb.shape)} and target {tuple(target_rgb.shape)} resolutions differ")
    target = target_rgb * target_mask[..., None]
    return w_rgb * (rgb - target).abs().mean() + w_mask * (alpha - target_mask).abs().mean()


def _dist(a, b):
    return torch.sqrt(((a - b) ** 2).sum(-1) + _DIST_EPS)


def arap_loss(positions, edges, weights, dt: int = 1) -> torch.Tensor:
    """Weighted change of neighbor distances between frames ``t`` and ``t + dt``.

    positions: (T, N_k, 3); edges: (N_k, K) neighbor indices; weights: (N_k, K).
    Summed over keypoints, their neighbors and every valid ``t``.
    """
    frames = positions.shape[0]
    if frames < 2 or not 1 <= dt <= frames - 1:
        raise DomainError(f"dt={dt} outside [1, {frames - 1}]")
    edges = torch.as_tensor(edges, dtype=torch.long)
    d = _dist(positions[:, edges, :], positions[:, :, None, :])  # (T, N, K)
    return (weights * (d[:-dt] - d[dt:]).abs()).sum()


def kl_loss(latents: LatentTable) -> torch.Tensor:
    """Sum over motions of -1/2 sum_d (log v - v - mu^2 + 1), v = exp(log_var)."""
    log_v = latents.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
    return -0.5 * (log_v - torch.exp(log_v) - latents.mu ** 2 + 1.0).sum()


def chamfer(points_a, points_b) -> torch.Tensor:
    """Symmetric squared Chamfer distance; leading batch dims are averaged."""
    if points_a.shape[-2] == 0 or points_b.shape[-2] == 0:
        raise DomainError("chamfer needs two nonempty point sets")
    d2 = ((points_a[..., :, None, :] - points_b[..., None, :, :]) ** 2).sum(-1)
    return d2.min(dim=-1).values.mean() + d2.min(dim=-2).values.mean()
