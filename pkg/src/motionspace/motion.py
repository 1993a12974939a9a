"""Keypoint motion basis, motion graph, trajectory cache and LBS deformation."""

from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from . import geom
from .container import atomic_write
from .errors import DomainError


@dataclass
class KeyPointSet:
    positions: torch.Tensor  # (N_k, 3) canonical
    log_radii: torch.Tensor  # (N_k,), r_k = exp(log_radii)

    def __post_init__(self):
        if self.positions.ndim != 2 or self.positions.shape[0] < 1 or self.positions.shape[1] != 3:
            raise DomainError(f"keypoint positions must be (N>=1, 3), got {tuple(self.positions.shape)}")
        if self.log_radii.shape != self.positions.shape[:1]:
            raise DomainError("log_radii must have one entry per keypoint")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def radii(self) -> torch.Tensor:
        return torch.exp(self.log_radii)

    def subset(self, index) -> "KeyPointSet":
        index = torch.as_tensor(index, dtype=torch.long)
        return KeyPointSet(self.positions[index], self.log_radii[index])


@dataclass
class GaussianSet:
    centers: torch.Tensor  # (N, 3)
    rotations: torch.Tensor  # (N, 4) unit, w >= 0
    log_scales: torch.Tensor  # (N, 3)
    opacity_logits: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 3) in [0, 1]

    def __len__(self):
        return self.centers.shape[0]

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def subset(self, index) -> "GaussianSet":
        index = torch.as_tensor(index, dtype=torch.long)
        return GaussianSet(*(getattr(self, f.name)[index] for f in fields(self)))

    def detach(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f.name).detach() for f in fields(self)))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MotionGraph:
    edges: np.ndarray  # (N_k, K_g) int

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64)
        n = self.edges.shape[0]
        if (self.edges < 0).any() or (self.edges >= n).any():
            raise DomainError("graph edge index out of range")
        if (self.edges == np.arange(n)[:, None]).any():
            raise DomainError("graph contains a self edge")

    @property
    def degree(self) -> int:
        return self.edges.shape[1]


@dataclass
class TrajectoryCache:
    """Per-motion, per-frame keypoint transforms; frozen after stage 1."""

    rotations: torch.Tensor  # (M, T, N_k, 4)
    translations: torch.Tensor  # (M, T, N_k, 3)
    canonical: torch.Tensor | None = None  # (N_k, 3) keypoint positions the transforms were decoded at

    def __post_init__(self):
        if self.rotations.shape[:-1] != self.translations.shape[:-1]:
            raise DomainError("cache rotations and translations disagree in shape")
        if self.canonical is not None and self.canonical.shape != self.translations.shape[2:]:
            raise DomainError("cache canonical positions do not match the keypoint count")

    @property
    def motion_count(self) -> int:
        return self.rotations.shape[0]

    @property
    def frame_count(self) -> int:
        return self.rotations.shape[1]

    @property
    def keypoint_count(self) -> int:
        return self.rotations.shape[2]

    def positions(self, canonical: torch.Tensor | None = None) -> torch.Tensor:
        """Keypoint positions p_k + T_k^t, shape (M, T, N_k, 3)."""
        canonical = self.canonical if canonical is None else canonical
        if canonical is None:
            raise DomainError("cache has no canonical positions")
        return canonical + self.translations


@dataclass
class Assignment:
    anchor: np.ndarray  # (N_g,) nearest canonical keypoint
    drivers: torch.Tensor  # (N_g, 1 + K_g) long: anchor followed by its graph edges
    weights: torch.Tensor | None = field(default=None)


# ----------------------------------------------------------------------------


def build_motion_graph(keypoints: KeyPointSet, trajectories: TrajectoryCache | None, degree: int) -> MotionGraph:
    """KNN graph over keypoints.

    With trajectories, the distance between two keypoints is the trajectory
    distance of their concatenated per-frame positions, averaged over motions.
    Without, plain canonical Euclidean distance.
    """
    if degree >= len(keypoints):
        raise DomainError(f"graph degree {degree} must be below keypoint count {len(keypoints)}")
    canon = keypoints.positions.detach()
    if trajectories is None:
        return MotionGraph(geom.knn(canon.numpy(), degree))
    pos = trajectories.positions(canon).detach().numpy()  # (M, T, N, 3)
    dist = np.mean([geom.trajectory_distance_matrix(pos[m].transpose(1, 0, 2)) for m in range(pos.shape[0])], axis=0)
    return MotionGraph(geom.knn_from_distances(dist, degree))


def nearest_keypoint(points: torch.Tensor, keypoint_positions: torch.Tensor) -> np.ndarray:
    d2 = torch.cdist(points.detach().double(), keypoint_positions.detach().double())
    # argmin keeps the lowest index among exact ties
    return d2.argmin(dim=1).numpy()


def skinning_weights(centers, keypoints: KeyPointSet, drivers: torch.Tensor) -> torch.Tensor:
    return geom.rbf_weights_sparse(centers, keypoints.positions, keypoints.radii, drivers)


def skinning_assignment(gaussians: GaussianSet, keypoints: KeyPointSet, graph: MotionGraph) -> Assignment:
    anchor = nearest_keypoint(gaussians.centers, keypoints.positions)
    edges = graph.edges
    drivers = np.concatenate([anchor[:, None], edges[anchor]], axis=1) if edges.shape[1] else anchor[:, None]
    drivers = torch.from_numpy(drivers)
    return Assignment(anchor, drivers, skinning_weights(gaussians.centers, keypoints, drivers))


def lbs_deform(centers, rotations, keypoint_positions, drivers, weights, transforms: geom.SE3):
    """Blend driver transforms onto canonical Gaussians.

    ``transforms`` holds (..., N_k, 4) rotations and (..., N_k, 3)
    translations; any leading batch shape broadcasts. Returns deformed
    centers (..., N_g, 3) and rotations (..., N_g, 4).
    """
    if transforms.rotation.shape[-2] != keypoint_positions.shape[0]:
        raise DomainError("one transform per keypoint is required")
    rot_j = transforms.rotation[..., drivers, :]  # (..., N_g, S, 4)
    trans_j = transforms.translation[..., drivers, :]
    p_j = keypoint_positions[drivers]  # (N_g, S, 3)
    moved = geom.quat_rotate(rot_j, centers[:, None, :] - p_j) + p_j + trans_j
    new_centers = (weights[..., None] * moved).sum(-2)
    blended = geom.blend_rotations(rot_j, weights.expand(rot_j.shape[:-1]))
    new_rot = geom.quat_canonical(geom.quat_multiply(blended, rotations))
    return new_centers, new_rot


def deform_keypoint_splats(keypoint_positions, transforms: geom.SE3) -> torch.Tensor:
    """A keypoint drives only itself: p_k -> p_k + T_k."""
    return keypoint_positions + transforms.translation


# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class DensifyConfig:
    n_k: int = 32
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.05
    clone_jitter: float = 0.01


def densify_prune(points: GaussianSet, grad_stats, config: DensifyConfig, generator: torch.Generator | None = None):
    """Clone high-gradient points and drop transparent ones.

    Returns the new set and, for every output point, the index of the input
    point it came from (so callers can remap per-point state). Pruning removes
    the most transparent candidates first and stops at ``ceil(n_k / 2)``.
    """
    grad_stats = torch.as_tensor(grad_stats).detach()
    n = len(points)
    if grad_stats.shape[0] != n:
        raise DomainError("gradient statistics must match point count")
    opacity = points.opacities.detach()
    floor = (config.n_k + 1) // 2
    is_clone_src = grad_stats > config.grad_threshold
    keep = torch.ones(n, dtype=torch.bool)
    count = n + int(is_clone_src.sum())
    candidates = torch.nonzero(opacity < config.prune_opacity).flatten()
    for idx in candidates[torch.argsort(opacity[candidates], stable=True)].tolist():
        cost = 1 + int(is_clone_src[idx])
        if count - cost < floor:
            break
        keep[idx] = False
        count -= cost
    clone_src = torch.nonzero(keep & is_clone_src).flatten()
    source = torch.cat([torch.nonzero(keep).flatten(), clone_src])
    out = points.detach().subset(source)
    if clone_src.numel():
        k = clone_src.numel()
        radius = torch.exp(points.log_scales.detach()[clone_src]).mean(-1, keepdim=True)
        direction = torch.randn(k, 3, generator=generator, dtype=radius.dtype)
        direction = direction / direction.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        r = torch.rand(k, 1, generator=generator, dtype=radius.dtype) ** (1.0 / 3.0)
        centers = out.centers.clone()
        centers[-k:] += config.clone_jitter * radius * r * direction
        out = replace(out, centers=centers)
    return out, source


# ----------------------------------------------------------------------------


def write_ply(path, positions, **props) -> None:
    """ASCII PLY with x, y, z plus one float property per extra column."""
    pos = np.asarray(positions.detach() if isinstance(positions, torch.Tensor) else positions, dtype=np.float64)
    columns = [("x", pos[:, 0]), ("y", pos[:, 1]), ("z", pos[:, 2])]
    for name, value in props.items():
        arr = np.asarray(value.detach() if isinstance(value, torch.Tensor) else value, dtype=np.float64)
        arr = arr.reshape(pos.shape[0], -1)
        if arr.shape[1] == 1:
            columns.append((name, arr[:, 0]))
        else:
            columns.extend((f"{name}_{i}", arr[:, i]) for i in range(arr.shape[1]))
    lines = ["ply", "format ascii 1.0", f"element vertex {pos.shape[0]}"]
    lines += [f"property float {name}" for name, _ in columns]
    lines.append("end_header")
    table = np.stack([c for _, c in columns], axis=1)
    lines += [" ".join(f"{v:.7g}" for v in row) for row in table]
    atomic_write(path, "\n".join(lines) + "\n")


def read_ply(path) -> dict:
    with open(path) as fh:
        text = fh.read().splitlines()
    end = text.index("end_header")
    names = [ln.split()[-1] for ln in text[:end] if ln.startswith("property")]
    count = int(next(ln for ln in text if ln.startswith("element vertex")).split()[-1])
    rows = np.array([[float(v) for v in ln.split()] for ln in text[end + 1:end + 1 + count]]).reshape(count, len(names))
    return {name: rows[:, i] for i, name in enumerate(names)}


def export_keypoints(path, keypoints: KeyPointSet) -> None:
    write_ply(path, keypoints.positions, radius=keypoints.radii)


def export_gaussians(path, gaussians: GaussianSet, centers=None) -> None:
    write_ply(
        path,
        gaussians.centers if centers is None else centers,
        opacity=gaussians.opacities,
        scale=torch.exp(gaussians.log_scales),
        red=gaussians.colors[:, 0],
        green=gaussians.colors[:, 1],
        blue=gaussians.colors[:, 2],
    )
