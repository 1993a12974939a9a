"""Geometric kernels: quaternions (wxyz), SE(3), RBF influence weights, KNN, FPS.

Differentiable pieces (quaternion algebra, RBF weights, rotation blending) take
and return torch tensors with arbitrary leading batch dimensions. Discrete
pieces (KNN, FPS) work on numpy arrays and return integer index arrays; they
carry no gradient.
"""

from typing import NamedTuple

import numpy as np
import torch

from .errors import DomainError

# ----------------------------------------------------------------------------
# Quaternions, w-first.


def quat_identity(*batch, dtype=torch.float32) -> torch.Tensor:
    q = torch.zeros(*batch, 4, dtype=dtype)
    q[..., 0] = 1.0
    return q


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_conjugate(q: torch.Tensor) -> torch.Tensor:
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True)


def quat_canonical(q: torch.Tensor) -> torch.Tensor:
    """Flip sign so that w >= 0; q and -q encode the same rotation."""
    return torch.where(q[..., :1] < 0, -q, q)


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(q.shape[:-1] + (3, 3))


def quat_rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotate vectors ``v`` by unit quaternions ``q`` (broadcasting)."""
    u, v = torch.broadcast_tensors(q[..., 1:], v)
    w = q[..., :1]
    uv = torch.cross(u, v, dim=-1)
    return v + 2.0 * (w * uv + torch.cross(u, uv, dim=-1))


def quat_from_axis_angle(axis, angle) -> torch.Tensor:
    axis = torch.as_tensor(axis, dtype=torch.float64)
    angle = torch.as_tensor(angle, dtype=torch.float64)
    axis = axis / axis.norm(dim=-1, keepdim=True)
    half = 0.5 * angle[..., None]
    return torch.cat([torch.cos(half), torch.sin(half) * axis], dim=-1)


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix (3, 3) to a canonical unit quaternion."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


class SE3(NamedTuple):
    """Batched rigid transform x -> R x + t with R stored as a unit quaternion."""

    rotation: torch.Tensor  # (..., 4)
    translation: torch.Tensor  # (..., 3)

    @classmethod
    def identity(cls, *batch, dtype=torch.float32) -> "SE3":
        return cls(quat_identity(*batch, dtype=dtype), torch.zeros(*batch, 3, dtype=dtype))

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        return quat_rotate(self.rotation, points) + self.translation

    def compose(self, other: "SE3") -> "SE3":
        """self after other."""
        rot = quat_multiply(self.rotation, other.rotation)
        return SE3(rot, quat_rotate(self.rotation, other.translation) + self.translation)

    def inverse(self) -> "SE3":
        inv = quat_conjugate(self.rotation)
        return SE3(inv, -quat_rotate(inv, self.translation))


# ----------------------------------------------------------------------------
# RBF influence and rotation blending.


def _as_index(neighbor_sets) -> torch.Tensor:
    if isinstance(neighbor_sets, torch.Tensor):
        return neighbor_sets.long()
    if isinstance(neighbor_sets, np.ndarray):
        return torch.from_numpy(neighbor_sets.astype(np.int64))
    rows = [list(r) for r in neighbor_sets]
    width = max((len(r) for r in rows), default=0)
    return torch.tensor([r + [-1] * (width - len(r)) for r in rows], dtype=torch.long)


def rbf_weights_sparse(queries, keypoints, radii, index) -> torch.Tensor:
    """Normalized RBF weights of each query against its own neighbor list.

    ``index`` is (Q, S) with -1 marking padding. Returns (Q, S) weights whose
    padded entries are exactly zero. ``radii`` is the variance-like r_k of
    ``exp(-|p_j - p_k|^2 / (2 r_k))``.
    """
    index = _as_index(index)
    if index.numel() == 0 or index.shape[-1] == 0:
        raise DomainError("empty neighbor set")
    valid = index >= 0
    if not bool(valid.any(dim=-1).all()):
        raise DomainError("empty neighbor set")
    if bool((radii <= 0).any()):
        raise DomainError("radius must be positive")
    safe = index.clamp(min=0)
    d2 = ((queries[:, None, :] - keypoints[safe]) ** 2).sum(-1)
    logits = -d2 / (2.0 * radii[safe])
    logits = logits.masked_fill(~valid, float("-inf"))
    return torch.softmax(logits, dim=-1).masked_fill(~valid, 0.0)


def rbf_weights(queries, keypoints, radii, neighbor_sets) -> torch.Tensor:
    """Dense (Q, N_k) weight matrix; zero outside each query's neighbor set."""
    queries = torch.as_tensor(queries)
    keypoints = torch.as_tensor(keypoints, dtype=queries.dtype)
    radii = torch.as_tensor(radii, dtype=queries.dtype)
    index = _as_index(neighbor_sets)
    sparse = rbf_weights_sparse(queries, keypoints, radii, index)
    dense = sparse.new_zeros(queries.shape[0], keypoints.shape[0])
    valid = index >= 0
    rows = torch.arange(queries.shape[0])[:, None].expand_as(index)
    return dense.index_put((rows[valid], index[valid]), sparse[valid], accumulate=True)


def blend_rotations(quats: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Sign-aligned normalized weighted quaternion sum over the second-to-last axis.

    quats: (..., S, 4); weights: (..., S). Every quaternion is flipped into the
    hemisphere of the highest-weight quaternion before summing.
    """
    ref = torch.gather(
        quats, -2, weights.argmax(dim=-1)[..., None, None].expand(*quats.shape[:-2], 1, 4)
    )
    sign = torch.where((quats * ref).sum(-1) < 0, -1.0, 1.0).to(quats.dtype)
    blended = (weights * sign)[..., None].mul(quats).sum(-2)
    norm = blended.norm(dim=-1, keepdim=True)
    if bool((norm < 1e-12).any()):
        raise DomainError("degenerate rotation blend (antipodal inputs)")
    return quat_canonical(blended / norm)


# ----------------------------------------------------------------------------
# Discrete structure: KNN, FPS, trajectory distance.


def pairwise_distances(points) -> np.ndarray:
    """Exact Euclidean distances by direct differencing (duplicates give 0)."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts.reshape(pts.shape[0], -1)
    out = np.empty((pts.shape[0], pts.shape[0]))
    for i in range(pts.shape[0]):
        out[i] = np.sqrt(((pts - pts[i]) ** 2).sum(-1))
    return out


def knn_from_distances(dist: np.ndarray, k: int) -> np.ndarray:
    """Per-row ``k`` smallest entries excluding the diagonal; ties to lower index."""
    n = dist.shape[0]
    if k < 1 or k >= n:
        raise DomainError(f"k={k} must satisfy 1 <= k < {n}")
    d = np.array(dist, dtype=np.float64, copy=True)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def knn(points, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other points; rows may be 3D or flattened trajectories."""
    pts = np.asarray(points)
    if k >= pts.shape[0]:
        raise DomainError(f"k={k} must be smaller than the point count {pts.shape[0]}")
    return knn_from_distances(pairwise_distances(pts), k)


def fps(points, m: int, start_index: int = 0) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if m > n:
        raise DomainError(f"cannot sample {m} of {n} points")
    if not 0 <= start_index < n:
        raise DomainError(f"start_index {start_index} out of range")
    chosen = np.empty(m, dtype=np.int64)
    if m == 0:
        return chosen
    chosen[0] = start_index
    mind = ((pts - pts[start_index]) ** 2).sum(-1)
    for i in range(1, m):
        # argmax returns the first maximum, which is the lowest index on ties
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(-1))
    return chosen


def trajectory_distance(traj_a, traj_b) -> float:
    a = np.asarray(traj_a, dtype=np.float64)
    b = np.asarray(traj_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] < 1:
        raise DomainError(f"trajectory shapes differ or are empty: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum()) / a.shape[0])


def trajectory_distance_matrix(trajs) -> np.ndarray:
    """(N, T, 3) trajectories -> (N, N) matrix of ``trajectory_distance``."""
    trajs = np.asarray(trajs, dtype=np.float64)
    return pairwise_distances(trajs.reshape(trajs.shape[0], -1)) / trajs.shape[1]
