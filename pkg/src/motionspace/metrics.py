"""Desk-scale evaluation metrics."""

import math

import numpy as np

from .errors import DomainError

PSNR_CAP = 100.0


def psnr(pred, target, cap: float = PSNR_CAP) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DomainError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, -10.0 * math.log10(mse))


def mask_iou(pred_alpha, target_mask, threshold: float = 0.5) -> float:
    """IoU of ``pred_alpha > threshold`` against a binary mask; two empty masks give 1."""
    pred = np.asarray(pred_alpha) > threshold
    target = np.asarray(target_mask) > 0.5
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def _quat_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def ground_truth_keypoint_tracks(canonical, gt_rest, segment_ids, segment_transforms) -> np.ndarray:
    """Where each predicted canonical keypoint would move under the true motion.

    Every keypoint is matched to its nearest ground-truth point in the rest
    pose and follows that point's rigid segment. Returns (M, T, N_k, 3).
    """
    canonical = np.asarray(canonical, dtype=np.float64)
    gt_rest = np.asarray(gt_rest, dtype=np.float64)
    d2 = ((canonical[:, None, :] - gt_rest[None]) ** 2).sum(-1)
    seg = np.asarray(segment_ids)[d2.argmin(1)]
    tf = np.asarray(segment_transforms, dtype=np.float64)[:, :, seg]  # (M, T, N_k, 7)
    rot = _quat_matrix(tf[..., :4])
    return np.einsum("mtkij,kj->mtki", rot, canonical) + tf[..., 4:]


def trajectory_rmse(pred_positions, canonical, gt_rest, segment_ids, segment_transforms) -> float:
    """RMSE between predicted keypoint tracks (M, T, N_k, 3) and their matched ground truth."""
    gt = ground_truth_keypoint_tracks(canonical, gt_rest, segment_ids, segment_transforms)
    pred = np.asarray(pred_positions, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DomainError(f"prediction {pred.shape} does not match ground truth {gt.shape}")
    return float(np.sqrt(((pred - gt) ** 2).sum(-1).mean()))


def diversity(tracks) -> float:
    """Mean over motion pairs of the keypoint-averaged trajectory distance.

    tracks: (K, T, N_k, 3). Fewer than two motions give 0.
    """
    tracks = np.asarray(tracks, dtype=np.float64)
    k = tracks.shape[0]
    if k < 2:
        return 0.0
    # (K, N_k, T*3): per-keypoint trajectories flattened over time
    flat = tracks.transpose(0, 2, 1, 3).reshape(k, tracks.shape[2], -1)
    frames = tracks.shape[1]
    total, pairs = 0.0, 0
    for a in range(k):
        diff = np.sqrt(((flat[a + 1:] - flat[a]) ** 2).sum(-1)) / frames  # (K-a-1, N_k)
        total += float(diff.mean(-1).sum())
        pairs += k - a - 1
    return total / pairs

