"""Synthetic multi-view, multi-motion supervision for an articulated object.

A scene is a point cloud (a chain of jointed cylinders, or a sphere blob)
normalized into a ball of radius ``extent``. Motions drive chain joints with
sums of sinusoids that vanish at t = 0, so every motion starts from the
canonical pose. Each posed point becomes a small opaque Gaussian and is
rendered from a fixed camera rig.

On-disk layout (format version 1)::

    manifest.json            cameras, shapes, seeds, motions + prompts, file index
    rgb/m{m:03d}_v{v:02d}_t{t:03d}.png
    mask/m{m:03d}_v{v:02d}_t{t:03d}.png
    trajectories.bin         container: positions (M, T, P, 3), segment_ids (P,),
                             segment_transforms (M, T, S, 7) as [qw qx qy qz tx ty tz],
                             canonical (P, 3), colors (P, 3)

The manifest is written last, so a partially written directory never parses.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container
from .errors import DomainError
from .render import Camera, camera_orbit, load_png, png_bytes, splat_render

FORMAT = "motionspace-dataset"
FORMAT_VERSION = 1

PALETTE = np.array(
    [[0.90, 0.35, 0.20], [0.25, 0.65, 0.90], [0.95, 0.80, 0.25], [0.45, 0.85, 0.40],
     [0.75, 0.40, 0.85], [0.90, 0.55, 0.70]]
)


@dataclass
class SceneSpec:
    kind: str = "chain"  # "chain" or "blob"
    segments: int = 3
    points_per_segment: int = 200
    segment_length: float = 1.0
    jitter: float = 0.3  # cylinder radius as a fraction of segment length
    color_scheme: str = "segments"  # "segments", "gradient" or "uniform"
    extent: float = 0.5  # radius of the ball the object is normalized into

    def validate(self) -> None:
        if self.kind not in ("chain", "blob"):
            raise DomainError(f"scene.kind must be 'chain' or 'blob', got {self.kind!r}")
        if self.segments < 1 or self.points_per_segment < 1:
            raise DomainError("scene.segments and scene.points_per_segment must be >= 1")
        for name in ("segment_length", "extent"):
            if getattr(self, name) <= 0:
                raise DomainError(f"scene.{name} must be positive")
        if self.jitter < 0:
            raise DomainError("scene.jitter must be nonnegative")
        if self.color_scheme not in ("segments", "gradient", "uniform"):
            raise DomainError(f"unknown scene.color_scheme {self.color_scheme!r}")


@dataclass
class Scene:
    kind: str
    points: np.ndarray  # (P, 3) canonical
    colors: np.ndarray  # (P, 3)
    segment_ids: np.ndarray  # (P,)
    joint_positions: np.ndarray  # (J, 3); joint j connects segment j to segment j + 1
    joint_axes: np.ndarray  # (J, 3) unit

    @property
    def joint_count(self) -> int:
        return self.joint_positions.shape[0]

    @property
    def segment_count(self) -> int:
        return self.joint_count + 1

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(0) - self.points.min(0)))


@dataclass
class MotionSpec:
    # per joint, up to three (amplitude [rad], frequency [cycles per clip]) terms
    waves: list = field(default_factory=list)
    pulsation: tuple = (0.0, 0.0)  # blob: (relative radial amplitude, frequency)
    frames: int = 20
    tokens: list = field(default_factory=list)
    family: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise DomainError("a motion needs at least two frames")
        for terms in self.waves:
            if len(terms) > 3:
                raise DomainError("at most three sinusoids per joint")

    def angles(self, t: float, joints: int) -> np.ndarray:
        out = np.zeros(joints)
        for j, terms in enumerate(self.waves[:joints]):
            out[j] = sum(a * math.sin(2.0 * math.pi * f * t) for a, f in terms)
        return out

    def to_dict(self) -> dict:
        return {"waves": [[list(map(float, term)) for term in terms] for terms in self.waves],
                "pulsation": list(map(float, self.pulsation)), "frames": self.frames,
                "tokens": list(self.tokens), "family": self.family}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionSpec":
        return cls([[tuple(term) for term in terms] for terms in d["waves"]], tuple(d["pulsation"]),
                   int(d["frames"]), list(d["tokens"]), int(d["family"]))


def frame_times(frames: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, frames)


# ----------------------------------------------------------------------------
# Scenes and kinematics.


def gen_scene(spec: SceneSpec, seed: int = 0) -> Scene:
    spec.validate()
    rng = np.random.default_rng(seed)
    if spec.kind == "blob":
        n = spec.segments * spec.points_per_segment
        v = rng.normal(size=(n, 3))
        pts = spec.extent * v / np.linalg.norm(v, axis=1, keepdims=True)
        seg = np.zeros(n, dtype=np.int64)
        joints = np.zeros((0, 3))
        axes = np.zeros((0, 3))
    else:
        length = spec.segment_length
        radius = spec.jitter * length
        chunks, seg = [], []
        for s in range(spec.segments):
            n = spec.points_per_segment
            r = radius * np.sqrt(rng.uniform(size=n))
            phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
            y = rng.uniform(s * length, (s + 1) * length, size=n)
            chunks.append(np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1))
            seg.append(np.full(n, s))
        pts = np.concatenate(chunks)
        seg = np.concatenate(seg).astype(np.int64)
        joints = np.array([[0.0, s * length, 0.0] for s in range(1, spec.segments)]).reshape(-1, 3)
        axes = np.array([[0.0, 0.0, 1.0] if j % 2 == 0 else [1.0, 0.0, 0.0]
                         for j in range(spec.segments - 1)]).reshape(-1, 3)
        center = np.array([0.0, spec.segments * length / 2.0, 0.0])
        pts = pts - center
        joints = joints - center
        scale = spec.extent / np.linalg.norm(pts, axis=1).max()
        pts = pts * scale
        joints = joints * scale
    if spec.color_scheme == "segments":
        colors = PALETTE[seg % len(PALETTE)]
    elif spec.color_scheme == "gradient":
        h = (pts[:, 1] - pts[:, 1].min()) / max(np.ptp(pts[:, 1]), 1e-9)
        colors = np.stack([0.2 + 0.7 * h, 0.5 * np.ones_like(h), 0.9 - 0.7 * h], axis=1)
    else:
        colors = np.tile([0.8, 0.6, 0.3], (pts.shape[0], 1))
    return Scene(spec.kind, pts, np.asarray(colors, dtype=np.float64), seg, joints, axes)


def _axis_angle_matrix(axis, angle) -> np.ndarray:
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def segment_transforms(scene: Scene, motion: MotionSpec, t: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """World rigid transform (R, b) of every segment: x -> R x + b."""
    angles = motion.angles(t, scene.joint_count)
    out = [(np.eye(3), np.zeros(3))]
    rot, trans = np.eye(3), np.zeros(3)
    for j in range(scene.joint_count):
        r = _axis_angle_matrix(scene.joint_axes[j], angles[j])
        c = scene.joint_positions[j]
        # compose: current world transform after rotation about the canonical joint
        local_b = c - r @ c
        rot, trans = rot @ r, rot @ local_b + trans
        out.append((rot.copy(), trans.copy()))
    return out


def animate(scene: Scene, motion: MotionSpec, t: float):
    """Posed points and per-segment transforms (R, b) at normalized time ``t``."""
    if not 0.0 <= t <= 1.0:
        raise DomainError("t must lie in [0, 1]")
    if scene.kind == "blob":
        amp, freq = motion.pulsation
        s = 1.0 + amp * math.sin(2.0 * math.pi * freq * t)
        return scene.points * s, [(np.eye(3), np.zeros(3))]
    transforms = segment_transforms(scene, motion, t)
    posed = np.empty_like(scene.points)
    for s, (r, b) in enumerate(transforms):
        sel = scene.segment_ids == s
        posed[sel] = scene.points[sel] @ r.T + b
    return posed, transforms


def transforms_array(transforms) -> np.ndarray:
    from .geom import matrix_to_quat

    return np.stack([np.concatenate([matrix_to_quat(r), b]) for r, b in transforms])


# ----------------------------------------------------------------------------
# Motion families and prompt rules.

FAMILIES = [
    {"tokens": ["bend", "left"], "joints": [0], "signs": [1.0]},
    {"tokens": ["bend", "right"], "joints": [0], "signs": [-1.0]},
    {"tokens": ["nod", "forward"], "joints": [-1], "signs": [1.0]},
    {"tokens": ["wave", "whole"], "joints": [0, -1], "signs": [1.0, -1.0]},
]
SLOW_FREQ = (0.5, 0.9)
FAST_FREQ = (1.3, 1.8)
AMPLITUDE = (0.35, 0.7)
LARGE_AMPLITUDE = 0.5
FAST_THRESHOLD = 1.1


def motion_tokens(family: int, waves) -> list[str]:
    """Rule-based prompt: family words, then speed and size words."""
    main = [terms[0] for terms in waves if terms]
    freq = max((f for _, f in main), default=0.0)
    amp = max((abs(a) for a, _ in main), default=0.0)
    return list(FAMILIES[family]["tokens"]) + ["fast" if freq > FAST_THRESHOLD else "slow",
                                                "large" if amp > LARGE_AMPLITUDE else "small"]


def _family_waves(scene: Scene, family: int, amp: float, freq: float, rng) -> list:
    joints = scene.joint_count
    waves = [[] for _ in range(joints)]
    if joints == 0:
        return waves
    spec = FAMILIES[family]
    for j, sign in zip(spec["joints"], spec["signs"]):
        j = j % joints
        terms = [(sign * amp, freq)]
        if len(spec["joints"]) > 1:
            terms.append((sign * 0.25 * amp * rng.uniform(0.8, 1.2), 2.0 * freq))
        waves[j] = terms
    return waves


def gen_motions(scene: Scene, count: int, frames: int = 20, seed: int = 0) -> list[MotionSpec]:
    """``count`` motions cycling through the families; odd cycles are fast."""
    rng = np.random.default_rng(seed + 7919)
    motions = []
    for m in range(count):
        family = m % len(FAMILIES)
        fast = (m // len(FAMILIES)) % 2 == 1
        freq = rng.uniform(*(FAST_FREQ if fast else SLOW_FREQ))
        amp = rng.uniform(*AMPLITUDE)
        if scene.kind == "blob":
            pulsation = (0.1 * amp, freq)
            waves = []
            tokens = ["pulse", "fast" if fast else "slow", "large" if amp > LARGE_AMPLITUDE else "small"]
        else:
            pulsation = (0.0, 0.0)
            waves = _family_waves(scene, family, amp, freq, rng)
            tokens = motion_tokens(family, waves)
        motions.append(MotionSpec(waves, pulsation, frames, tokens, family))
    return motions


def heldout_motions(train: list[MotionSpec], count: int = 1, seed: int = 0) -> list[MotionSpec]:
    """Convex combinations of two same-family training motions."""
    rng = np.random.default_rng(seed + 104729)
    by_family: dict[int, list[MotionSpec]] = {}
    for mo in train:
        by_family.setdefault(mo.family, []).append(mo)
    families = sorted(f for f, ms in by_family.items() if len(ms) >= 2) or sorted(by_family)
    out = []
    for i in range(count):
        fam = families[i % len(families)]
        members = by_family[fam]
        a, b = members[0], members[1 % len(members)]
        lam = float(rng.uniform(0.3, 0.7))
        waves = [
            [((1 - lam) * ta[0] + lam * tb[0], (1 - lam) * ta[1] + lam * tb[1]) for ta, tb in zip(wa, wb)]
            for wa, wb in zip(a.waves, b.waves)
        ]
        pulsation = tuple((1 - lam) * pa + lam * pb for pa, pb in zip(a.pulsation, b.pulsation))
        tokens = motion_tokens(fam, waves) if waves and any(waves) else list(a.tokens)
        out.append(MotionSpec(waves, pulsation, a.frames, tokens, fam))
    return out


def heldout_prompts(motions: list[MotionSpec], count: int = 10) -> list[tuple[list[str], int]]:
    """Unseen prompts built only from training tokens, with their source family.

    Variants drop or swap the speed/size words, so every prompt differs from
    the training prompt it came from while keeping its family words.
    """
    speed_swap = {"fast": "slow", "slow": "fast"}
    size_swap = {"large": "small", "small": "large"}
    seen = {tuple(m.tokens) for m in motions}
    out, i = [], 0
    variants = [
        lambda tk: tk[:2],
        lambda tk: tk[:2] + [tk[2]],
        lambda tk: tk[:2] + [tk[3]],
        lambda tk: tk[:2] + [speed_swap.get(tk[2], tk[2]), tk[3]],
        lambda tk: tk[:2] + [tk[2], size_swap.get(tk[3], tk[3])],
    ]
    while len(out) < count and i < 50 * max(1, len(motions)):
        mo = motions[i % len(motions)]
        tokens = variants[(i // len(motions)) % len(variants)](list(mo.tokens))
        i += 1
        if tuple(tokens) in seen:
            continue
        seen.add(tuple(tokens))
        out.append((tokens, mo.family))
    return out


# ----------------------------------------------------------------------------
# Rendering and storage.


def camera_rig(views: int, elevation=15.0, radius=2.0, fov=33.9, resolution=(64, 64), azimuth0=30.0) -> list[Camera]:
    if views < 1:
        raise DomainError("at least one view is required")
    return [camera_orbit(azimuth0 + 360.0 * v / views, elevation, radius, fov, resolution) for v in range(views)]


def points_to_gaussians(points, colors, splat_scale: float, dtype=torch.float32):
    n = points.shape[0]
    return (
        torch.as_tensor(points, dtype=dtype),
        torch.full((n, 3), math.log(splat_scale), dtype=dtype),
        torch.full((n,), 6.0, dtype=dtype),
        torch.as_tensor(colors, dtype=dtype),
    )


def default_splat_scale(scene: Scene) -> float:
    """0.8 x the mean distance to the 3 nearest neighbors (estimated on at most 1000 query points)."""
    pts = scene.points
    if pts.shape[0] < 2:
        return 0.05 * max(float(np.abs(pts).max()), 1.0)
    queries = np.arange(pts.shape[0])
    if queries.size > 1000:
        queries = np.sort(np.random.default_rng(0).choice(queries, 1000, replace=False))
    k = min(3, pts.shape[0] - 1)
    d = np.linalg.norm(pts[queries, None, :] - pts[None], axis=-1)
    d[np.arange(queries.size), queries] = np.inf
    spacing = np.sort(d, axis=1)[:, :k].mean()
    return float(0.8 * spacing)


@dataclass
class Dataset:
    rgb: np.ndarray  # (M, V, T, H, W, 3) float32, premultiplied over black
    masks: np.ndarray  # (M, V, T, H, W) float32 in {0, 1}
    cameras: list
    times: np.ndarray  # (T,)
    gt_positions: np.ndarray  # (M, T, P, 3)
    segment_ids: np.ndarray  # (P,)
    segment_transforms: np.ndarray  # (M, T, S, 7)
    motions: list
    train_views: list
    heldout_views: list
    meta: dict = field(default_factory=dict)

    @property
    def motion_count(self) -> int:
        return self.rgb.shape[0]

    @property
    def view_count(self) -> int:
        return self.rgb.shape[1]

    @property
    def frame_count(self) -> int:
        return self.rgb.shape[2]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.rgb.shape[4], self.rgb.shape[3]

    @property
    def prompts(self) -> list[list[str]]:
        return [m.tokens for m in self.motions]

    @property
    def bbox_diagonal(self) -> float:
        canon = self.gt_positions[0, 0]
        return float(np.linalg.norm(canon.max(0) - canon.min(0)))


def render_dataset(scene: Scene, motions: list[MotionSpec], cameras: list[Camera], train_views=None,
                   splat_scale: float | None = None, out_dir=None, meta: dict | None = None) -> Dataset:
    if not cameras:
        raise DomainError("at least one camera is required")
    frames = motions[0].frames
    if any(m.frames != frames for m in motions):
        raise DomainError("all motions must share the frame count")
    train_views = list(range(len(cameras))) if train_views is None else list(train_views)
    heldout = [v for v in range(len(cameras)) if v not in train_views]
    scale = default_splat_scale(scene) if splat_scale is None else splat_scale
    w, h = cameras[0].width, cameras[0].height
    times = frame_times(frames)
    m_count, v_count = len(motions), len(cameras)
    rgb = np.zeros((m_count, v_count, frames, h, w, 3), np.float32)
    masks = np.zeros((m_count, v_count, frames, h, w), np.float32)
    gt = np.zeros((m_count, frames, scene.points.shape[0], 3), np.float64)
    seg_tf = np.zeros((m_count, frames, scene.segment_count, 7), np.float64)
    out_dir = None if out_dir is None else Path(out_dir)
    files = []
    with torch.no_grad():
        for m, motion in enumerate(motions):
            for t, time in enumerate(times):
                posed, tfs = animate(scene, motion, float(time))
                gt[m, t] = posed
                seg_tf[m, t] = transforms_array(tfs)
                means, log_scales, logits, colors = points_to_gaussians(posed, scene.colors, scale)
                for v, cam in enumerate(cameras):
                    out = splat_render(means, log_scales, logits, colors, cam)
                    mask = (out.alpha.numpy() > 0.5).astype(np.float32)
                    # 8-bit round trip so in-memory data equals what is read back from disk
                    rgb[m, v, t] = np.round(np.clip(out.rgb.numpy(), 0, 1) * 255.0) / 255.0
                    masks[m, v, t] = mask
                    if out_dir is not None:
                        name = f"m{m:03d}_v{v:02d}_t{t:03d}.png"
                        container.atomic_write(out_dir / "rgb" / name, png_bytes(rgb[m, v, t]))
                        container.atomic_write(out_dir / "mask" / name, png_bytes(mask))
                        files.append(name)
    ds = Dataset(rgb, masks, list(cameras), times, gt.astype(np.float32), scene.segment_ids.copy(),
                 seg_tf.astype(np.float32), list(motions), train_views, heldout, dict(meta or {}))
    ds.meta.setdefault("splat_scale", scale)
    if out_dir is not None:
        container.save(
            out_dir / "trajectories.bin",
            {"positions": ds.gt_positions, "segment_ids": ds.segment_ids.astype(np.float32),
             "segment_transforms": ds.segment_transforms, "canonical": scene.points, "colors": scene.colors},
            {"frames": frames, "motions": m_count},
        )
        manifest = {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "meta": ds.meta,
            "resolution": [w, h],
            "shape": {"motions": m_count, "views": v_count, "frames": frames, "points": int(scene.points.shape[0])},
            "times": times.tolist(),
            "cameras": [c.to_dict() for c in cameras],
            "train_views": train_views,
            "heldout_views": heldout,
            "motions": [mo.to_dict() for mo in motions],
            "prompts": [list(mo.tokens) for mo in motions],
            "files": {"rgb": "rgb/{name}", "mask": "mask/{name}", "pattern": "m{m:03d}_v{v:02d}_t{t:03d}.png",
                      "ground_truth": "trajectories.bin", "count": len(files)},
        }
        container.atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return ds


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DomainError(f"no readable dataset manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != FORMAT_VERSION:
        raise DomainError(f"unsupported dataset format in {path}")
    shape = manifest["shape"]
    w, h = manifest["resolution"]
    m_count, v_count, frames = shape["motions"], shape["views"], shape["frames"]
    rgb = np.zeros((m_count, v_count, frames, h, w, 3), np.float32)
    masks = np.zeros((m_count, v_count, frames, h, w), np.float32)
    for m in range(m_count):
        for v in range(v_count):
            for t in range(frames):
                name = f"m{m:03d}_v{v:02d}_t{t:03d}.png"
                rgb[m, v, t] = load_png(path / "rgb" / name)
                masks[m, v, t] = load_png(path / "mask" / name)
    arrays, _ = container.load(path / "trajectories.bin")
    return Dataset(
        rgb, masks, [Camera.from_dict(c) for c in manifest["cameras"]], np.asarray(manifest["times"]),
        arrays["positions"], arrays["segment_ids"].astype(np.int64), arrays["segment_transforms"],
        [MotionSpec.from_dict(d) for d in manifest["motions"]], manifest["train_views"],
        manifest["heldout_views"], manifest.get("meta", {}),
    )


def scene_spec_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
