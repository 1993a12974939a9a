"""Two-stage optimization.

Stage 1 renders the keypoints themselves as splats (with temporary scale,
opacity and color) while learning latents and the motion decoder. Its final
per-motion keypoint transforms are cached. Stage 2 spawns canonical Gaussians
around the keypoints, drives them with LBS and keeps the decoded keypoint
paths close to the cache with a Chamfer term.

Every step draws its randomness from generators seeded by (seed, stage,
step), so a run resumed from a checkpoint follows the same trajectory as an
uninterrupted one.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container, geom
from .config import Config, ConfigError, from_dict, to_dict
from .diff import AdamState, GradientMonitor, ParamStore, adam_step, backward
from .errors import CorruptArtifactError, DomainError, NumericError
from .latent import (LOG_VAR_MAX, LOG_VAR_MIN, LatentTable, MotionDecoder, PromptProjector, decode_motion,
                     sample_latent)
from .loss import arap_loss, chamfer, kl_loss, photometric_loss
from .metrics import mask_iou, psnr, trajectory_rmse
from .motion import (Assignment, DensifyConfig, GaussianSet, KeyPointSet, MotionGraph, TrajectoryCache,
                     build_motion_graph, densify_prune, lbs_deform, skinning_assignment, skinning_weights)
from .render import Camera, splat_render

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "motionspace-checkpoint"
CHECKPOINT_VERSION = 1

KP_SPLAT = ("kp.log_scales", "kp.opacity_logits", "kp.colors")
GAUSS = ("g.centers", "g.rotations", "g.log_scales", "g.opacity_logits", "g.colors")
LOG_SCALE_RANGE = (math.log(1e-3), math.log(0.3))
LOG_RADIUS_RANGE = (math.log(1e-4), math.log(4.0))


class TrainingDiverged(NumericError):
    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def step_generators(seed: int, stage: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    s = int(np.random.SeedSequence([int(seed), int(stage), int(step)]).generate_state(1, np.uint64)[0] >> 1)
    return np.random.default_rng(s), torch.Generator().manual_seed(s)


# ----------------------------------------------------------------------------
# Model state.


@dataclass
class ModelState:
    config: Config
    params: ParamStore
    decoder: MotionDecoder
    adam: AdamState
    graph: MotionGraph
    stage: int = 1
    step: int = 0  # steps completed in the current stage
    cache: TrajectoryCache | None = None
    assignment: Assignment | None = None
    grad_accum: torch.Tensor | None = None
    grad_count: int = 0
    projector: PromptProjector | None = None
    history: dict = field(default_factory=dict)

    @property
    def keypoints(self) -> KeyPointSet:
        return KeyPointSet(self.params["kp.positions"], self.params["kp.log_radii"])

    @property
    def latents(self) -> LatentTable:
        return LatentTable(self.params["latent.mu"], self.params["latent.log_var"])

    @property
    def keypoint_count(self) -> int:
        return self.params["kp.positions"].shape[0]

    @property
    def has_gaussians(self) -> bool:
        return "g.centers" in self.params

    @property
    def gaussians(self) -> GaussianSet:
        if not self.has_gaussians:
            raise DomainError("canonical Gaussians exist only in stage 2")
        return GaussianSet(*(self.params[n] for n in GAUSS))

    def keypoint_splats(self) -> GaussianSet:
        n = self.keypoint_count
        return GaussianSet(self.params["kp.positions"], geom.quat_identity(n), *(self.params[k] for k in KP_SPLAT))

    @property
    def frames(self) -> int:
        return self.config.data.frames


def learning_rates(cfg: Config) -> dict[str, float]:
    t = cfg.train
    return {
        "default": t.lr_decoder,
        "kp.positions": t.lr_keypoints, "kp.log_radii": t.lr_radii,
        "kp.log_scales": t.lr_scale, "kp.opacity_logits": t.lr_opacity, "kp.colors": t.lr_color,
        "latent.mu": t.lr_latent, "latent.log_var": t.lr_latent,
        "g.centers": t.lr_centers, "g.log_scales": t.lr_scale, "g.opacity_logits": t.lr_opacity,
        "g.colors": t.lr_color,
    }


def _new_decoder(cfg: Config) -> MotionDecoder:
    m = cfg.model
    return MotionDecoder(m.latent_dim, m.width, m.depth, m.pos_freqs, m.time_freqs, seed=cfg.train.seed)


def _bind_decoder(store: ParamStore, decoder: MotionDecoder) -> None:
    for name, p in decoder.named_parameters():
        store.bind("decoder." + name, p)


def init_state(config: Config, motions: int) -> ModelState:
    """Fresh stage-1 state: keypoints uniform in a ball, identity decoder."""
    cfg, t = config, config.train
    gen = torch.Generator().manual_seed(int(t.seed))
    n = cfg.model.n_k
    direction = torch.randn(n, 3, generator=gen)
    direction = direction / direction.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    radius = t.keypoint_init_radius * torch.rand(n, 1, generator=gen) ** (1.0 / 3.0)
    store = ParamStore()
    store.add("kp.positions", direction * radius)
    # radii only weight ARAP neighbors in stage 1; reinitialized from spacing for stage 2
    store.add("kp.log_radii", torch.full((n,), math.log(t.keypoint_init_radius ** 2 / n)), trainable=False)
    store.add("kp.log_scales", torch.full((n, 3), math.log(t.keypoint_init_scale)))
    store.add("kp.opacity_logits", torch.full((n,), _logit(t.keypoint_init_opacity)))
    store.add("kp.colors", torch.full((n, 3), 0.5))
    table = LatentTable.init(motions, cfg.model.latent_dim, gen, t.latent_init_std, t.latent_init_log_var)
    store.add("latent.mu", table.mu)
    store.add("latent.log_var", table.log_var)
    decoder = _new_decoder(cfg)
    _bind_decoder(store, decoder)
    state = ModelState(cfg, store, decoder, AdamState(learning_rates(cfg)), MotionGraph(np.zeros((n, 0))))
    state.graph = build_motion_graph(state.keypoints, None, min(cfg.model.graph_degree, n - 1))
    state.grad_accum = torch.zeros(n)
    return state


def check_integrity(state: ModelState) -> None:
    """Assert that every index structure agrees with the current point counts."""
    n = state.keypoint_count
    p = state.params
    if p["kp.log_radii"].shape != (n,):
        raise DomainError("keypoint radii out of sync with positions")
    edges = state.graph.edges
    if edges.shape[0] != n or (edges.size and (edges.min() < 0 or edges.max() >= n)):
        raise DomainError("motion graph does not match keypoint count")
    if state.stage == 1:
        for name in KP_SPLAT:
            if p[name].shape[0] != n:
                raise DomainError(f"{name} out of sync with keypoints")
        if state.grad_accum is None or state.grad_accum.shape != (n,):
            raise DomainError("gradient accumulator out of sync with keypoints")
    if state.has_gaussians:
        g = p["g.centers"].shape[0]
        for name in GAUSS:
            if p[name].shape[0] != g:
                raise DomainError(f"{name} out of sync with Gaussian count")
        a = state.assignment
        if a is None or a.anchor.shape != (g,) or a.drivers.shape[0] != g:
            raise DomainError("skinning assignment does not cover every Gaussian")
        if int(a.drivers.min()) < 0 or int(a.drivers.max()) >= n:
            raise DomainError("skinning driver index out of range")
    if state.cache is not None and state.cache.keypoint_count != n:
        raise DomainError("trajectory cache does not match keypoint count")
    for name, m in state.adam.m.items():
        if name in p and m.shape != p[name].shape:
            raise DomainError(f"optimizer moments for {name} have a stale shape")


def _clamp(state: ModelState) -> None:
    p = state.params
    with torch.no_grad():
        p["latent.log_var"].clamp_(LOG_VAR_MIN, LOG_VAR_MAX)
        p["kp.log_radii"].clamp_(*LOG_RADIUS_RANGE)
        for prefix in ("kp", "g"):
            if f"{prefix}.colors" in p:
                p[f"{prefix}.colors"].clamp_(0.0, 1.0)
                p[f"{prefix}.log_scales"].clamp_(*LOG_SCALE_RANGE)
                p[f"{prefix}.opacity_logits"].clamp_(-12.0, 12.0)


# ----------------------------------------------------------------------------
# Batches and targets.


@dataclass
class Batch:
    motions: np.ndarray
    views: np.ndarray
    frames: np.ndarray
    rgb: np.ndarray  # (bm, bv, bf, H, W, 3)
    masks: np.ndarray  # (bm, bv, bf, H, W)
    cameras: list
    times: np.ndarray  # (bf,)


def sample_batch(dataset, rng: np.random.Generator, spec, views=None) -> Batch:
    """Uniform draw without replacement along motions, views and frames."""
    bm, bv, bf = (int(x) for x in spec)
    views = list(range(dataset.view_count)) if views is None else list(views)
    if min(bm, bv, bf) < 1:
        raise DomainError(f"batch spec {spec} must be at least 1 along every axis")
    if bm > dataset.motion_count or bv > len(views) or bf > dataset.frame_count:
        raise DomainError(f"batch spec {spec} exceeds dataset ({dataset.motion_count}, {len(views)}, "
                          f"{dataset.frame_count})")
    ms = rng.permutation(dataset.motion_count)[:bm]
    vs = np.asarray(views)[rng.permutation(len(views))[:bv]]
    fs = rng.permutation(dataset.frame_count)[:bf]
    idx = np.ix_(ms, vs, fs)
    return Batch(ms, vs, fs, dataset.rgb[idx], dataset.masks[idx], [dataset.cameras[v] for v in vs],
                 np.asarray(dataset.times)[fs])


def _clipped_spec(cfg: Config, dataset) -> tuple[int, int, int]:
    t = cfg.train
    return (min(t.batch_motions, dataset.motion_count), min(t.batch_views, len(dataset.train_views)),
            min(t.batch_frames, dataset.frame_count))


def downsample(images: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter (H, W[, C]) images stored in the axes (..., H, W[, C])."""
    if factor == 1:
        return images
    color = images.ndim >= 3 and images.shape[-1] == 3
    h_axis = images.ndim - (3 if color else 2)
    shape = list(images.shape)
    h, w = shape[h_axis], shape[h_axis + 1]
    if h % factor or w % factor:
        raise DomainError(f"resolution {w}x{h} not divisible by {factor}")
    new = shape[:h_axis] + [h // factor, factor, w // factor, factor] + shape[h_axis + 2:]
    return images.reshape(new).mean(axis=(h_axis + 1, h_axis + 3)).astype(images.dtype)


class _Targets:
    """Cached per-resolution copies of the dataset images and cameras."""

    def __init__(self, dataset):
        self.dataset = dataset
        self._cache = {}

    def at(self, height: int):
        if height not in self._cache:
            ds = self.dataset
            w, h = ds.resolution
            factor = h // height
            if factor * height != h:
                raise DomainError(f"render height {height} does not divide dataset height {h}")
            cams = [c.with_resolution(w // factor, h // factor) for c in ds.cameras]
            self._cache[height] = (downsample(ds.rgb, factor), downsample(ds.masks, factor), cams)
        return self._cache[height]


# ----------------------------------------------------------------------------
# Shared step machinery.


def _partner_frames(frames: np.ndarray, count: int, dt: int) -> np.ndarray:
    partner = frames + dt
    return np.where(partner < count, partner, frames - dt)


def _decode_pairs(state: ModelState, z: torch.Tensor, times: np.ndarray, frames: np.ndarray, partners: np.ndarray):
    """Decode (motion, frame) and (motion, partner frame) for every batch motion."""
    bm, bf = z.shape[0], frames.shape[0]
    all_frames = np.concatenate([frames, partners])
    t = torch.as_tensor(np.asarray(times)[all_frames], dtype=z.dtype)
    zz = z.repeat_interleave(2 * bf, dim=0)
    tt = t.repeat(bm)
    tf = decode_motion(state.decoder, zz, state.params["kp.positions"], tt)
    n = state.keypoint_count
    return geom.SE3(tf.rotation.reshape(bm, 2 * bf, n, 4), tf.translation.reshape(bm, 2 * bf, n, 3))


def _arap_weights(state: ModelState) -> torch.Tensor:
    kp = state.keypoints
    edges = torch.from_numpy(state.graph.edges)
    if edges.shape[1] == 0:
        return torch.zeros(kp.positions.shape[0], 0)
    with torch.no_grad():
        return geom.rbf_weights_sparse(kp.positions, kp.positions, kp.radii, edges)


def _arap_term(state: ModelState, positions: torch.Tensor, bf: int) -> torch.Tensor:
    """Mean over sampled (motion, frame) pairs of the rigidity loss between a frame and its partner."""
    edges = state.graph.edges
    if edges.shape[1] == 0:
        return positions.new_zeros(())
    w = _arap_weights(state)
    total = positions.new_zeros(())
    for i in range(positions.shape[0]):
        for j in range(bf):
            total = total + arap_loss(torch.stack([positions[i, j], positions[i, bf + j]]), edges, w, dt=1)
    return total / (positions.shape[0] * bf)


def _photometric(renders, batch_rgb, batch_mask, weights) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean photometric loss over renders; also returns the mean mask L1 for logging."""
    total, mask_l1 = 0.0, 0.0
    for out, rgb, mask in zip(renders, batch_rgb, batch_mask):
        rgb_t, mask_t = torch.from_numpy(rgb), torch.from_numpy(mask)
        total = total + photometric_loss(out.rgb, out.alpha, rgb_t, mask_t, weights.w_rgb, weights.w_mask)
        mask_l1 = mask_l1 + (out.alpha.detach() - mask_t).abs().mean()
    return total / len(renders), mask_l1 / len(renders)


def _guarded(state: ModelState, hooks, fn):
    try:
        return fn()
    except NumericError as exc:
        path = None
        if hooks is not None and hooks.out_dir is not None:
            path = str(Path(hooks.out_dir) / "diagnostic.ckpt")
            save_checkpoint(state, path, extra_meta={"error": str(exc)})
        raise TrainingDiverged(f"training diverged at stage {state.stage} step {state.step}: {exc}", path) from exc


class RunHooks:
    """Per-step JSONL logging and periodic checkpoints."""

    def __init__(self, out_dir=None, checkpoint_interval: int = 0, echo_every: int = 0):
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.checkpoint_interval = checkpoint_interval
        self.echo_every = echo_every
        self.records = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def on_step(self, state: ModelState, record: dict) -> None:
        self.records.append(record)
        if self.out_dir is not None:
            with open(self.out_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if self.checkpoint_interval and state.step % self.checkpoint_interval == 0:
                save_checkpoint(state, self.out_dir / "checkpoint.ckpt")
        if self.echo_every and state.step % self.echo_every == 0:
            log.info("stage %d step %d loss %.5f", state.stage, state.step, record["loss"])


def _record(state, losses: dict, resolution: int, points: int) -> dict:
    rec = {"stage": state.stage, "step": state.step, "resolution": resolution, "points": points}
    rec.update({k: round(float(v), 8) for k, v in losses.items()})
    return rec


# ----------------------------------------------------------------------------
# Stage 1.


def _stage1_step(state: ModelState, dataset, targets: _Targets, monitor: GradientMonitor) -> dict:
    cfg = state.config
    rng, gen = step_generators(cfg.train.seed, 1, state.step)
    res = cfg.train.stage1_resolution
    rgb_all, mask_all, cams = targets.at(res)
    batch = sample_batch(dataset, rng, _clipped_spec(cfg, dataset), views=dataset.train_views)
    dt = int(rng.choice(cfg.train.dt_choices))
    dt = max(1, min(dt, dataset.frame_count - 1))
    partners = _partner_frames(batch.frames, dataset.frame_count, dt)
    p = state.params
    z = sample_latent(p["latent.mu"][batch.motions], p["latent.log_var"][batch.motions], gen)
    tf = _decode_pairs(state, z, dataset.times, batch.frames, partners)
    positions = p["kp.positions"] + tf.translation  # (bm, 2bf, N, 3)
    bf = batch.frames.shape[0]
    renders, tgt_rgb, tgt_mask = [], [], []
    for i, m in enumerate(batch.motions):
        for j, f in enumerate(batch.frames):
            for v in batch.views:
                renders.append(splat_render(positions[i, j], p["kp.log_scales"], p["kp.opacity_logits"],
                                            p["kp.colors"], cams[v]))
                tgt_rgb.append(rgb_all[m, v, f])
                tgt_mask.append(mask_all[m, v, f])
    w = cfg.loss
    photo, mask_l1 = _photometric(renders, tgt_rgb, tgt_mask, w)
    arap = _arap_term(state, positions, bf)
    kl = kl_loss(state.latents)
    total = photo + w.w_arap * arap + cfg.train.kl_scale(1, state.step) * w.w_kl * kl
    grads = backward(total, p)
    monitor.update(grads)
    state.grad_accum += grads["kp.positions"].detach().norm(dim=-1)
    state.grad_count += 1
    adam_step(p, grads, state.adam)
    _clamp(state)
    return {"loss": total.detach(), "photometric": photo.detach(), "mask_l1": mask_l1, "arap": arap.detach(),
            "kl": kl.detach()}, res


def _reindex_keypoints(state: ModelState, new_splats: GaussianSet | None, source) -> None:
    """Replace per-keypoint groups after a densify/prune/anneal event."""
    source = torch.as_tensor(np.asarray(source), dtype=torch.long)
    p = state.params
    old = {n: p[n].detach() for n in ("kp.positions", "kp.log_radii") + KP_SPLAT}
    if new_splats is None:
        new = {n: t[source] for n, t in old.items()}
    else:
        new = {"kp.positions": new_splats.centers, "kp.log_radii": old["kp.log_radii"][source],
               "kp.log_scales": new_splats.log_scales, "kp.opacity_logits": new_splats.opacity_logits,
               "kp.colors": new_splats.colors}
    for name, value in new.items():
        p.replace(name, value)
        state.adam.remap(name, source)
    n = p["kp.positions"].shape[0]
    state.grad_accum = torch.zeros(n)
    state.grad_count = 0
    state.graph = build_motion_graph(state.keypoints, None, min(state.config.model.graph_degree, n - 1))
    check_integrity(state)


def _densify(state: ModelState, gen: torch.Generator) -> None:
    t = state.config.train
    stats = state.grad_accum / max(state.grad_count, 1)
    cfg = DensifyConfig(state.config.model.n_k, t.densify_grad, t.prune_opacity)
    new, source = densify_prune(state.keypoint_splats().detach(), stats, cfg, gen)
    _reindex_keypoints(state, new, source)


def _anneal(state: ModelState) -> None:
    n_k = state.config.model.n_k
    if state.keypoint_count <= n_k:
        return
    idx = np.sort(geom.fps(state.params["kp.positions"].detach().numpy(), n_k))
    _reindex_keypoints(state, None, idx)


def build_cache(state: ModelState) -> TrajectoryCache:
    """Decode every training motion at every frame with z = mu."""
    mu = state.params["latent.mu"].detach()
    times = torch.linspace(0.0, 1.0, state.frames, dtype=mu.dtype)
    canonical = state.params["kp.positions"].detach().clone()
    with torch.no_grad():
        tf = decode_motion(state.decoder, mu.repeat_interleave(state.frames, 0), canonical, times.repeat(mu.shape[0]))
    n = canonical.shape[0]
    m = mu.shape[0]
    return TrajectoryCache(tf.rotation.reshape(m, state.frames, n, 4).clone(),
                           tf.translation.reshape(m, state.frames, n, 3).clone(), canonical)


def _finish_stage1(state: ModelState, dataset) -> None:
    _anneal(state)
    state.history["stage1_keypoints"] = state.keypoint_count
    state.history["stage1_heldout_psnr"] = evaluate(state, dataset)["psnr"]
    state.cache = build_cache(state)
    colors = state.params["kp.colors"].detach().clone()
    for name in KP_SPLAT:
        state.params.remove(name)
        state.adam.reset(name)
    state.grad_accum = None
    state.grad_count = 0
    state.stage = 2
    state.step = 0
    _begin_stage2(state, colors)


def stage1_pretrain(dataset, config: Config | None = None, state: ModelState | None = None,
                    hooks: RunHooks | None = None) -> ModelState:
    """Train keypoints-as-splats, latents and decoder; return a stage-2-ready state with a cache."""
    if state is None:
        if config is None:
            raise DomainError("stage1_pretrain needs a config or a state")
        state = init_state(config, dataset.motion_count)
    if state.stage != 1:
        return state
    _check_dataset(state.config, dataset)
    t = state.config.train
    targets = _Targets(dataset)
    monitor = GradientMonitor()
    while state.step < t.stage1_steps:
        losses, res = _guarded(state, hooks, lambda: _stage1_step(state, dataset, targets, monitor))
        state.step += 1
        _, gen = step_generators(t.seed, 11, state.step)
        last = state.step == t.stage1_steps
        if t.densify_interval and state.step % t.densify_interval == 0 and not last:
            _densify(state, gen)
        if t.anneal_interval and state.step % t.anneal_interval == 0 and not last:
            _anneal(state)
        if hooks is not None:
            hooks.on_step(state, _record(state, losses, res, state.keypoint_count))
    _finish_stage1(state, dataset)
    check_integrity(state)
    return state


# ----------------------------------------------------------------------------
# Stage 2.


def keypoint_spacing(positions: torch.Tensor, k: int = 3) -> torch.Tensor:
    """Mean distance from each keypoint to its ``k`` nearest others."""
    pts = positions.detach().numpy()
    n = pts.shape[0]
    if n == 1:
        return torch.full((1,), 0.1, dtype=positions.dtype)
    idx = geom.knn(pts, min(k, n - 1))
    return torch.from_numpy(np.linalg.norm(pts[idx] - pts[:, None], axis=-1).mean(1)).to(positions.dtype)


def spawn_gaussians(keypoints: KeyPointSet, n_g: int, spawn_radius: torch.Tensor, colors: torch.Tensor,
                    scale_factor: float, opacity: float, generator: torch.Generator) -> GaussianSet:
    """``n_g`` Gaussians uniformly inside a ball of ``spawn_radius[k]`` around every keypoint."""
    pos = keypoints.positions.detach()
    n = pos.shape[0]
    direction = torch.randn(n, n_g, 3, generator=generator, dtype=pos.dtype)
    direction = direction / direction.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    r = torch.rand(n, n_g, 1, generator=generator, dtype=pos.dtype) ** (1.0 / 3.0)
    rad = spawn_radius.detach()[:, None, None]
    centers = (pos[:, None, :] + rad * r * direction).reshape(-1, 3)
    # scale ~ spacing of n_g points filling the ball
    scale = (scale_factor * spawn_radius.detach() * n_g ** (-1.0 / 3.0)).clamp(*map(math.exp, LOG_SCALE_RANGE))
    log_scales = torch.log(scale).repeat_interleave(n_g)[:, None].expand(-1, 3).clone()
    total = n * n_g
    return GaussianSet(centers, geom.quat_identity(total, dtype=pos.dtype), log_scales,
                       torch.full((total,), _logit(opacity), dtype=pos.dtype),
                       colors.detach().repeat_interleave(n_g, dim=0).clone())


def _begin_stage2(state: ModelState, colors: torch.Tensor) -> None:
    cfg, t = state.config, state.config.train
    if state.cache is None:
        raise DomainError("stage 2 needs the trajectory cache from stage 1")
    p = state.params
    gen = torch.Generator().manual_seed(int(t.seed) + 2)
    spacing = keypoint_spacing(p["kp.positions"])
    p.replace("kp.log_radii", torch.log(spacing))
    p.set_trainable("kp.log_radii", True)
    g = spawn_gaussians(state.keypoints, cfg.model.n_g, spacing, colors, t.gaussian_scale_factor,
                        t.gaussian_init_opacity, gen)
    for name, value in zip(GAUSS, (g.centers, g.rotations, g.log_scales, g.opacity_logits, g.colors)):
        p.add(name, value, trainable=name != "g.rotations")
    degree = min(cfg.model.graph_degree, state.keypoint_count - 1)
    state.graph = build_motion_graph(state.keypoints, state.cache, degree)
    state.assignment = skinning_assignment(state.gaussians, state.keypoints, state.graph)
    # fresh optimizer for the new parameterization
    state.adam = AdamState(learning_rates(cfg))


def _stage2_step(state: ModelState, dataset, targets: _Targets, monitor: GradientMonitor) -> dict:
    cfg = state.config
    t = cfg.train
    rng, gen = step_generators(t.seed, 2, state.step)
    res = t.resolution_at(state.step / max(1, t.stage2_steps))
    rgb_all, mask_all, cams = targets.at(res)
    batch = sample_batch(dataset, rng, _clipped_spec(cfg, dataset), views=dataset.train_views)
    dt = max(1, min(int(rng.choice(t.dt_choices)), dataset.frame_count - 1))
    partners = _partner_frames(batch.frames, dataset.frame_count, dt)
    p = state.params
    z = sample_latent(p["latent.mu"][batch.motions], p["latent.log_var"][batch.motions], gen)
    tf = _decode_pairs(state, z, dataset.times, batch.frames, partners)
    kp = state.keypoints
    bf = batch.frames.shape[0]
    drivers = state.assignment.drivers
    weights = skinning_weights(p["g.centers"], kp, drivers)
    sel = geom.SE3(tf.rotation[:, :bf], tf.translation[:, :bf])
    centers, _ = lbs_deform(p["g.centers"], p["g.rotations"], kp.positions, drivers, weights, sel)
    renders, tgt_rgb, tgt_mask = [], [], []
    for i, m in enumerate(batch.motions):
        for j, f in enumerate(batch.frames):
            for v in batch.views:
                renders.append(splat_render(centers[i, j], p["g.log_scales"], p["g.opacity_logits"],
                                            p["g.colors"], cams[v]))
                tgt_rgb.append(rgb_all[m, v, f])
                tgt_mask.append(mask_all[m, v, f])
    w = cfg.loss
    photo, mask_l1 = _photometric(renders, tgt_rgb, tgt_mask, w)
    positions = kp.positions + tf.translation
    arap = _arap_term(state, positions, bf)
    kl = kl_loss(state.latents)
    cached = state.cache.positions()[torch.as_tensor(batch.motions)][:, torch.as_tensor(batch.frames)]
    cham = chamfer(positions[:, :bf].reshape(-1, kp.positions.shape[0], 3), cached.reshape(-1, cached.shape[-2], 3))
    total = photo + w.w_arap * arap + w.w_kl * kl + w.w_chamfer * cham
    grads = backward(total, p)
    monitor.update(grads)
    adam_step(p, grads, state.adam)
    _clamp(state)
    return {"loss": total.detach(), "photometric": photo.detach(), "mask_l1": mask_l1, "arap": arap.detach(),
            "kl": kl.detach(), "chamfer": cham.detach()}, res


def stage2_finetune(state: ModelState, dataset, config: Config | None = None,
                    hooks: RunHooks | None = None) -> ModelState:
    """Jointly refine canonical Gaussians, keypoints, latents and decoder."""
    if state.cache is None:
        raise DomainError("stage 2 needs the trajectory cache from stage 1")
    if config is not None:
        state.config = config
    _check_dataset(state.config, dataset)
    t = state.config.train
    targets = _Targets(dataset)
    monitor = GradientMonitor()
    while state.step < t.stage2_steps:
        losses, res = _guarded(state, hooks, lambda: _stage2_step(state, dataset, targets, monitor))
        state.step += 1
        if t.reassign_interval and state.step % t.reassign_interval == 0:
            state.assignment = skinning_assignment(state.gaussians, state.keypoints, state.graph)
            check_integrity(state)
        if hooks is not None:
            hooks.on_step(state, _record(state, losses, res, len(state.params["g.centers"])))
    state.stage = 3 if state.step >= t.stage2_steps else 2
    return state


def _check_dataset(cfg: Config, dataset) -> None:
    if dataset.frame_count != cfg.data.frames:
        raise DomainError(f"dataset has {dataset.frame_count} frames, config expects {cfg.data.frames}")
    if not dataset.train_views:
        raise DomainError("dataset has no training views")


def train(dataset, config: Config, hooks: RunHooks | None = None, state: ModelState | None = None) -> ModelState:
    """Stage 1 then stage 2 (resuming from ``state`` if given), then the prompt projector."""
    state = state if state is not None else init_state(config, dataset.motion_count)
    if state.stage == 1:
        stage1_pretrain(dataset, state=state, hooks=hooks)
    if state.stage == 2:
        stage2_finetune(state, dataset, hooks=hooks)
    if state.projector is None:
        state.projector = train_projector(state, dataset.prompts)
    return state


# ----------------------------------------------------------------------------
# Inference helpers.


def keypoint_tracks(state: ModelState, z: torch.Tensor, frames: int | None = None) -> torch.Tensor:
    """Keypoint positions (B, T, N_k, 3) for latents (B, D) over the full frame range."""
    frames = state.frames if frames is None else frames
    times = torch.linspace(0.0, 1.0, frames, dtype=z.dtype)
    with torch.no_grad():
        tf = decode_motion(state.decoder, z.repeat_interleave(frames, 0), state.params["kp.positions"],
                           times.repeat(z.shape[0]))
    n = state.keypoint_count
    return (state.params["kp.positions"].detach() + tf.translation).reshape(z.shape[0], frames, n, 3)


def render_latent(state: ModelState, z: torch.Tensor, times, cameras) -> list[list]:
    """Renders [frame][view] of one latent (D,) at the given normalized times."""
    p = state.params
    times = torch.as_tensor(np.asarray(times), dtype=z.dtype)
    tf = decode_motion(state.decoder, z[None].expand(times.shape[0], -1), p["kp.positions"], times)
    out = []
    if state.has_gaussians:
        a = state.assignment
        weights = skinning_weights(p["g.centers"], state.keypoints, a.drivers)
        centers, _ = lbs_deform(p["g.centers"], p["g.rotations"], p["kp.positions"], a.drivers, weights, tf)
        for f in range(times.shape[0]):
            out.append([splat_render(centers[f], p["g.log_scales"], p["g.opacity_logits"], p["g.colors"], c)
                        for c in cameras])
    else:
        positions = p["kp.positions"] + tf.translation
        for f in range(times.shape[0]):
            out.append([splat_render(positions[f], *(p[k] for k in KP_SPLAT), c) for c in cameras])
    return out


def evaluate(state: ModelState, dataset, views=None, latents: torch.Tensor | None = None) -> dict:
    """Per-motion PSNR and mask IoU on ``views`` (default: held-out views) and trajectory RMSE."""
    views = list(dataset.heldout_views or dataset.train_views) if views is None else list(views)
    mu = state.params["latent.mu"].detach() if latents is None else latents
    cams = [dataset.cameras[v] for v in views]
    per_psnr, per_iou = [], []
    with torch.no_grad():
        for m in range(dataset.motion_count):
            renders = render_latent(state, mu[m], dataset.times, cams)
            ps, io = [], []
            for f, row in enumerate(renders):
                for vi, out in zip(views, row):
                    ps.append(psnr(out.rgb.numpy(), dataset.rgb[m, vi, f]))
                    io.append(mask_iou(out.alpha.numpy(), dataset.masks[m, vi, f]))
            per_psnr.append(float(np.mean(ps)))
            per_iou.append(float(np.mean(io)))
        tracks = keypoint_tracks(state, mu, dataset.frame_count).numpy()
    # every motion starts from the rest pose, so the decoded frame 0 (not the raw canonical
    # keypoints, which may carry a constant offset) is where ground truth is matched
    rest = tracks[:, 0].mean(0)
    rmse = trajectory_rmse(tracks, rest, dataset.gt_positions[0, 0], dataset.segment_ids,
                           dataset.segment_transforms)
    diag = dataset.bbox_diagonal
    frame0 = tracks[:, 0]
    return {
        "views": views,
        "psnr_per_motion": per_psnr,
        "iou_per_motion": per_iou,
        "psnr": float(np.mean(per_psnr)),
        "iou": float(np.mean(per_iou)),
        "trajectory_rmse": rmse,
        "bbox_diagonal": diag,
        "trajectory_rmse_relative": rmse / diag,
        "frame0_spread_relative": float(np.abs(frame0 - frame0.mean(0)).max() / diag),
    }


def reconstruct_test_motion(state: ModelState, rgb: np.ndarray, masks: np.ndarray, cameras, times,
                            steps: int | None = None, lr: float | None = None, frames_per_step: int | None = None,
                            seed: int | None = None) -> tuple[torch.Tensor, dict]:
    """Fit a fresh latent to (V, T, H, W, 3) videos with every other parameter frozen.

    The latent starts at the standard-normal mean and is optimized through
    the photometric loss alone, decoding z = mu.
    """
    t = state.config.train
    steps = t.recon_steps if steps is None else steps
    lr = t.lr_recon if lr is None else lr
    frames_per_step = t.recon_frames if frames_per_step is None else frames_per_step
    seed = t.seed if seed is None else seed
    v_count, frames = rgb.shape[0], rgb.shape[1]
    store = ParamStore()
    z = store.add("recon.mu", torch.zeros(state.config.model.latent_dim))
    adam = AdamState({"recon.mu": lr})
    w = state.config.loss
    frozen = [(n, state.params.is_trainable(n)) for n in state.params]
    for n, _ in frozen:
        state.params.set_trainable(n, False)

    def loss_on(frame_ids):
        renders = render_latent(state, store["recon.mu"], np.asarray(times)[frame_ids], cameras)
        flat = [out for row in renders for out in row]
        tg_rgb = [rgb[v, f] for f in frame_ids for v in range(v_count)]
        tg_mask = [masks[v, f] for f in frame_ids for v in range(v_count)]
        return _photometric(flat, tg_rgb, tg_mask, w)[0]

    all_frames = np.arange(frames)
    try:
        with torch.no_grad():
            first = float(loss_on(all_frames))
        for step in range(steps):
            rng, _ = step_generators(seed, 5, step)
            pick = np.sort(rng.permutation(frames)[:min(frames_per_step, frames)])
            loss = loss_on(pick)
            grads = backward(loss, store)
            adam_step(store, grads, adam)
        with torch.no_grad():
            last = float(loss_on(all_frames))
    finally:
        for n, flag in frozen:
            state.params.set_trainable(n, flag)
    return store["recon.mu"].detach().clone(), {"loss_initial": first, "loss_final": last, "steps": steps}


def train_projector(state: ModelState, prompts, steps: int | None = None, lr: float | None = None,
                    seed: int | None = None) -> PromptProjector:
    """Regress each motion's prompt onto its latent mean with everything else frozen."""
    t, m = state.config.train, state.config.model
    steps = t.projector_steps if steps is None else steps
    lr = t.lr_projector if lr is None else lr
    seed = t.seed if seed is None else seed
    projector = PromptProjector(m.latent_dim, m.embed_dim, m.projector_hidden, seed=seed)
    store = ParamStore()
    for name, p in projector.named_parameters():
        store.bind(name, p)
    adam = AdamState({"default": lr})
    target = state.params["latent.mu"].detach()
    pooled = torch.stack([projector.pooled(list(tokens)) for tokens in prompts])
    for _ in range(steps):
        loss = ((projector(pooled) - target) ** 2).mean()
        adam_step(store, backward(loss, store), adam)
    for p in projector.parameters():
        p.requires_grad_(False)
    return projector


# ----------------------------------------------------------------------------
# Checkpoints.


def _float(t) -> np.ndarray:
    return np.asarray(t.detach().numpy() if isinstance(t, torch.Tensor) else t, dtype=np.float32)


def save_checkpoint(state: ModelState, path, extra_meta: dict | None = None) -> None:
    arrays = {}
    for name in sorted(state.params):
        arrays["param/" + name] = _float(state.params[name])
    for name in sorted(state.adam.m):
        arrays["adam.m/" + name] = _float(state.adam.m[name])
        arrays["adam.v/" + name] = _float(state.adam.v[name])
    arrays["graph.edges"] = _float(state.graph.edges)
    if state.assignment is not None:
        arrays["assign.anchor"] = _float(state.assignment.anchor)
        arrays["assign.drivers"] = _float(state.assignment.drivers)
    if state.cache is not None:
        arrays["cache.rotations"] = _float(state.cache.rotations)
        arrays["cache.translations"] = _float(state.cache.translations)
        arrays["cache.canonical"] = _float(state.cache.canonical)
    if state.grad_accum is not None:
        arrays["grad.accum"] = _float(state.grad_accum)
    if state.projector is not None:
        for name, value in sorted(state.projector.state_dict().items()):
            arrays["projector/" + name] = _float(value)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": to_dict(state.config),
        "stage": state.stage,
        "step": state.step,
        "grad_count": state.grad_count,
        "adam_step": state.adam.step,
        "trainable": {n: state.params.is_trainable(n) for n in sorted(state.params)},
        "decoder": state.decoder.config(),
        "projector": None if state.projector is None else state.projector.config(),
        "history": state.history,
        "seed": state.config.train.seed,
    }
    meta.update(extra_meta or {})
    container.save(path, arrays, meta)


def load_checkpoint(path) -> ModelState:
    arrays, meta = container.load(path)
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise CorruptArtifactError(f"{path} is not a supported checkpoint")
    try:
        cfg = from_dict(meta["config"])
        decoder = _new_decoder(cfg)
        store = ParamStore()
        _bind_decoder(store, decoder)
        for name, flag in meta["trainable"].items():
            value = torch.from_numpy(arrays["param/" + name].copy())
            if name.startswith("decoder."):
                store.replace(name, value)
                store.set_trainable(name, flag)
            else:
                store.add(name, value, trainable=flag)
        adam = AdamState(learning_rates(cfg), step=int(meta["adam_step"]))
        for key, value in arrays.items():
            if key.startswith("adam.m/"):
                name = key[len("adam.m/"):]
                adam.m[name] = torch.from_numpy(value.copy())
                adam.v[name] = torch.from_numpy(arrays["adam.v/" + name].copy())
        graph = MotionGraph(np.rint(arrays["graph.edges"]).astype(np.int64).reshape(arrays["graph.edges"].shape))
        state = ModelState(cfg, store, decoder, adam, graph, stage=int(meta["stage"]), step=int(meta["step"]),
                           grad_count=int(meta["grad_count"]), history=dict(meta.get("history") or {}))
        if "assign.anchor" in arrays:
            state.assignment = Assignment(np.rint(arrays["assign.anchor"]).astype(np.int64),
                                          torch.from_numpy(np.rint(arrays["assign.drivers"]).astype(np.int64)))
        if "cache.rotations" in arrays:
            state.cache = TrajectoryCache(*(torch.from_numpy(arrays[f"cache.{k}"].copy())
                                            for k in ("rotations", "translations", "canonical")))
        if "grad.accum" in arrays:
            state.grad_accum = torch.from_numpy(arrays["grad.accum"].copy())
        if meta.get("projector"):
            pc = meta["projector"]
            proj = PromptProjector(pc["latent_dim"], pc["embed_dim"], pc["hidden"], pc["vocab_size"])
            proj.load_state_dict({k[len("projector/"):]: torch.from_numpy(v.copy())
                                  for k, v in arrays.items() if k.startswith("projector/")})
            for p in proj.parameters():
                p.requires_grad_(False)
            state.projector = proj
        check_integrity(state)
    except (KeyError, TypeError, ValueError, RuntimeError, ConfigError, DomainError) as exc:
        raise CorruptArtifactError(f"{path}: inconsistent checkpoint ({exc})") from exc
    return state
