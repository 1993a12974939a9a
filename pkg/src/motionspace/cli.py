"""Command-line entry point.

Exit codes: 0 ok, 2 configuration or usage error, 3 numeric divergence,
4 corrupt artifact.

The number of torch threads is read from ``MOTIONSPACE_THREADS`` (default
1, which keeps training bitwise reproducible).
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import container, diff
from . import synthdata as sd
from . import train as tr
from .errors import CorruptArtifactError, DomainError, NumericError
from .geom import trajectory_distance
from .latent import interpolate_latents, project_prompt
from .metrics import diversity, ground_truth_keypoint_tracks, mask_iou, psnr, trajectory_rmse
from .motion import export_gaussians, export_keypoints, write_ply
from .render import png_bytes

log = logging.getLogger("motionspace")

THREADS_ENV = "MOTIONSPACE_THREADS"


class UsageError(DomainError):
    pass


def _write_json(path, payload) -> None:
    container.atomic_write(path, json.dumps(payload, indent=2, sort_keys=True))


def resolve_config(args, base_dir=None) -> cfgmod.Config:
    """preset -> config stored next to the inputs -> --config -> --seed -> --set."""
    cfg = cfgmod.preset(args.preset)
    if base_dir is not None and (Path(base_dir) / "config.ini").exists():
        cfg = cfgmod.load(Path(base_dir) / "config.ini", cfg)
    if args.config:
        cfg = cfgmod.load(args.config, cfg)
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    for item in args.set or []:
        if "=" not in item:
            raise cfgmod.ConfigError(f"{item}: overrides must look like section.name=value")
        key, value = item.split("=", 1)
        cfgmod.apply_override(cfg, key.strip(), value)
    return cfg.validate()


# ----------------------------------------------------------------------------


def generate_datasets(cfg: cfgmod.Config, out: Path):
    d = cfg.data
    scene = sd.gen_scene(d.scene, d.seed)
    motions = sd.gen_motions(scene, d.motions, d.frames, d.seed)
    cams = sd.camera_rig(d.views, d.elevation, d.radius, d.fov, (d.resolution, d.resolution))
    train_views = list(range(d.train_views))
    scale = sd.default_splat_scale(scene)
    meta = {"scene": sd.scene_spec_dict(d.scene), "seed": d.seed, "split": "train"}
    train_ds = sd.render_dataset(scene, motions, cams, train_views, scale, out / "train", meta)
    test_ds = None
    if d.heldout_motions:
        held = sd.heldout_motions(motions, d.heldout_motions, d.seed)
        test_ds = sd.render_dataset(scene, held, cams, train_views, scale, out / "test", dict(meta, split="test"))
    prompts = [{"tokens": tokens, "family": fam} for tokens, fam in sd.heldout_prompts(motions, 10)]
    _write_json(out / "heldout_prompts.json", prompts)
    container.atomic_write(out / "config.ini", cfgmod.dumps(cfg))
    return train_ds, test_ds


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    generate_datasets(cfg, out)
    print(f"dataset written to {out}")
    return 0


def _dataset_dir(path) -> Path:
    path = Path(path)
    return path / "train" if (path / "train" / "manifest.json").exists() else path


def cmd_train(args) -> int:
    data_dir = _dataset_dir(args.data)
    cfg = resolve_config(args, data_dir.parent if data_dir.name == "train" else data_dir)
    dataset = sd.load_dataset(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state = tr.load_checkpoint(args.resume)
        log.info("resuming at stage %d step %d", state.stage, state.step)
    elif (out / "train_log.jsonl").exists():
        (out / "train_log.jsonl").unlink()
    container.atomic_write(out / "config.ini", cfgmod.dumps(cfg if state is None else state.config))
    hooks = tr.RunHooks(out, checkpoint_interval=args.checkpoint_every, echo_every=args.echo_every)
    try:
        state = tr.train(dataset, cfg, hooks=hooks, state=state)
    except tr.TrainingDiverged as exc:
        print(f"error: {exc}; diagnostic checkpoint: {exc.checkpoint}", file=sys.stderr)
        return 3
    tr.save_checkpoint(state, out / "checkpoint.ckpt")
    cache = state.cache
    container.save(out / "trajectories.bin",
                   {"rotations": cache.rotations.numpy(), "translations": cache.translations.numpy(),
                    "canonical": cache.canonical.numpy()},
                   {"motions": cache.motion_count, "frames": cache.frame_count})
    export_keypoints(out / "keypoints.ply", state.keypoints)
    export_gaussians(out / "gaussians.ply", state.gaussians)
    print(f"checkpoint written to {out / 'checkpoint.ckpt'}")
    return 0


def _orbit(state: tr.ModelState, views: int, resolution: int | None = None):
    d = state.config.data
    res = resolution or d.resolution
    return sd.camera_rig(views, d.elevation, d.radius, d.fov, (res, res))


def _write_frames(out: Path, renders, prefix: str) -> int:
    count = 0
    for t, row in enumerate(renders):
        for v, r in enumerate(row):
            container.atomic_write(out / f"{prefix}_v{v:02d}_t{t:03d}.png", png_bytes(r.rgb.numpy()))
            count += 1
    return count


def sample_motions(state: tr.ModelState, count: int, seed: int, cameras, out: Path | None = None,
                   prompt: list[str] | None = None) -> dict:
    """Draw latents from the standard normal (or project a prompt), decode and render.

    Runs under inference mode; the optimizer counters must not move.
    """
    before = dict(diff.COUNTERS)
    gen = torch.Generator().manual_seed(int(seed))
    d = state.config.model.latent_dim
    times = sd.frame_times(state.frames)
    timings, tracks, frames_written = [], [], 0
    with torch.inference_mode():
        if prompt:
            if state.projector is None:
                raise UsageError("checkpoint has no prompt projector")
            z = project_prompt(prompt, state.projector)[None].expand(count, -1).clone()
        else:
            z = torch.randn(count, d, generator=gen)
        for k in range(count):
            start = time.perf_counter()
            renders = tr.render_latent(state, z[k], times, cameras)
            timings.append(time.perf_counter() - start)
            tracks.append(tr.keypoint_tracks(state, z[k:k + 1])[0].numpy())
            if out is not None:
                frames_written += _write_frames(out / "frames", renders, f"s{k:03d}")
                for t in range(state.frames):
                    write_ply(out / "ply" / f"s{k:03d}_t{t:03d}.ply", tracks[-1][t])
    if diff.COUNTERS != before:
        raise RuntimeError("sampling performed an optimization step")
    tracks = np.stack(tracks)
    report = {"count": count, "seed": seed, "prompt": prompt, "frames_written": frames_written,
              "seconds_per_motion": timings, "max_seconds_per_motion": max(timings),
              "diversity": diversity(tracks), "optimization_steps": 0}
    if out is not None:
        container.save(out / "trajectories.bin", {"positions": tracks.astype(np.float32), "latents": z.numpy()},
                       {"count": count, "seed": seed})
        export_keypoints(out / "keypoints.ply", state.keypoints)
        _write_json(out / "report.json", report)
    return report


def cmd_sample(args) -> int:
    state = tr.load_checkpoint(args.checkpoint)
    seed = state.config.train.seed if args.seed is None else args.seed
    prompt = args.prompt.split() if args.prompt else None
    report = sample_motions(state, args.count, seed, _orbit(state, args.views), Path(args.out), prompt)
    print(json.dumps({k: report[k] for k in ("count", "frames_written", "max_seconds_per_motion", "diversity")}))
    return 0


def alpha_grid(steps: int) -> list[float]:
    if steps < 1:
        raise UsageError("steps must be >= 1")
    if steps == 1:
        return [0.5]
    return [i / (steps - 1) for i in range(steps)]


def cmd_interpolate(args) -> int:
    state = tr.load_checkpoint(args.checkpoint)
    mu = state.params["latent.mu"].detach()
    m = mu.shape[0]
    if not (0 <= args.motion_a < m and 0 <= args.motion_b < m):
        raise UsageError(f"motion ids must lie in [0, {m - 1}]")
    out = Path(args.out)
    cams = _orbit(state, args.views)
    times = sd.frame_times(state.frames)
    alphas = alpha_grid(args.steps)
    tracks = []
    with torch.inference_mode():
        for i, a in enumerate(alphas):
            z = interpolate_latents(mu[args.motion_a], mu[args.motion_b], a)
            _write_frames(out / "frames", tr.render_latent(state, z, times, cams), f"a{i:03d}")
            tracks.append(tr.keypoint_tracks(state, z[None])[0].numpy())
    tracks = np.stack(tracks)
    container.save(out / "trajectories.bin", {"positions": tracks.astype(np.float32),
                                              "alphas": np.asarray(alphas, np.float32)}, {})
    _write_json(out / "report.json", {"motion_a": args.motion_a, "motion_b": args.motion_b, "alphas": alphas})
    print(f"{len(alphas)} interpolation steps written to {out}")
    return 0


def reconstruct_dataset(state: tr.ModelState, dataset, motions=None, steps=None) -> dict:
    """Fit a latent per test motion on the training views; score the held-out views."""
    motions = range(dataset.motion_count) if motions is None else motions
    fit_views = list(dataset.train_views)
    eval_views = list(dataset.heldout_views or dataset.train_views)
    results = []
    for m in motions:
        z, info = tr.reconstruct_test_motion(state, dataset.rgb[m][fit_views], dataset.masks[m][fit_views],
                                             [dataset.cameras[v] for v in fit_views], dataset.times, steps=steps)
        with torch.no_grad():
            renders = tr.render_latent(state, z, dataset.times, [dataset.cameras[v] for v in eval_views])
            track = tr.keypoint_tracks(state, z[None]).numpy()
        ious, psnrs = [], []
        for t, row in enumerate(renders):
            for v, r in zip(eval_views, row):
                ious.append(mask_iou(r.alpha.numpy(), dataset.masks[m, v, t]))
                psnrs.append(psnr(r.rgb.numpy(), dataset.rgb[m, v, t]))
        rmse = trajectory_rmse(track, track[:, 0].mean(0), dataset.gt_positions[0, 0], dataset.segment_ids,
                               dataset.segment_transforms[m:m + 1])
        results.append({"motion": int(m), "iou": float(np.mean(ious)), "psnr": float(np.mean(psnrs)),
                        "trajectory_rmse": rmse, "latent": z.tolist(), **info})
    return {"motions": results, "iou": float(np.mean([r["iou"] for r in results])),
            "psnr": float(np.mean([r["psnr"] for r in results])), "fit_views": fit_views, "eval_views": eval_views}


def cmd_reconstruct(args) -> int:
    state = tr.load_checkpoint(args.checkpoint)
    dataset = sd.load_dataset(_test_dir(args.data))
    motions = None if args.motion is None else [args.motion]
    report = reconstruct_dataset(state, dataset, motions, args.steps)
    _write_json(Path(args.out) / "reconstruction.json", report)
    print(json.dumps({"iou": report["iou"], "psnr": report["psnr"]}))
    return 0


def _test_dir(path) -> Path:
    path = Path(path)
    return path / "test" if (path / "test" / "manifest.json").exists() else path


def prompt_family_report(state: tr.ModelState, dataset, prompts) -> dict:
    """Classify each projected prompt by the nearest family-mean ground-truth track.

    Keypoints are matched to ground truth at the decoded rest pose; a family's
    mean is taken over its training motions. Distances are keypoint-averaged
    trajectory distances.
    """
    if state.projector is None:
        raise UsageError("checkpoint has no prompt projector")
    mu = state.params["latent.mu"].detach()
    with torch.no_grad():
        rest = tr.keypoint_tracks(state, mu, dataset.frame_count)[:, 0].mean(0).numpy()
    gt = ground_truth_keypoint_tracks(rest, dataset.gt_positions[0, 0], dataset.segment_ids,
                                      dataset.segment_transforms)
    families = np.array([m.family for m in dataset.motions])
    means = {int(f): gt[families == f].mean(0) for f in np.unique(families)}
    rows = []
    for item in prompts:
        with torch.no_grad():
            z = project_prompt(item["tokens"], state.projector)
            track = tr.keypoint_tracks(state, z[None], dataset.frame_count)[0].numpy()
        dist = {f: float(np.mean([trajectory_distance(track[:, k], m[:, k]) for k in range(track.shape[1])]))
                for f, m in means.items()}
        pick = min(dist, key=dist.get)
        rows.append({"tokens": list(item["tokens"]), "family": int(item["family"]), "predicted": pick,
                     "distances": dist})
    correct = sum(r["predicted"] == r["family"] for r in rows)
    return {"prompts": rows, "correct": correct, "total": len(rows)}


def evaluate_run(state: tr.ModelState, dataset, samples: int, seed: int, prompts=None) -> dict:
    report = tr.evaluate(state, dataset)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(samples, state.config.model.latent_dim, generator=gen)
    report["diversity"] = diversity(tr.keypoint_tracks(state, z).numpy()) if samples else 0.0
    report["diversity_samples"] = samples
    report["stage1_heldout_psnr"] = state.history.get("stage1_heldout_psnr")
    if prompts and state.projector is not None:
        report["prompt_families"] = prompt_family_report(state, dataset, prompts)
    return report


def cmd_eval(args) -> int:
    state = tr.load_checkpoint(args.checkpoint)
    data_dir = _dataset_dir(args.data)
    dataset = sd.load_dataset(data_dir)
    seed = state.config.train.seed if args.seed is None else args.seed
    prompt_file = (data_dir.parent if data_dir.name == "train" else data_dir) / "heldout_prompts.json"
    prompts = json.loads(prompt_file.read_text()) if prompt_file.exists() else None
    report = evaluate_run(state, dataset, args.samples, seed, prompts)
    _write_json(Path(args.out) / "metrics.json", report)
    print(json.dumps({k: report[k] for k in ("psnr", "iou", "trajectory_rmse_relative", "diversity")}))
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (see README for the schema)")
    common.add_argument("--preset", choices=["desk", "paper"], default="desk", help="base configuration")
    common.add_argument("--seed", type=int, help="overrides data.seed and train.seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="typed override such as train.stage1_steps=200 (repeatable)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="motionspace",
        description="Learn a latent space of 3D keypoint motions from multi-view videos and sample from it.",
        epilog=f"Environment: {THREADS_ENV}=N sets the torch thread count (default 1).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render the synthetic multi-motion dataset")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="run both training stages and the prompt projector")
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--echo-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="decode and render motions drawn from the prior")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--views", type=int, default=4, help="orbit cameras to render")
    p.add_argument("--prompt", help="space-separated tokens; uses the prompt projector instead of the prior")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("interpolate", parents=[common], help="render a linear path between two motion latents")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--motion-a", type=int, required=True)
    p.add_argument("--motion-b", type=int, required=True)
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--views", type=int, default=1)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("reconstruct", parents=[common], help="fit latents to unseen test motions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="test dataset (or the gen-data root)")
    p.add_argument("--motion", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", parents=[common], help="held-out-view metrics, trajectory error and diversity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=16, help="prior samples for the diversity proxy")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(int(os.environ.get(THREADS_ENV, "1")))
    try:
        return args.func(args)
    except CorruptArtifactError as exc:
        print(f"error: corrupt artifact: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
