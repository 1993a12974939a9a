"""Acceptance suite: one group of tests per criterion, summarized at the end of the run.

The desk pipeline (gen-data, train, eval, reconstruct, sample, interpolate) runs
once per session through the CLI; later criteria read its artifacts.
"""

import hashlib
import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from motionspace import container, diff, geom
from motionspace import synthdata as sd
from motionspace import train as tr
from motionspace.cli import main
from motionspace.diff import fd_check
from motionspace.latent import LatentTable, MotionDecoder, interpolate_latents
from motionspace.loss import arap_loss, chamfer, kl_loss, photometric_loss
from motionspace.metrics import diversity
from motionspace.motion import GaussianSet, KeyPointSet, MotionGraph, lbs_deform, skinning_assignment
from motionspace.render import camera_orbit, png_bytes, splat_render

from conftest import random_quats

F64 = torch.float64

REDUCED = [
    "data.motions=4", "data.frames=6", "data.views=2", "data.train_views=1", "data.resolution=16",
    "data.heldout_motions=1", "scene.points_per_segment=60",
    "model.n_k=12", "model.graph_degree=4", "model.n_g=8", "model.width=32", "model.depth=4",
    "train.stage1_steps=40", "train.stage2_steps=30", "train.stage1_resolution=8",
    "train.stage2_resolutions=0:8,0.5:16", "train.densify_interval=10", "train.anneal_interval=20",
    "train.reassign_interval=10", "train.projector_steps=50", "train.recon_steps=5",
]


def sets(items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


def run_cli(*argv):
    assert main([str(a) for a in argv]) == 0, argv


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Default desk preset, end to end through the CLI."""
    root = tmp_path_factory.mktemp("desk")
    data, run = root / "data", root / "run"
    run_cli("gen-data", "--out", data)
    start = time.perf_counter()
    run_cli("train", "--data", data, "--out", run)
    run_cli("eval", "--checkpoint", run / "checkpoint.ckpt", "--data", data, "--out", run)
    elapsed = time.perf_counter() - start
    state = tr.load_checkpoint(run / "checkpoint.ckpt")
    metrics = json.loads((run / "metrics.json").read_text())
    log = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
    return {"root": root, "data": data, "run": run, "state": state, "metrics": metrics, "log": log,
            "seconds": elapsed, "train": sd.load_dataset(data / "train")}


# ----------------------------------------------------------------------------
# 1. gradients against central differences (float64 oracle)


def _splat_scene(n, seed):
    g = torch.Generator().manual_seed(seed)
    return {
        "means": (torch.rand(n, 3, generator=g, dtype=F64) - 0.5) * 0.6,
        "log_scales": torch.log(0.05 + 0.1 * torch.rand(n, 3, generator=g, dtype=F64)),
        "logits": torch.randn(n, generator=g, dtype=F64),
        "colors": torch.rand(n, 3, generator=g, dtype=F64),
    }


@pytest.mark.criterion(1)
def test_gradients_match_finite_differences():
    start = time.perf_counter()
    errors = {}

    cam = camera_orbit(40, 20, 2.0, resolution=(16, 16))
    p = _splat_scene(6, 3)
    g = torch.Generator().manual_seed(4)
    target_rgb = torch.rand(16, 16, 3, generator=g, dtype=F64)
    target_mask = (torch.rand(16, 16, generator=g, dtype=F64) > 0.5).to(F64)

    def photo():
        out = splat_render(p["means"], p["log_scales"], p["logits"], p["colors"], cam)
        return photometric_loss(out.rgb, out.alpha, target_rgb, target_mask)

    errors["photometric"] = fd_check(photo, p).max_rel_error

    pos = {"pos": torch.randn(5, 10, 3, generator=g, dtype=F64)}
    edges = geom.knn(pos["pos"][0].numpy(), 4)
    w = torch.rand(10, 4, generator=g, dtype=F64)
    errors["arap"] = fd_check(lambda: arap_loss(pos["pos"], edges, w, dt=2), pos).max_rel_error

    lat = {"mu": torch.randn(4, 8, generator=g, dtype=F64), "lv": torch.randn(4, 8, generator=g, dtype=F64)}
    errors["kl"] = fd_check(lambda: kl_loss(LatentTable(lat["mu"], lat["lv"])), lat).max_rel_error

    pts = {"a": torch.randn(3, 12, 3, generator=g, dtype=F64), "b": torch.randn(3, 9, 3, generator=g, dtype=F64)}
    errors["chamfer"] = fd_check(lambda: chamfer(pts["a"], pts["b"]), pts).max_rel_error

    dec = MotionDecoder(latent_dim=4, width=16, depth=8, pos_freqs=3, time_freqs=2, seed=5).double()
    with torch.no_grad():
        dec.layers[-1].weight.normal_(generator=torch.Generator().manual_seed(6))
    params = {k: v.detach().clone() for k, v in dec.named_parameters()}
    params["z"] = torch.randn(3, 4, generator=g, dtype=F64)
    kp = torch.randn(6, 3, generator=g, dtype=F64)
    times = torch.tensor([0.0, 0.4, 0.9], dtype=F64)
    weight = torch.randn(3, 6, 7, generator=g, dtype=F64)

    def decode():
        net = {k: v for k, v in params.items() if k != "z"}
        return (torch.func.functional_call(dec, net, (params["z"], kp, times)) * weight).sum()

    errors["decoder"] = fd_check(decode, params).max_rel_error

    elapsed = time.perf_counter() - start
    print(f"\nfd max relative errors {errors}, {elapsed:.1f}s")
    assert max(errors.values()) < 1e-5, errors
    assert elapsed < 120


# ----------------------------------------------------------------------------
# 2. analytic invariants


def _rig(seed, n_k=10, n_g=60, degree=4):
    g = torch.Generator().manual_seed(seed)
    kp = KeyPointSet(torch.randn(n_k, 3, generator=g, dtype=F64), torch.log(0.2 + torch.rand(n_k, generator=g, dtype=F64)))
    r = np.random.default_rng(seed)
    splats = GaussianSet(torch.randn(n_g, 3, generator=g, dtype=F64), random_quats(r, n_g),
                         torch.zeros(n_g, 3, dtype=F64), torch.zeros(n_g, dtype=F64), torch.rand(n_g, 3, dtype=F64))
    graph = MotionGraph(geom.knn(kp.positions.numpy(), degree))
    return kp, splats, skinning_assignment(splats, kp, graph)


@pytest.mark.criterion(2)
@pytest.mark.parametrize("seed", range(5))
def test_skinning_and_lbs_invariants(seed):
    kp, splats, a = _rig(seed)
    assert torch.allclose(a.weights.sum(1), torch.ones(len(splats), dtype=F64), atol=1e-6)
    n = len(kp)
    c, r = lbs_deform(splats.centers, splats.rotations, kp.positions, a.drivers, a.weights, geom.SE3.identity(n, dtype=F64))
    assert torch.allclose(c, splats.centers, atol=1e-5) and torch.allclose(r, splats.rotations, atol=1e-5)
    rng = np.random.default_rng(100 + seed)
    q = random_quats(rng, 1)[0]
    t = torch.tensor(rng.normal(size=3))
    tf = geom.SE3(q.expand(n, 4), geom.quat_rotate(q, kp.positions) + t - kp.positions)
    c, r = lbs_deform(splats.centers, splats.rotations, kp.positions, a.drivers, a.weights, tf)
    assert torch.allclose(c, geom.quat_rotate(q, splats.centers) + t, atol=1e-5)
    expected = geom.quat_canonical(geom.quat_multiply(q.expand(len(splats), 4), splats.rotations))
    assert torch.allclose(r, expected, atol=1e-5)


@pytest.mark.criterion(2)
@pytest.mark.parametrize("seed", range(5))
def test_arap_vanishes_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    canon = torch.tensor(rng.normal(size=(16, 3)))
    frames = []
    for q in random_quats(rng, 6):
        frames.append(geom.quat_rotate(q, canon) + torch.tensor(rng.normal(size=3)))
    pos = torch.stack(frames)
    edges = geom.knn(canon.numpy(), 5)
    w = torch.tensor(rng.uniform(0.1, 1.0, size=(16, 5)))
    for dt in (1, 2, 4):
        assert arap_loss(pos, edges, w, dt=dt).item() < 1e-6


@pytest.mark.criterion(2)
def test_kl_and_chamfer_identities():
    assert kl_loss(LatentTable(torch.zeros(5, 8), torch.zeros(5, 8))).item() == 0.0
    g = torch.Generator().manual_seed(0)
    mu = 3 * torch.randn(10_000, 4, generator=g, dtype=F64)
    log_var = 3 * torch.randn(10_000, 4, generator=g, dtype=F64)
    per_draw = [kl_loss(LatentTable(mu[i:i + 1], log_var[i:i + 1])).item() for i in range(10_000)]
    assert min(per_draw) >= 0.0
    pts = torch.randn(2, 30, 3, generator=g)
    assert chamfer(pts, pts).item() == 0.0


# ----------------------------------------------------------------------------
# 3. exhaustive oracles on small instances


def _dist(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def brute_knn(points, k):
    out = []
    for i, p in enumerate(points):
        ranked = sorted((_dist(p, q), j) for j, q in enumerate(points) if j != i)
        out.append([j for _, j in ranked[:k]])
    return np.array(out)


def brute_fps(points, m, start=0):
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i, p in enumerate(points):
            d = min(_dist(p, points[c]) for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


def brute_chamfer(a, b):
    def one_way(x, y):
        return sum(min(_dist(u, v) ** 2 for v in y) for u in x) / len(x)
    return one_way(a, b) + one_way(b, a)


def brute_trajectory_distance(a, b):
    return math.sqrt(sum(_dist(p, q) ** 2 for p, q in zip(a, b))) / len(a)


def brute_diversity(tracks):
    k, frames, n = tracks.shape[:3]
    values = []
    for a, b in itertools.combinations(range(k), 2):
        per_kp = [brute_trajectory_distance(tracks[a, :, j], tracks[b, :, j]) for j in range(n)]
        values.append(sum(per_kp) / n)
    return sum(values) / len(values)


@pytest.mark.criterion(3)
@pytest.mark.parametrize("seed", range(3))
def test_geometry_oracles(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(64, 3))
    assert np.array_equal(geom.knn(pts, 6), brute_knn(pts, 6))
    assert np.array_equal(geom.fps(pts, 16, start_index=seed), brute_fps(pts, 16, seed))
    a, b = rng.normal(size=(64, 3)), rng.normal(size=(40, 3))
    assert chamfer(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(brute_chamfer(a, b), rel=1e-12)
    ta, tb = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    assert geom.trajectory_distance(ta, tb) == pytest.approx(brute_trajectory_distance(ta, tb), rel=1e-12)
    tracks = rng.normal(size=(5, 8, 6, 3))
    assert diversity(tracks) == pytest.approx(brute_diversity(tracks), rel=1e-12)


@pytest.mark.criterion(3)
@pytest.mark.parametrize("mu,var", [(0.7, 0.3), (-1.5, 2.5), (0.05, 0.08)])
def test_kl_matches_monte_carlo(mu, var):
    rng = np.random.default_rng(7)
    x = mu + math.sqrt(var) * rng.standard_normal(1_000_000)
    log_q = -0.5 * (np.log(2 * np.pi * var) + (x - mu) ** 2 / var)
    log_p = -0.5 * (np.log(2 * np.pi) + x ** 2)
    estimate = float(np.mean(log_q - log_p))
    exact = kl_loss(LatentTable(torch.tensor([[mu]], dtype=F64), torch.tensor([[math.log(var)]], dtype=F64))).item()
    assert abs(estimate - exact) / exact < 0.02


# ----------------------------------------------------------------------------
# 4. desk reconstruction


@pytest.mark.slow
@pytest.mark.criterion(4)
def test_desk_reconstruction(desk):
    m = desk["metrics"]
    print(f"\nheld-out IoU {m['iou']:.4f}, trajectory RMSE {100 * m['trajectory_rmse_relative']:.2f}% of bbox "
          f"diagonal, PSNR {m['psnr']:.2f}, train+eval {desk['seconds'] / 60:.1f} min")
    assert m["iou"] > 0.85
    assert m["trajectory_rmse_relative"] < 0.05
    assert desk["seconds"] < 45 * 60


@pytest.mark.slow
@pytest.mark.criterion(4)
def test_desk_stage1_mask_loss_drops(desk):
    stage1 = [r["mask_l1"] for r in desk["log"] if r["stage"] == 1]
    head, tail = np.mean(stage1[:10]), np.mean(stage1[-50:])
    print(f"\nstage-1 mask L1 {head:.4f} -> {tail:.4f} ({head / tail:.1f}x)")
    assert head / tail >= 5.0


@pytest.mark.slow
@pytest.mark.criterion(4)
def test_desk_gaussians_beat_keypoint_rendering(desk):
    m = desk["metrics"]
    assert m["psnr"] > m["stage1_heldout_psnr"]


@pytest.mark.slow
@pytest.mark.criterion(4)
def test_desk_training_loss_descends(desk):
    for stage in (1, 2):
        losses = [r["loss"] for r in desk["log"] if r["stage"] == stage]
        assert np.mean(losses[-50:]) < np.mean(losses[:50])


# ----------------------------------------------------------------------------
# 5. held-out motion reconstruction


@pytest.mark.slow
@pytest.mark.criterion(5)
def test_heldout_motion_reconstruction(desk):
    run_cli("reconstruct", "--checkpoint", desk["run"] / "checkpoint.ckpt", "--data", desk["data"],
            "--out", desk["run"])
    report = json.loads((desk["run"] / "reconstruction.json").read_text())
    print(f"\nheld-out motion IoU {[round(r['iou'], 4) for r in report['motions']]}")
    assert all(r["steps"] <= 300 for r in report["motions"])
    assert report["iou"] > 0.8


@pytest.mark.slow
@pytest.mark.criterion(5)
def test_training_motion_latent_is_recovered(desk):
    from motionspace.cli import reconstruct_dataset

    state, dataset = desk["state"], desk["train"]
    report = reconstruct_dataset(state, dataset, motions=[0])
    original = desk["metrics"]["iou_per_motion"][0]
    print(f"\nrecovered IoU {report['iou']:.4f} vs training latent {original:.4f}")
    assert report["iou"] >= original - 0.02


# ----------------------------------------------------------------------------
# 6. sampling


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_sampling_is_a_single_forward_pass(desk):
    out = desk["root"] / "samples"
    before = dict(diff.COUNTERS)
    run_cli("sample", "--checkpoint", desk["run"] / "checkpoint.ckpt", "--count", 16, "--out", out)
    assert diff.COUNTERS == before
    report = json.loads((out / "report.json").read_text())
    print(f"\nslowest sample {report['max_seconds_per_motion']:.3f}s, diversity {report['diversity']:.5f}")
    assert report["optimization_steps"] == 0
    assert report["max_seconds_per_motion"] <= 5.0
    assert report["diversity"] > 0.0


# ----------------------------------------------------------------------------
# 7. interpolation


def _step_ratio(tracks):
    steps = np.linalg.norm(np.diff(tracks, axis=0), axis=-1).max()
    span = np.linalg.norm(tracks[-1] - tracks[0], axis=-1).max()
    return float(steps / span)


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_interpolation_endpoints_and_continuity(desk):
    state = desk["state"]
    out = desk["root"] / "interp"
    run_cli("interpolate", "--checkpoint", desk["run"] / "checkpoint.ckpt", "--motion-a", 0, "--motion-b", 1,
            "--steps", 11, "--out", out)
    arrays, _ = container.load(out / "trajectories.bin")
    assert np.allclose(arrays["alphas"], np.linspace(0, 1, 11), atol=1e-7)

    mu = state.params["latent.mu"].detach()
    times = sd.frame_times(state.frames)
    cams = sd.camera_rig(1, state.config.data.elevation, state.config.data.radius, state.config.data.fov,
                         (state.config.data.resolution,) * 2)
    with torch.no_grad():
        for index, motion in ((0, 0), (10, 1)):
            renders = tr.render_latent(state, mu[motion], times, cams)
            for t, row in enumerate(renders):
                written = (out / "frames" / f"a{index:03d}_v00_t{t:03d}.png").read_bytes()
                assert written == png_bytes(row[0].rgb.numpy())

    ratios = {}
    for a, b in ((0, 1), (2, 3), (4, 5), (6, 7)):
        with torch.no_grad():
            path = np.stack([tr.keypoint_tracks(state, interpolate_latents(mu[a], mu[b], alpha)[None])[0].numpy()
                             for alpha in np.linspace(0.0, 1.0, 11)])
        ratios[(a, b)] = _step_ratio(path)
    print(f"\nlargest interpolation step / endpoint displacement {ratios}")
    assert ratios[(0, 1)] == pytest.approx(_step_ratio(arrays["positions"]), rel=1e-5)
    assert max(ratios.values()) <= 0.2


# ----------------------------------------------------------------------------
# 8. determinism


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_pipeline_is_bitwise_reproducible(tmp_path):
    digests = []
    for name in ("a", "b"):
        root = tmp_path / name
        run_cli("gen-data", "--out", root / "data", *sets(REDUCED))
        run_cli("train", "--data", root / "data", "--out", root / "run")
        run_cli("eval", "--checkpoint", root / "run" / "checkpoint.ckpt", "--data", root / "data",
                "--out", root / "run")
        digests.append({f: _digest(root / "run" / f) for f in ("checkpoint.ckpt", "metrics.json",
                                                                "trajectories.bin", "train_log.jsonl")})
    assert digests[0] == digests[1]


# ----------------------------------------------------------------------------
# 9. prompt projection


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_heldout_prompts_select_their_family(desk):
    report = desk["metrics"]["prompt_families"]
    for row in report["prompts"]:
        print(row["tokens"], row["family"], row["predicted"])
    assert report["total"] == 10
    assert report["correct"] >= 8
