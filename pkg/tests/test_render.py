import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from motionspace import container
from motionspace.diff import fd_check
from motionspace.errors import DomainError, NumericError
from motionspace.render import (ALPHA_MAX, Camera, camera_orbit, load_png, save_planes, save_png, splat_render)


def _logit(p):
    return math.log(p / (1 - p))


def scene(n, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    means = (torch.rand(n, 3, generator=g, dtype=dtype) - 0.5) * 0.6
    log_scales = torch.log(0.05 + 0.1 * torch.rand(n, 3, generator=g, dtype=dtype))
    logits = torch.randn(n, generator=g, dtype=dtype)
    colors = torch.rand(n, 3, generator=g, dtype=dtype)
    return means, log_scales, logits, colors


def composite_pixel(u, v, cam, means, scales, opac, colors):
    """Plain-python reference of one pixel's front-to-back compositing."""
    uvz = cam.project(means)
    order = sorted(range(len(means)), key=lambda i: (uvz[i, 2], i))
    rgb, trans, depth = np.zeros(3), 1.0, 0.0
    for i in order:
        su, sv, z = uvz[i]
        if z <= cam.near or z >= cam.far:
            continue
        sigma = cam.focal * scales[i] / z
        d2 = (u - su) ** 2 + (v - sv) ** 2
        if d2 > (3 * sigma) ** 2:
            continue
        a = min(opac[i] * math.exp(-d2 / (2 * sigma * sigma)), ALPHA_MAX)
        rgb += trans * a * colors[i]
        depth += trans * a * z
        trans *= 1 - a
    return rgb, 1 - trans, depth


def test_orbit_conventions():
    cam = camera_orbit(0, 0, 2.0)
    assert np.allclose(cam.position, [0, 0, 2], atol=1e-12)
    back = camera_orbit(180, 0, 2.0)
    assert np.allclose(back.position, [0, 0, -2], atol=1e-12)
    assert np.allclose(back.rotation[2], -cam.rotation[2], atol=1e-12)


@given(st.floats(-180, 180), st.floats(-80, 80))
def test_origin_projects_to_center(az, el):
    cam = camera_orbit(az, el, 2.0, resolution=(64, 48))
    u, v, z = cam.project(np.zeros((1, 3)))[0]
    assert u == pytest.approx(31.5, abs=1e-9) and v == pytest.approx(23.5, abs=1e-9) and z == pytest.approx(2.0)


def test_camera_validation():
    with pytest.raises(DomainError):
        camera_orbit(0, 0, -1.0)
    with pytest.raises(DomainError):
        camera_orbit(0, 0, 2.0, fov=180)
    with pytest.raises(DomainError):
        camera_orbit(0, 0, 2.0, resolution=(4, 4))


def test_camera_dict_roundtrip():
    cam = camera_orbit(30, 15, 2.0)
    again = Camera.from_dict(cam.to_dict())
    assert np.array_equal(again.rotation, cam.rotation) and again.width == cam.width


def test_empty_render_is_black():
    cam = camera_orbit(0, 0, resolution=(16, 16))
    out = splat_render(torch.zeros(0, 3), torch.zeros(0, 3), torch.zeros(0), torch.zeros(0, 3), cam)
    assert out.rgb.abs().sum() == 0 and out.alpha.abs().sum() == 0


def test_nonfinite_raises():
    cam = camera_orbit(0, 0, resolution=(16, 16))
    with pytest.raises(NumericError):
        splat_render(torch.tensor([[float("nan"), 0, 0]]), torch.zeros(1, 3), torch.zeros(1), torch.zeros(1, 3), cam)


@pytest.mark.parametrize("opacity", [0.3, 0.8, 0.995])
def test_center_pixel_alpha_single_gaussian(opacity):
    cam = camera_orbit(0, 0, 2.0, resolution=(33, 33))
    out = splat_render(torch.zeros(1, 3, dtype=torch.float64), torch.full((1, 3), math.log(0.05), dtype=torch.float64),
                       torch.tensor([_logit(opacity)], dtype=torch.float64), torch.ones(1, 3, dtype=torch.float64), cam)
    a = out.alpha.numpy()
    assert a[16, 16] == pytest.approx(min(opacity, ALPHA_MAX), abs=1e-4)
    # radially symmetric on the pixel grid
    assert np.allclose(a, a.T, atol=1e-12) and np.allclose(a, a[::-1], atol=1e-12) and np.allclose(a, a[:, ::-1])


def test_matches_reference_compositor():
    cam = camera_orbit(25, 10, 2.0, resolution=(20, 16))
    means, log_scales, logits, colors = scene(7, seed=3)
    out = splat_render(means, log_scales, logits, colors, cam)
    scales = torch.exp(log_scales).mean(-1).numpy()
    opac = torch.sigmoid(logits).numpy()
    for v in range(16):
        for u in range(20):
            rgb, alpha, depth = composite_pixel(u, v, cam, means.numpy(), scales, opac, colors.numpy())
            assert np.allclose(out.rgb[v, u].numpy(), rgb, atol=1e-12)
            assert out.alpha[v, u].item() == pytest.approx(alpha, abs=1e-12)
            assert out.depth[v, u].item() == pytest.approx(depth, abs=1e-12)


def test_opaque_front_gaussian_hides_back():
    cam = camera_orbit(0, 0, 2.0, resolution=(17, 17))
    means = torch.tensor([[0.0, 0, 0.5], [0.0, 0, -0.5]], dtype=torch.float64)  # first is nearer (camera at +z)
    colors = torch.tensor([[1.0, 0, 0], [0, 1.0, 0]], dtype=torch.float64, requires_grad=True)
    out = splat_render(means, torch.full((2, 3), math.log(0.05), dtype=torch.float64),
                       torch.tensor([20.0, 20.0], dtype=torch.float64), colors, cam)
    # clamp keeps 1% transmittance behind the front splat
    assert out.rgb[8, 8, 1].item() == pytest.approx(0.01 * 0.99, abs=1e-9)
    assert out.rgb[8, 8, 0].item() == pytest.approx(0.99, abs=1e-9)
    g = torch.autograd.grad(out.rgb[8, 8, 0], colors)[0]
    assert g[0, 0].item() == pytest.approx(0.99, abs=1e-9)
    assert g[1, 0].item() == pytest.approx(0.01 * 0.99, abs=1e-9)


def test_color_gradient_equals_composited_weight():
    cam = camera_orbit(0, 0, 2.0, resolution=(17, 17))
    colors = torch.tensor([[0.2, 0.4, 0.6]], dtype=torch.float64, requires_grad=True)
    out = splat_render(torch.zeros(1, 3, dtype=torch.float64), torch.full((1, 3), math.log(0.08), dtype=torch.float64),
                       torch.tensor([0.4], dtype=torch.float64), colors, cam)
    g = torch.autograd.grad(out.rgb[6, 9, 0], colors)[0]
    assert g[0, 0].item() == pytest.approx(out.alpha[6, 9].item(), abs=1e-15)


def test_zero_output_gradient_gives_zero_parameter_gradients():
    cam = camera_orbit(0, 0, 2.0, resolution=(16, 16))
    params = [t.requires_grad_(True) for t in scene(5)]
    out = splat_render(*params, cam)
    loss = 0.0 * (out.rgb.sum() + out.alpha.sum() + out.depth.sum())
    for g in torch.autograd.grad(loss, params):
        assert g.abs().max() == 0


def test_fd_gradients_16x16():
    cam = camera_orbit(40, 20, 2.0, resolution=(16, 16))
    means, log_scales, logits, colors = scene(5, seed=7)
    params = {"means": means, "log_scales": log_scales, "logits": logits, "colors": colors}
    w = torch.rand(16, 16, 5, generator=torch.Generator().manual_seed(1), dtype=torch.float64)

    def fn():
        out = splat_render(params["means"], params["log_scales"], params["logits"], params["colors"], cam)
        return (out.rgb * w[..., :3]).sum() + (out.alpha * w[..., 3]).sum() + (out.depth * w[..., 4]).sum()

    report = fd_check(fn, params, step=1e-6)
    assert report.max_rel_error < 1e-5, report


def test_translation_invariance():
    cam = camera_orbit(60, 20, 2.0, resolution=(24, 24))
    means, log_scales, logits, colors = scene(12, seed=2)
    offset = np.array([0.3, -0.7, 1.1])
    moved = Camera(cam.fov_y, cam.rotation, cam.translation - cam.rotation @ offset, 24, 24)
    a = splat_render(means, log_scales, logits, colors, cam)
    b = splat_render(means + torch.tensor(offset), log_scales, logits, colors, moved)
    assert torch.allclose(a.rgb, b.rgb, atol=1e-5) and torch.allclose(a.alpha, b.alpha, atol=1e-5)


@given(st.integers(0, 1000), st.integers(0, 7), st.floats(0.1, 4.0))
def test_alpha_monotone_in_opacity(seed, idx, bump):
    cam = camera_orbit(0, 10, 2.0, resolution=(12, 12))
    means, log_scales, logits, colors = scene(8, seed=seed)
    a = splat_render(means, log_scales, logits, colors, cam).alpha
    logits2 = logits.clone()
    logits2[idx] += bump
    b = splat_render(means, log_scales, logits2, colors, cam).alpha
    assert bool((b >= a - 1e-12).all())


def test_depth_ties_broken_by_index():
    cam = camera_orbit(0, 0, 2.0, resolution=(9, 9))
    means = torch.zeros(2, 3, dtype=torch.float64)
    colors = torch.tensor([[1.0, 0, 0], [0, 0, 1.0]], dtype=torch.float64)
    out = splat_render(means, torch.full((2, 3), math.log(0.05), dtype=torch.float64),
                       torch.tensor([20.0, 20.0], dtype=torch.float64), colors, cam)
    assert out.rgb[4, 4, 0] > out.rgb[4, 4, 2]


def test_image_io_roundtrip(tmp_path):
    cam = camera_orbit(0, 0, 2.0, resolution=(16, 16))
    out = splat_render(*scene(6, dtype=torch.float32), cam)
    save_png(tmp_path / "a.png", out.rgb)
    back = load_png(tmp_path / "a.png")
    assert np.abs(back - out.rgb.numpy()).max() <= 0.5 / 255 + 1e-6
    save_planes(tmp_path / "a.bin", out, {"note": "golden"})
    arrays, meta = container.load(tmp_path / "a.bin")
    assert np.array_equal(arrays["rgb"], out.rgb.numpy()) and meta["note"] == "golden"
