"""Pinhole cameras and a differentiable isotropic point-splat rasterizer.

Camera space follows the OpenCV convention (x right, y down, z forward).
Pixel centers sit at integer coordinates, so the principal point of a W x H
image is ((W - 1) / 2, (H - 1) / 2).

Each Gaussian becomes a screen-space isotropic footprint with
``sigma_px = f * mean(scale) / depth``, truncated at 3 sigma. Footprints are
composited front to back after a stable depth sort::

    C = sum_i c_i a_i prod_{j<i} (1 - a_j),   a_i = min(o_i G_i(u), 0.99)

Alpha and expected depth use the same weights. The forward pass records the
transmittance seen by every (Gaussian, pixel) contribution so the backward
pass can walk the same footprints back to front without dividing by (1 - a).
"""

import math
from dataclasses import dataclass

import numba
import numpy as np
import torch
from PIL import Image

from . import container
from .errors import DomainError, NumericError
from .geom import SE3, matrix_to_quat

ALPHA_MAX = 0.99
CUTOFF_SIGMAS = 3.0


@dataclass(frozen=True)
class Camera:
    fov_y: float  # degrees
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.fov_y < 180.0:
            raise DomainError(f"fov_y must lie in (0, 180), got {self.fov_y}")
        if self.width < 8 or self.height < 8:
            raise DomainError("resolution must be at least 8x8")

    @property
    def focal(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.fov_y) / 2.0)

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def pose(self) -> SE3:
        q = torch.from_numpy(matrix_to_quat(self.rotation))
        return SE3(q, torch.from_numpy(np.asarray(self.translation, dtype=np.float64)))

    def with_resolution(self, width: int, height: int) -> "Camera":
        return Camera(self.fov_y, self.rotation, self.translation, width, height, self.near, self.far)

    def to_camera(self, points: torch.Tensor) -> torch.Tensor:
        rot = torch.as_tensor(self.rotation, dtype=points.dtype)
        trans = torch.as_tensor(self.translation, dtype=points.dtype)
        return points @ rot.T + trans

    def project(self, points) -> np.ndarray:
        """World points (N, 3) -> (N, 3) array of (u, v, depth)."""
        pc = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        cx, cy = self.principal_point
        z = pc[:, 2]
        return np.stack([self.focal * pc[:, 0] / z + cx, self.focal * pc[:, 1] / z + cy, z], -1)

    def to_dict(self) -> dict:
        return {
            "fov_y": self.fov_y,
            "rotation": np.asarray(self.rotation).tolist(),
            "translation": np.asarray(self.translation).tolist(),
            "width": self.width,
            "height": self.height,
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            float(d["fov_y"]),
            np.asarray(d["rotation"], dtype=np.float64),
            np.asarray(d["translation"], dtype=np.float64),
            int(d["width"]),
            int(d["height"]),
            float(d.get("near", 0.05)),
            float(d.get("far", 100.0)),
        )


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        # looking straight along up: pick any perpendicular
        right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return rot, -rot @ position


def camera_orbit(azimuth, elevation, radius=2.0, fov=33.9, resolution=(64, 64), near=0.05, far=100.0) -> Camera:
    if radius <= 0:
        raise DomainError("radius must be positive")
    az, el = math.radians(azimuth), math.radians(elevation)
    pos = radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    rot, trans = look_at(pos)
    return Camera(float(fov), rot, trans, int(resolution[0]), int(resolution[1]), near, far)


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W), alpha-weighted (unnormalized) depth


# ----------------------------------------------------------------------------
# Kernels. ``order`` is the front-to-back visiting order of Gaussians.


@numba.njit(cache=True)
def _footprint(x, y, z, s, f, cx, cy, width, height, near, far):
    if z <= near or z >= far:
        return 0.0, 0.0, 0.0, 0, -1, 0, -1
    u = f * x / z + cx
    v = f * y / z + cy
    sig = f * s / z
    if not sig > 0.0:
        return 0.0, 0.0, 0.0, 0, -1, 0, -1
    rad = CUTOFF_SIGMAS * sig
    x0 = max(0, int(math.ceil(u - rad)))
    x1 = min(width - 1, int(math.floor(u + rad)))
    y0 = max(0, int(math.ceil(v - rad)))
    y1 = min(height - 1, int(math.floor(v + rad)))
    return u, v, sig, x0, x1, y0, y1


@numba.njit(cache=True)
def _splat_forward(means, scale, opacity, colors, order, f, cx, cy, width, height, near, far):
    n = means.shape[0]
    dt = means.dtype
    rgb = np.zeros((height, width, 3), dt)
    alpha = np.zeros((height, width), dt)
    depth = np.zeros((height, width), dt)
    trans = np.ones((height, width), dt)
    starts = np.zeros(n, np.int64)
    counts = np.zeros(n, np.int64)

    bound = 0
    for i in range(n):
        u, v, sig, x0, x1, y0, y1 = _footprint(
            means[i, 0], means[i, 1], means[i, 2], scale[i], f, cx, cy, width, height, near, far
        )
        if x1 >= x0 and y1 >= y0:
            bound += (x1 - x0 + 1) * (y1 - y0 + 1)
    records = np.empty(bound, dt)

    k = 0
    for r in range(n):
        i = order[r]
        z = means[i, 2]
        u, v, sig, x0, x1, y0, y1 = _footprint(
            means[i, 0], means[i, 1], z, scale[i], f, cx, cy, width, height, near, far
        )
        starts[i] = k
        rad2 = (CUTOFF_SIGMAS * sig) ** 2
        inv2s2 = 1.0 / (2.0 * sig * sig) if sig > 0.0 else 0.0
        o = opacity[i]
        for py in range(y0, y1 + 1):
            dy = py - v
            for px in range(x0, x1 + 1):
                dx = px - u
                d2 = dx * dx + dy * dy
                if d2 > rad2:
                    continue
                a = o * math.exp(-d2 * inv2s2)
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                t = trans[py, px]
                records[k] = t
                k += 1
                w = a * t
                rgb[py, px, 0] += colors[i, 0] * w
                rgb[py, px, 1] += colors[i, 1] * w
                rgb[py, px, 2] += colors[i, 2] * w
                alpha[py, px] += w
                depth[py, px] += z * w
                trans[py, px] = t * (1.0 - a)
        counts[i] = k - starts[i]
    return rgb, alpha, depth, starts, counts, records[:k]


@numba.njit(cache=True)
def _splat_backward(means, scale, opacity, colors, order, f, cx, cy, width, height, near, far,
                    starts, records, g_rgb, g_alpha, g_depth):
    n = means.shape[0]
    dt = means.dtype
    g_means = np.zeros((n, 3), dt)
    g_scale = np.zeros(n, dt)
    g_opacity = np.zeros(n, dt)
    g_colors = np.zeros((n, 3), dt)
    suffix_c = np.zeros((height, width, 3), dt)
    suffix_a = np.zeros((height, width), dt)
    suffix_d = np.zeros((height, width), dt)

    for r in range(n - 1, -1, -1):
        i = order[r]
        x = means[i, 0]
        y = means[i, 1]
        z = means[i, 2]
        u, v, sig, x0, x1, y0, y1 = _footprint(x, y, z, scale[i], f, cx, cy, width, height, near, far)
        if x1 < x0 or y1 < y0:
            continue
        rad2 = (CUTOFF_SIGMAS * sig) ** 2
        inv2s2 = 1.0 / (2.0 * sig * sig)
        o = opacity[i]
        c0 = colors[i, 0]
        c1 = colors[i, 1]
        c2 = colors[i, 2]
        k = starts[i]
        gu = 0.0
        gv = 0.0
        gsig = 0.0
        go = 0.0
        gz_direct = 0.0
        gc0 = 0.0
        gc1 = 0.0
        gc2 = 0.0
        for py in range(y0, y1 + 1):
            dy = py - v
            for px in range(x0, x1 + 1):
                dx = px - u
                d2 = dx * dx + dy * dy
                if d2 > rad2:
                    continue
                gauss = math.exp(-d2 * inv2s2)
                a = o * gauss
                clamped = a > ALPHA_MAX
                if clamped:
                    a = ALPHA_MAX
                t = records[k]
                k += 1
                w = a * t
                r0 = g_rgb[py, px, 0]
                r1 = g_rgb[py, px, 1]
                r2 = g_rgb[py, px, 2]
                ga = g_alpha[py, px]
                gd = g_depth[py, px]
                gc0 += r0 * w
                gc1 += r1 * w
                gc2 += r2 * w
                gz_direct += gd * w
                inv = 1.0 / (1.0 - a)
                dl_da = (
                    r0 * (c0 * t - suffix_c[py, px, 0] * inv)
                    + r1 * (c1 * t - suffix_c[py, px, 1] * inv)
                    + r2 * (c2 * t - suffix_c[py, px, 2] * inv)
                    + ga * (t - suffix_a[py, px] * inv)
                    + gd * (z * t - suffix_d[py, px] * inv)
                )
                suffix_c[py, px, 0] += c0 * w
                suffix_c[py, px, 1] += c1 * w
                suffix_c[py, px, 2] += c2 * w
                suffix_a[py, px] += w
                suffix_d[py, px] += z * w
                if not clamped:
                    go += dl_da * gauss
                    g = dl_da * a / (sig * sig)
                    gu += g * dx
                    gv += g * dy
                    gsig += g * d2 / sig
        g_colors[i, 0] = gc0
        g_colors[i, 1] = gc1
        g_colors[i, 2] = gc2
        g_opacity[i] = go
        # u = f x / z + cx, v = f y / z + cy, sig = f s / z
        fz = f / z
        g_means[i, 0] = gu * fz
        g_means[i, 1] = gv * fz
        g_means[i, 2] = gz_direct - (gu * (u - cx) + gv * (v - cy) + gsig * sig) / z
        g_scale[i] = gsig * fz
    return g_means, g_scale, g_opacity, g_colors


class _Splat(torch.autograd.Function):
    @staticmethod
    def forward(ctx, cam_means, scale, opacity, colors, camera):
        means_np = cam_means.detach().contiguous().numpy()
        scale_np = scale.detach().contiguous().numpy()
        opacity_np = opacity.detach().contiguous().numpy()
        colors_np = colors.detach().contiguous().numpy()
        order = np.argsort(means_np[:, 2], kind="stable")
        cx, cy = camera.principal_point
        args = (
            means_np, scale_np, opacity_np, colors_np, order, camera.focal, cx, cy,
            camera.width, camera.height, camera.near, camera.far,
        )
        rgb, alpha, depth, starts, _, records = _splat_forward(*args)
        ctx.kernel_args = args
        ctx.starts = starts
        ctx.records = records
        return torch.from_numpy(rgb), torch.from_numpy(alpha), torch.from_numpy(depth)

    @staticmethod
    def backward(ctx, g_rgb, g_alpha, g_depth):
        means_np = ctx.kernel_args[0]
        h, w = ctx.kernel_args[9], ctx.kernel_args[8]
        dt = means_np.dtype

        def prep(g, shape):
            if g is None:
                return np.zeros(shape, dt)
            return g.detach().to(torch.float64 if dt == np.float64 else torch.float32).contiguous().numpy()

        grads = _splat_backward(
            *ctx.kernel_args, ctx.starts, ctx.records,
            prep(g_rgb, (h, w, 3)), prep(g_alpha, (h, w)), prep(g_depth, (h, w)),
        )
        return tuple(torch.from_numpy(g) for g in grads) + (None,)


def splat_render(means, log_scales, opacity_logits, colors, camera: Camera) -> RenderOutput:
    """Render world-space Gaussians; differentiable in every tensor argument."""
    if means.shape[0] == 0:
        h, w = camera.height, camera.width
        z = means.new_zeros
        return RenderOutput(z(h, w, 3), z(h, w), z(h, w))
    if not bool(torch.isfinite(means).all()) or not bool(torch.isfinite(log_scales).all()):
        raise NumericError("non-finite Gaussian center or scale")
    cam_means = camera.to_camera(means)
    scale = torch.exp(log_scales).mean(-1)
    opacity = torch.sigmoid(opacity_logits)
    rgb, alpha, depth = _Splat.apply(cam_means, scale, opacity, colors, camera)
    return RenderOutput(rgb, alpha, depth)


def render_gaussians(gaussians, camera: Camera, centers=None, rotations=None) -> RenderOutput:
    """Render a ``GaussianSet``, optionally with deformed centers."""
    return splat_render(
        gaussians.centers if centers is None else centers,
        gaussians.log_scales,
        gaussians.opacity_logits,
        gaussians.colors,
        camera,
    )


# ----------------------------------------------------------------------------
# Image I/O.


def to_uint8(img) -> np.ndarray:
    arr = np.asarray(img.detach() if isinstance(img, torch.Tensor) else img, dtype=np.float64)
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def png_bytes(img) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    return buf.getvalue()


def save_png(path, img) -> None:
    container.atomic_write(path, png_bytes(img))


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float32) / 255.0


def save_planes(path, output: RenderOutput, meta: dict | None = None) -> None:
    """Exact float32 dump of a render for golden-file comparisons."""
    container.save(
        path,
        {"rgb": output.rgb.detach().numpy(), "alpha": output.alpha.detach().numpy(),
         "depth": output.depth.detach().numpy()},
        meta,
    )
