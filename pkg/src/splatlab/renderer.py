"""Software splatting of a Gaussian cloud into color / depth / normal / alpha
buffers, with per-Gaussian ray-hit counting.

The renderer composites front to back in camera-space depth order (ties broken
by cloud index), truncates each splat at its 3-sigma ellipse, and stops a
pixel once its transmittance falls below 1e-4. Depth uses the ray/plane
intersection of each flattened Gaussian rather than its center depth; rays
that graze a Gaussian's plane still contribute color and alpha but are left
out of the depth average.

Everything is pure numpy over 16x16 pixel tiles; a render is deterministic
bit for bit given identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianCloud, cloud_normals, quaternion_to_matrix
from .errors import GrazingRayError, InvalidParameterError

NEAR_PLANE = 0.01
COV2D_DILATION = 0.3  # isotropic pixel^2 dilation, the usual anti-alias floor
TILE = 16
ALPHA_MAX = 0.99
TRANSMITTANCE_CUTOFF = 1e-4
ALPHA_FLOOR = 1e-3  # below this accumulated alpha a pixel carries no depth/normal
HIT_WEIGHT_THRESHOLD = 1.0 / 255.0
GRAZE_EPS = 1e-8


@dataclass
class Splat:
    """Projection cache for one Gaussian in one camera."""

    mean2d: np.ndarray  # (2,) pixel coordinates
    cov2d: np.ndarray  # (2, 2) pixels^2, dilated
    center_cam: np.ndarray  # (3,) camera frame
    normal_cam: np.ndarray  # (3,) unit, oriented toward the camera
    opacity: float
    color: np.ndarray
    source_index: int


@dataclass
class RenderBuffers:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3) camera frame
    alpha: np.ndarray  # (H, W) accumulated opacity
    valid: np.ndarray  # (H, W) bool; depth/normal defined only here
    hit_counts: np.ndarray  # (N,) int64


@dataclass
class RenderRecord:
    """Per-contribution bookkeeping for the frozen-weight gradient pass.

    One entry per (pixel, splat) pair that actually composited. ``weight`` is
    alpha * transmittance at blend time; ``depth`` is the splat's intersection
    depth at that pixel (0 where grazing).
    """

    pixel: np.ndarray  # flat pixel index into H*W
    source: np.ndarray  # cloud index
    weight: np.ndarray
    depth: np.ndarray
    grazing: np.ndarray  # bool; excluded from the depth average
    depth_weight_sum: np.ndarray  # (H, W) denominator of the depth average
    normal_sum: np.ndarray  # (H, W, 3) unnormalized alpha-weighted normal sum


def generate_ray(camera: Camera, u: float, v: float) -> np.ndarray:
    """Unit ray direction through pixel (u, v) in the camera frame."""
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise InvalidParameterError(f"pixel ({u}, {v}) outside the image")
    d = np.array(
        [
            (u + 0.5 - camera.cx) / camera.fx,
            (v + 0.5 - camera.cy) / camera.fy,
            1.0,
        ]
    )
    return d / np.linalg.norm(d)


def intersection_depth(normal_cam: np.ndarray, center_cam: np.ndarray, ray: np.ndarray) -> float:
    """Depth (camera z) where a ray from the origin meets the plane
    through ``center_cam`` with normal ``normal_cam``."""
    n_dot_r = float(np.dot(normal_cam, ray))
    if abs(n_dot_r) < GRAZE_EPS:
        raise GrazingRayError("ray nearly parallel to the Gaussian plane")
    return float(ray[2] * np.dot(normal_cam, center_cam) / n_dot_r)


def _project_arrays(camera: Camera, cloud: GaussianCloud):
    """Vectorized projection of a whole cloud; returns arrays plus a keep mask."""
    r_wc = camera.rotation
    p_cam = cloud.positions @ r_wc.T + camera.translation
    keep = p_cam[:, 2] > NEAR_PLANE
    idx = np.nonzero(keep)[0]
    p = p_cam[idx]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]

    rot = quaternion_to_matrix(cloud.rotations[idx])
    m = rot * cloud.scales[idx][:, np.newaxis, :]
    cov3d = m @ np.transpose(m, (0, 2, 1))

    inv_z = 1.0 / z
    j = np.zeros((idx.size, 2, 3))
    j[:, 0, 0] = camera.fx * inv_z
    j[:, 0, 2] = -camera.fx * x * inv_z**2
    j[:, 1, 1] = camera.fy * inv_z
    j[:, 1, 2] = -camera.fy * y * inv_z**2
    jw = j @ r_wc
    cov2d = jw @ cov3d @ np.transpose(jw, (0, 2, 1))
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    mean2d = np.column_stack([camera.fx * x * inv_z + camera.cx, camera.fy * y * inv_z + camera.cy])

    n_cam = cloud_normals(cloud)[idx] @ r_wc.T
    # orient toward the camera: flip where the normal points away from the origin
    flip = np.einsum("ij,ij->i", n_cam, p) > 0
    n_cam[flip] *= -1

    opacity = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[idx]))
    return idx, mean2d, cov2d, p, n_cam, opacity, cloud.colors[idx]


def project_gaussian(camera: Camera, cloud: GaussianCloud, index: int) -> Splat | None:
    """Project one Gaussian; returns None when culled by the near plane."""
    if not 0 <= index < cloud.count:
        raise InvalidParameterError(f"gaussian index {index} out of range")
    sub = cloud.subset(np.array([index]))
    idx, mean2d, cov2d, p_cam, n_cam, opacity, colors = _project_arrays(camera, sub)
    if idx.size == 0:
        return None
    return Splat(
        mean2d=mean2d[0],
        cov2d=cov2d[0],
        center_cam=p_cam[0],
        normal_cam=n_cam[0],
        opacity=float(opacity[0]),
        color=colors[0],
        source_index=index,
    )


def _pixel_centers(width: int, height: int):
    us = np.arange(width) + 0.5
    vs = np.arange(height) + 0.5
    return us, vs


def render(
    camera: Camera,
    cloud: GaussianCloud,
    *,
    exclude: np.ndarray | None = None,
    update_hit_counts: bool = True,
    record: bool = False,
) -> RenderBuffers | tuple[RenderBuffers, RenderRecord]:
    """Composite the cloud into per-pixel buffers.

    ``exclude`` drops the listed cloud indices before splatting (used by the
    perceptual view-assignment criterion); excluded renders never update hit
    counts. With ``record=True`` the per-contribution weights needed by the
    frozen-weight gradient are returned alongside the buffers.
    """
    h, w = camera.height, camera.width
    n_total = cloud.count
    hit_counts = np.zeros(n_total, dtype=np.int64)

    skip = None
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=np.int64).reshape(-1)
        if exclude.size and (exclude.min() < 0 or exclude.max() >= n_total):
            raise InvalidParameterError("excluded index out of range")
        skip = np.zeros(n_total, dtype=bool)
        skip[exclude] = True

    color = np.zeros((h, w, 3))
    depth_num = np.zeros((h, w))
    depth_den = np.zeros((h, w))
    normal_sum = np.zeros((h, w, 3))
    transmittance = np.ones((h, w))

    rec_px: list[np.ndarray] = []
    rec_src: list[np.ndarray] = []
    rec_w: list[np.ndarray] = []
    rec_d: list[np.ndarray] = []
    rec_g: list[np.ndarray] = []

    if n_total:
        idx, mean2d, cov2d, p_cam, n_cam, opacity, colors = _project_arrays(camera, cloud)
        if skip is not None and idx.size:
            live = ~skip[idx]
            idx, mean2d, cov2d = idx[live], mean2d[live], cov2d[live]
            p_cam, n_cam, opacity, colors = p_cam[live], n_cam[live], opacity[live], colors[live]
    else:
        idx = np.zeros(0, dtype=np.int64)

    if idx.size:
        # global blend order: camera z ascending, cloud index breaks ties
        order = np.lexsort((idx, p_cam[:, 2]))
        idx, mean2d, cov2d = idx[order], mean2d[order], cov2d[order]
        p_cam, n_cam, opacity, colors = p_cam[order], n_cam[order], opacity[order], colors[order]

        # analytic 2x2 inverses and 3-sigma axis-aligned extents
        a, b, d = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * d - b * b
        inv_a, inv_b, inv_d = d / det, -b / det, a / det
        rx = 3.0 * np.sqrt(a)
        ry = 3.0 * np.sqrt(d)

        rays = camera.pixel_directions()
        n_tiles_x = (w + TILE - 1) // TILE
        n_tiles_y = (h + TILE - 1) // TILE
        tile_lists: list[list[int]] = [[] for _ in range(n_tiles_x * n_tiles_y)]
        x0 = np.maximum(0, np.floor((mean2d[:, 0] - rx) / TILE).astype(int))
        x1 = np.minimum(n_tiles_x - 1, np.floor((mean2d[:, 0] + rx) / TILE).astype(int))
        y0 = np.maximum(0, np.floor((mean2d[:, 1] - ry) / TILE).astype(int))
        y1 = np.minimum(n_tiles_y - 1, np.floor((mean2d[:, 1] + ry) / TILE).astype(int))
        visible = (
            (mean2d[:, 0] + rx >= 0)
            & (mean2d[:, 0] - rx < w)
            & (mean2d[:, 1] + ry >= 0)
            & (mean2d[:, 1] - ry < h)
        )
        for s in range(idx.size):
            if not visible[s]:
                continue
            for ty in range(y0[s], y1[s] + 1):
                for tx in range(x0[s], x1[s] + 1):
                    tile_lists[ty * n_tiles_x + tx].append(s)

        us, vs = _pixel_centers(w, h)
        for ty in range(n_tiles_y):
            py0, py1 = ty * TILE, min((ty + 1) * TILE, h)
            for tx in range(n_tiles_x):
                splats = tile_lists[ty * n_tiles_x + tx]
                if not splats:
                    continue
                px0, px1 = tx * TILE, min((tx + 1) * TILE, w)
                uu, vv = np.meshgrid(us[px0:px1], vs[py0:py1])
                uu, vv = uu.ravel(), vv.ravel()
                npx = uu.size
                flat = (
                    np.repeat(np.arange(py0, py1), px1 - px0) * w
                    + np.tile(np.arange(px0, px1), py1 - py0)
                )
                t_tile = np.ones(npx)
                col_tile = np.zeros((npx, 3))
                dnum_tile = np.zeros(npx)
                dden_tile = np.zeros(npx)
                nsum_tile = np.zeros((npx, 3))
                ray_tile = rays[py0:py1, px0:px1].reshape(npx, 3)

                for s in splats:
                    active = t_tile >= TRANSMITTANCE_CUTOFF
                    if not active.any():
                        break
                    du = uu - mean2d[s, 0]
                    dv = vv - mean2d[s, 1]
                    mahal = inv_a[s] * du * du + 2 * inv_b[s] * du * dv + inv_d[s] * dv * dv
                    contrib = active & (mahal <= 9.0)
                    if not contrib.any():
                        continue
                    alpha_px = np.minimum(opacity[s] * np.exp(-0.5 * mahal[contrib]), ALPHA_MAX)
                    weight = alpha_px * t_tile[contrib]

                    col_tile[contrib] += weight[:, None] * colors[s]
                    nsum_tile[contrib] += weight[:, None] * n_cam[s]

                    r_sub = ray_tile[contrib]
                    n_dot_r = r_sub @ n_cam[s]
                    graze = np.abs(n_dot_r) < GRAZE_EPS
                    d_px = np.zeros(weight.size)
                    ok = ~graze
                    if ok.any():
                        d_px[ok] = r_sub[ok, 2] * (n_cam[s] @ p_cam[s]) / n_dot_r[ok]
                        sel = np.nonzero(contrib)[0][ok]
                        dnum_tile[sel] += weight[ok] * d_px[ok]
                        dden_tile[sel] += weight[ok]

                    if update_hit_counts:
                        hit_counts[idx[s]] += int(np.count_nonzero(weight >= HIT_WEIGHT_THRESHOLD))

                    if record:
                        sel_all = np.nonzero(contrib)[0]
                        rec_px.append(flat[sel_all])
                        rec_src.append(np.full(sel_all.size, idx[s], dtype=np.int64))
                        rec_w.append(weight.copy())
                        rec_d.append(d_px)
                        rec_g.append(graze.copy())

                    t_tile[contrib] *= 1.0 - alpha_px

                sl_y, sl_x = slice(py0, py1), slice(px0, px1)
                shape2 = (py1 - py0, px1 - px0)
                transmittance[sl_y, sl_x] = t_tile.reshape(shape2)
                color[sl_y, sl_x] = col_tile.reshape(*shape2, 3)
                depth_num[sl_y, sl_x] = dnum_tile.reshape(shape2)
                depth_den[sl_y, sl_x] = dden_tile.reshape(shape2)
                normal_sum[sl_y, sl_x] = nsum_tile.reshape(*shape2, 3)

    alpha = 1.0 - transmittance
    norm_len = np.linalg.norm(normal_sum, axis=-1)
    valid = (alpha >= ALPHA_FLOOR) & (depth_den > 0) & (norm_len > 1e-12)
    depth = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    np.divide(depth_num, depth_den, out=depth, where=valid)
    np.divide(normal_sum, norm_len[..., None], out=normal, where=valid[..., None])

    buffers = RenderBuffers(
        color=color, depth=depth, normal=normal, alpha=alpha, valid=valid, hit_counts=hit_counts
    )
    if not record:
        return buffers
    if rec_px:
        record_out = RenderRecord(
            pixel=np.concatenate(rec_px),
            source=np.concatenate(rec_src),
            weight=np.concatenate(rec_w),
            depth=np.concatenate(rec_d),
            grazing=np.concatenate(rec_g),
            depth_weight_sum=depth_den,
            normal_sum=normal_sum,
        )
    else:
        record_out = RenderRecord(
            pixel=np.zeros(0, dtype=np.int64),
            source=np.zeros(0, dtype=np.int64),
            weight=np.zeros(0),
            depth=np.zeros(0),
            grazing=np.zeros(0, dtype=bool),
            depth_weight_sum=depth_den,
            normal_sum=normal_sum,
        )
    return buffers, record_out


def render_excluding(camera: Camera, cloud: GaussianCloud, excluded) -> RenderBuffers:
    """Render with the listed Gaussians removed; hit counts stay zero."""
    return render(camera, cloud, exclude=np.asarray(list(excluded), dtype=np.int64),
                  update_hit_counts=False)
