"""Pseudo-depth / pseudo-normal ingestion: the UGSR raster file format,
robust scale/shift alignment of monocular depth to sparse metric anchors,
and exact ray-cast priors for the analytic test scenes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, PriorSet
from .errors import (
    DegenerateFitError,
    EmptyPriorError,
    InvalidParameterError,
    ParseError,
    RankDeficiencyError,
)

UGSR_MAGIC = b"UGSR"
UGSR_HEADER = struct.Struct("<4sIIII12x")  # magic, W, H, C, mask flag, 12 reserved bytes
assert UGSR_HEADER.size == 32


@dataclass
class RasterMap:
    """Float32 raster with an optional per-pixel validity mask.

    ``data`` is (H, W) for single-channel maps and (H, W, C) otherwise.
    NaNs are only allowed on masked-out pixels.
    """

    data: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim == 2:
            self.data = self.data[..., np.newaxis]
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != self.data.shape[:2]:
            raise InvalidParameterError("mask resolution differs from the data")
        bad = ~np.isfinite(self.data) & self.valid_mask[..., None]
        if np.any(bad):
            raise InvalidParameterError("non-finite values on valid pixels")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self) -> np.ndarray:
        """Single-channel view, (H, W)."""
        if self.channels != 1:
            raise InvalidParameterError("raster has more than one channel")
        return self.data[..., 0]


def save_raster(path, raster: RasterMap) -> None:
    """Write the 32-byte UGSR header, float32 payload, then packed mask bits."""
    with open(path, "wb") as fh:
        fh.write(
            UGSR_HEADER.pack(UGSR_MAGIC, raster.width, raster.height, raster.channels, 1)
        )
        fh.write(raster.data.astype("<f4").tobytes())
        fh.write(np.packbits(raster.valid_mask.ravel()).tobytes())


def load_raster(path) -> RasterMap:
    with open(path, "rb") as fh:
        head = fh.read(UGSR_HEADER.size)
        if len(head) < UGSR_HEADER.size:
            raise ParseError(f"{path}: truncated header")
        magic, width, height, channels, has_mask = UGSR_HEADER.unpack(head)
        if magic != UGSR_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}")
        if channels not in (1, 3):
            raise ParseError(f"{path}: unsupported channel count {channels}")
        count = width * height * channels
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ParseError(f"{path}: truncated payload")
        data = np.frombuffer(payload, dtype="<f4").reshape(height, width, channels)
        if has_mask:
            nbits = width * height
            packed = fh.read((nbits + 7) // 8)
            if len(packed) != (nbits + 7) // 8:
                raise ParseError(f"{path}: truncated mask")
            mask = np.unpackbits(np.frombuffer(packed, dtype=np.uint8), count=nbits)
            mask = mask.astype(bool).reshape(height, width)
        else:
            mask = np.ones((height, width), dtype=bool)
    return RasterMap(data=data.copy(), valid_mask=mask)


def save_anchors(path, anchors: np.ndarray) -> None:
    """Anchors as text lines ``u v depth``."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        for u, v, d in anchors:
            fh.write(f"{int(u)} {int(v)} {repr(float(d))}\n")


def load_anchors(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 'u v depth'")
            try:
                rows.append((float(parts[0]), float(parts[1]), float(parts[2])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Scale / shift alignment
# ---------------------------------------------------------------------------


@dataclass
class AlignmentFit:
    scale: float
    shift: float
    inlier_count: int
    residual_mad: float


def fit_scale_shift(mono_depths, anchor_depths) -> AlignmentFit:
    """Robust affine fit ``scale * mono + shift ~= anchor``.

    Ordinary least squares with three trimming rounds: after each fit,
    samples whose residual deviates from the residual median by more than
    3x the median absolute deviation are dropped and the fit repeats.
    """
    x = np.asarray(mono_depths, dtype=np.float64).ravel()
    y = np.asarray(anchor_depths, dtype=np.float64).ravel()
    if x.size != y.size:
        raise InvalidParameterError("paired samples required")
    if x.size < 2:
        raise DegenerateFitError("need at least two paired samples")
    if np.any(y <= 0):
        raise InvalidParameterError("anchor depths must be positive")
    mask = np.ones(x.size, dtype=bool)
    # absolute floor keeps exact fits (MAD == 0) from trimming everything
    mad_floor = 1e-9 * max(1.0, float(np.median(np.abs(y))))

    def solve(m):
        xs = x[m]
        if np.ptp(xs) == 0:
            raise RankDeficiencyError("all monocular depths equal; scale unidentifiable")
        a = np.column_stack([xs, np.ones(xs.size)])
        coef, *_ = np.linalg.lstsq(a, y[m], rcond=None)
        return float(coef[0]), float(coef[1])

    scale, shift = solve(mask)
    mad = 0.0
    for _ in range(3):
        resid = scale * x[mask] + shift - y[mask]
        med = np.median(resid)
        mad = float(np.median(np.abs(resid - med)))
        keep_local = np.abs(resid - med) <= max(3.0 * mad, mad_floor)
        new_mask = mask.copy()
        new_mask[np.nonzero(mask)[0][~keep_local]] = False
        if new_mask.sum() < 2:
            raise DegenerateFitError("fewer than two inliers after trimming")
        if new_mask.sum() == mask.sum():
            mask = new_mask
            break
        mask = new_mask
        scale, shift = solve(mask)
    resid = scale * x[mask] + shift - y[mask]
    med = np.median(resid)
    mad = float(np.median(np.abs(resid - med)))
    return AlignmentFit(scale=scale, shift=shift, inlier_count=int(mask.sum()), residual_mad=mad)


def apply_alignment(raster: RasterMap, fit: AlignmentFit) -> RasterMap:
    """Affine-map a single-channel depth raster; non-positive results are masked."""
    depth = raster.plane().astype(np.float64)
    out = fit.scale * depth + fit.shift
    mask = raster.valid_mask & (out > 0)
    return RasterMap(data=out.astype(np.float32), valid_mask=mask)


# ---------------------------------------------------------------------------
# Analytic scenes for synthetic priors
# ---------------------------------------------------------------------------


@dataclass
class AnalyticScene:
    """Closed-form geometry: 'plane', 'box', or 'wedge'.

    plane: params {point, normal}; box: {bounds_min, bounds_max};
    wedge: {points: (2, 3), normals: (2, 3)} -- the nearer plane wins per ray.
    """

    kind: str
    params: dict
    seed: int = 0
    anchor_count: int = 200


def _ray_plane_depths(camera: Camera, point_w, normal_w):
    """Per-pixel z-depth of the ray/plane hit; NaN where missed."""
    dirs_cam = camera.pixel_directions()
    dirs_w = dirs_cam @ camera.rotation  # R^T applied to row vectors
    origin = camera.position
    n = np.asarray(normal_w, dtype=np.float64)
    n = n / np.linalg.norm(n)
    denom = dirs_w @ n
    num = np.dot(np.asarray(point_w, dtype=np.float64) - origin, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    depth = t * dirs_cam[..., 2]
    hit = (np.abs(denom) > 1e-12) & (t > 0)
    depth = np.where(hit, depth, np.nan)
    return depth, hit


def _camera_facing(camera: Camera, normal_w) -> np.ndarray:
    n_cam = camera.rotation @ (np.asarray(normal_w) / np.linalg.norm(normal_w))
    if n_cam[2] > 0:
        n_cam = -n_cam
    return n_cam


def synth_priors(camera: Camera, scene: AnalyticScene) -> PriorSet:
    """Exact depth/normal maps for an analytic scene plus seeded sparse anchors."""
    h, w = camera.height, camera.width
    if scene.kind == "plane":
        depth, hit = _ray_plane_depths(camera, scene.params["point"], scene.params["normal"])
        normal = np.broadcast_to(_camera_facing(camera, scene.params["normal"]), (h, w, 3)).copy()
        valid = hit
    elif scene.kind == "wedge":
        points = np.asarray(scene.params["points"], dtype=np.float64)
        normals = np.asarray(scene.params["normals"], dtype=np.float64)
        depth = np.full((h, w), np.inf)
        normal = np.zeros((h, w, 3))
        valid = np.zeros((h, w), dtype=bool)
        for p, n in zip(points, normals):
            d, hit = _ray_plane_depths(camera, p, n)
            closer = hit & (np.where(np.isnan(d), np.inf, d) < depth)
            depth = np.where(closer, d, depth)
            normal[closer] = _camera_facing(camera, n)
            valid |= closer
        depth = np.where(valid, depth, np.nan)
    elif scene.kind == "box":
        bmin = np.asarray(scene.params["bounds_min"], dtype=np.float64)
        bmax = np.asarray(scene.params["bounds_max"], dtype=np.float64)
        dirs_cam = camera.pixel_directions()
        dirs_w = dirs_cam @ camera.rotation
        origin = camera.position
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (bmin - origin) / dirs_w
            t2 = (bmax - origin) / dirs_w
        t_lo = np.minimum(t1, t2)
        t_hi = np.maximum(t1, t2)
        t_near = np.nanmax(t_lo, axis=-1)
        t_far = np.nanmin(t_hi, axis=-1)
        valid = (t_near > 0) & (t_near <= t_far)
        depth = np.where(valid, t_near * dirs_cam[..., 2], np.nan)
        # entry face = axis achieving t_near; outward normal opposes the ray
        axis = np.argmax(np.where(np.isfinite(t_lo), t_lo, -np.inf), axis=-1)
        normal = np.zeros((h, w, 3))
        for k in range(3):
            n_w = np.zeros(3)
            n_w[k] = 1.0
            n_cam = camera.rotation @ n_w
            sel = valid & (axis == k)
            sign = np.where((dirs_w[..., k] > 0)[sel], -1.0, 1.0)
            normal[sel] = sign[:, None] * n_cam
        # enforce the camera-facing convention pixelwise
        flip = valid & (np.einsum("hwc,hwc->hw", normal, dirs_cam) > 0)
        normal[flip] *= -1
    else:
        raise InvalidParameterError(f"unknown analytic scene kind {scene.kind!r}")

    if not valid.any():
        raise EmptyPriorError(f"camera {camera.cam_id} sees no geometry")

    depth_clean = np.where(valid, depth, 0.0)
    rng = np.random.default_rng(scene.seed)
    flat_valid = np.flatnonzero(valid)
    k = min(scene.anchor_count, flat_valid.size)
    chosen = np.sort(rng.choice(flat_valid, size=k, replace=False))
    vs, us = np.unravel_index(chosen, (h, w))
    anchors = np.column_stack([us.astype(np.float64), vs.astype(np.float64), depth_clean[vs, us]])

    return PriorSet(
        pseudo_depth=depth_clean,
        pseudo_normal=normal,
        anchors=anchors,
        valid_mask=valid,
    )
