"""Scene contraction, block partitioning with duplicated boundary Gaussians,
and camera-to-block assignment by geometric containment or rendered-image
degradation.

The contraction maps world space into the open cube (-1, 1)^3: linear inside
the foreground radius (sup-norm ball), compressive outside, continuous and
injective across the seam. Blocks tile the cube on a regular grid with
right-open cells, so ownership is a partition; Gaussians whose contracted
center sits within ``delta_share`` (sup-norm point-to-box distance) of a
foreign block boundary are duplicated into that block's shared set.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Camera,
    GaussianCloud,
    load_block_cloud,
    save_block_cloud,
)
from .errors import IncompleteMergeError, InvalidParameterError, ParseError
from .losses import ssim
from .renderer import render, render_excluding
from .sagp import PruneConfig, build_voxel_grid, importance_scores, prune

log = logging.getLogger(__name__)


@dataclass
class PartitionConfig:
    grid_dims: tuple = (2, 2, 1)
    delta_share: float = 0.05  # contracted units
    epsilon_ssim: float = 0.01
    foreground_radius: float | None = None  # None: derive from the cameras

    def validate(self) -> None:
        if any(int(d) < 1 for d in self.grid_dims):
            raise InvalidParameterError("grid dims must be >= 1")
        if self.delta_share < 0:
            raise InvalidParameterError("delta_share must be non-negative")
        if not 0 < self.epsilon_ssim < 1:
            raise InvalidParameterError("epsilon_ssim must lie in (0, 1)")
        if self.foreground_radius is not None and self.foreground_radius <= 0:
            raise InvalidParameterError("foreground radius must be positive")


@dataclass
class Block:
    block_id: int
    bounds_min: np.ndarray  # (3,) contracted space
    bounds_max: np.ndarray
    owned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    shared: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cameras: list = field(default_factory=list)


def foreground_radius_from_cameras(cameras: list[Camera], quantile: float = 0.9) -> float:
    """Radius around the camera centroid enclosing the given quantile of cameras."""
    if not cameras:
        raise InvalidParameterError("no cameras to derive a foreground radius from")
    pos = np.stack([c.position for c in cameras])
    centroid = pos.mean(axis=0)
    dist = np.linalg.norm(pos - centroid, axis=1)
    r = float(np.quantile(dist, quantile))
    return max(r, 1e-6)


def contract(points: np.ndarray, foreground_radius: float) -> np.ndarray:
    """Hybrid contraction into (-1, 1)^3.

    Scaled points with sup-norm <= 1 map linearly to the half-cube; beyond
    that the radius saturates as 2 - 1/m, so the whole unbounded space lands
    strictly inside the cube, monotонically in distance.
    """
    if foreground_radius <= 0:
        raise InvalidParameterError("foreground radius must be positive")
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    y = np.atleast_2d(pts) / foreground_radius
    m = np.abs(y).max(axis=1)
    out = 0.5 * y
    far = m > 1
    if far.any():
        mf = m[far][:, None]
        out[far] = 0.5 * (2.0 - 1.0 / mf) * (y[far] / mf)
    return out[0] if single else out


def make_blocks(config: PartitionConfig) -> list[Block]:
    """Regular grid over the contracted cube; right-open cells, last slab closed."""
    config.validate()
    dims = np.asarray(config.grid_dims, dtype=int)
    size = 2.0 / dims
    blocks = []
    bid = 0
    for ix in range(dims[0]):
        for iy in range(dims[1]):
            for iz in range(dims[2]):
                lo = -1.0 + np.array([ix, iy, iz]) * size
                hi = lo + size
                blocks.append(Block(block_id=bid, bounds_min=lo, bounds_max=hi))
                bid += 1
    return blocks


def _box_distance_sup(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Sup-norm distance from points to an axis-aligned box (0 inside)."""
    below = lo - points
    above = points - hi
    per_axis = np.maximum(np.maximum(below, above), 0.0)
    return per_axis.max(axis=1)


def assign_gaussians(
    cloud: GaussianCloud,
    blocks: list[Block],
    delta_share: float,
    foreground_radius: float,
) -> list[Block]:
    """Fill each block's owned set (unique, by contracted center) and its
    shared set (centers within delta_share of the block, owned elsewhere).

    Contracted points are strictly inside the cube, so the right-open boxes
    of the block grid contain each center exactly once.
    """
    ctr = contract(cloud.positions, foreground_radius)
    owner = np.full(cloud.count, -1, dtype=np.int64)
    for block in blocks:
        inside = np.all(ctr >= block.bounds_min, axis=1) & np.all(ctr < block.bounds_max, axis=1)
        owner[inside] = block.block_id
    for block in blocks:
        block.owned = np.nonzero(owner == block.block_id)[0]
        dist = _box_distance_sup(ctr, block.bounds_min, block.bounds_max)
        block.shared = np.nonzero((dist < delta_share) & (owner != block.block_id))[0]
    return blocks


def camera_geometric(camera: Camera, block: Block, foreground_radius: float) -> bool:
    """Physical containment: the contracted camera center in the right-open box."""
    p = contract(camera.position, foreground_radius)
    return bool(np.all(p >= block.bounds_min) and np.all(p < block.bounds_max))


def camera_perceptual(
    camera: Camera,
    cloud: GaussianCloud,
    block: Block,
    epsilon: float,
    full_buffers=None,
) -> bool:
    """Rendered-image degradation: does removing the block's Gaussians drop
    SSIM below 1 - epsilon for this camera?"""
    removed = np.union1d(block.owned, block.shared)
    if removed.size == 0:
        return False
    if full_buffers is None:
        full_buffers = render(camera, cloud, update_hit_counts=False)
    if not full_buffers.valid.any():
        log.warning("camera %s sees nothing; perceptual criterion treated as no dependence",
                    camera.cam_id)
        return False
    excl = render_excluding(camera, cloud, removed)
    return ssim(full_buffers.color, excl.color) < 1.0 - epsilon


def assign_views(
    cameras: list[Camera],
    blocks: list[Block],
    cloud: GaussianCloud,
    config: PartitionConfig,
    use_perceptual: bool = True,
) -> list[Block]:
    """Attach every camera to each block satisfying containment or degradation.

    The geometric home is unique per camera, so every camera lands somewhere.
    """
    config.validate()
    radius = config.foreground_radius or foreground_radius_from_cameras(cameras)
    for camera in cameras:
        full = render(camera, cloud, update_hit_counts=False) if use_perceptual else None
        for block in blocks:
            geo = camera_geometric(camera, block, radius)
            vis = (
                camera_perceptual(camera, cloud, block, config.epsilon_ssim, full_buffers=full)
                if use_perceptual
                else False
            )
            if geo or vis:
                block.cameras.append(camera.cam_id)
    return blocks


def global_prune_then_partition(
    cloud: GaussianCloud,
    hit_counts: np.ndarray,
    prune_cfg: PruneConfig,
    part_cfg: PartitionConfig,
    cameras: list[Camera] | None = None,
    use_perceptual: bool = True,
):
    """Threshold-prune by importance score, then contract, block, and assign.

    The threshold is the score at the configured prune ratio's cut, so
    threshold pruning reproduces the ratio's kept set. Returns the pruned
    cloud, the provenance of its Gaussians in the input cloud, and the
    filled block list.
    """
    part_cfg.validate()
    prune_cfg.validate()
    if prune_cfg.prune_ratio > 0:
        grid = build_voxel_grid(cloud, prune_cfg)
        scores = importance_scores(cloud, grid, hit_counts).score
        k = int(np.floor(prune_cfg.prune_ratio * cloud.count))
        if k == 0:
            result = prune(cloud, scores, threshold=-np.inf)
        else:
            order = np.lexsort((-np.arange(cloud.count), scores))
            theta = scores[order[k - 1]]
            result = prune(cloud, scores, threshold=theta)
        pruned, provenance = result.cloud, result.kept
    else:
        pruned, provenance = cloud, np.arange(cloud.count)

    radius = part_cfg.foreground_radius
    if radius is None:
        if not cameras:
            raise InvalidParameterError("need cameras or an explicit foreground radius")
        radius = foreground_radius_from_cameras(cameras)
    blocks = make_blocks(part_cfg)
    assign_gaussians(pruned, blocks, part_cfg.delta_share, radius)
    if cameras:
        cfg = PartitionConfig(
            grid_dims=part_cfg.grid_dims,
            delta_share=part_cfg.delta_share,
            epsilon_ssim=part_cfg.epsilon_ssim,
            foreground_radius=radius,
        )
        assign_views(cameras, blocks, pruned, cfg, use_perceptual=use_perceptual)
    return pruned, provenance, blocks, radius


def merge_blocks(block_payloads: list[tuple[Block, GaussianCloud, np.ndarray]],
                 total_count: int | None = None) -> GaussianCloud:
    """Merge refined block clouds back into one cloud, ordered by provenance.

    Each payload carries (block, sub-cloud, provenance indices) where the
    sub-cloud rows are the block's owned Gaussians followed by its shared
    ones. For duplicated Gaussians the owning block's copy wins.
    """
    collected: dict[int, tuple] = {}
    seen = set()
    for block, sub, provenance in block_payloads:
        provenance = np.asarray(provenance, dtype=np.int64)
        if sub.count != provenance.size:
            raise InvalidParameterError("provenance length differs from the sub-cloud")
        for row, prov in enumerate(provenance):
            prov = int(prov)
            seen.add(prov)
            is_owner = row < block.owned.size  # rows are owned first, shared after
            if prov not in collected or (is_owner and not collected[prov][3]):
                collected[prov] = (block, sub, row, is_owner)
    if total_count is None:
        total_count = (max(seen) + 1) if seen else 0
    missing = sorted(set(range(total_count)) - seen)
    if missing:
        raise IncompleteMergeError(f"merge missing provenance indices: {missing}")

    order = sorted(collected)
    rows = [(collected[p][1], collected[p][2]) for p in order]
    return GaussianCloud(
        positions=np.array([c.positions[r] for c, r in rows]).reshape(-1, 3),
        rotations=np.array([c.rotations[r] for c, r in rows]).reshape(-1, 4),
        log_scales=np.array([c.log_scales[r] for c, r in rows]).reshape(-1, 3),
        opacity_logits=np.array([c.opacity_logits[r] for c, r in rows]).reshape(-1),
        colors=np.array([c.colors[r] for c, r in rows]).reshape(-1, 3),
    )


# ---------------------------------------------------------------------------
# Block manifest + sub-cloud files
# ---------------------------------------------------------------------------


def write_partition(
    out_dir,
    pruned: GaussianCloud,
    provenance: np.ndarray,
    blocks: list[Block],
    radius: float,
    config: PartitionConfig,
    seed: int | None = None,
) -> str:
    """Emit one PLY per block (owned then shared rows, with provenance) plus
    a text manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "blocks.manifest")
    with open(manifest, "w") as fh:
        fh.write("# block manifest\n")
        if seed is not None:
            fh.write(f"seed={seed}\n")
        fh.write(f"grid_dims={','.join(str(int(d)) for d in config.grid_dims)}\n")
        fh.write(f"delta_share={config.delta_share!r}\n")
        fh.write(f"epsilon_ssim={config.epsilon_ssim!r}\n")
        fh.write(f"foreground_radius={radius!r}\n")
        fh.write(f"total_count={pruned.count}\n")
        for block in blocks:
            local = np.concatenate([block.owned, block.shared]).astype(np.int64)
            fname = f"block_{block.block_id:03d}.ply"
            sub = pruned.subset(local) if local.size else GaussianCloud.empty()
            save_block_cloud(os.path.join(out_dir, fname),
                             sub, provenance[local] if local.size else np.zeros(0))
            lo = ",".join(repr(float(v)) for v in block.bounds_min)
            hi = ",".join(repr(float(v)) for v in block.bounds_max)
            cams = ",".join(block.cameras) if block.cameras else "-"
            fh.write(
                f"block id={block.block_id} file={fname} bounds_min={lo} bounds_max={hi} "
                f"owned={block.owned.size} shared={block.shared.size} cameras={cams}\n"
            )
    return manifest


def read_partition(manifest_path):
    """Load a manifest written by :func:`write_partition`.

    Returns (blocks, payloads, total_count) where payloads feed
    :func:`merge_blocks` directly.
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    blocks = []
    payloads = []
    total_count = None
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("total_count="):
                total_count = int(line.split("=", 1)[1])
                continue
            if not line.startswith("block "):
                continue
            fields = dict(part.split("=", 1) for part in line[len("block "):].split(" "))
            try:
                bid = int(fields["id"])
                lo = np.array([float(v) for v in fields["bounds_min"].split(",")])
                hi = np.array([float(v) for v in fields["bounds_max"].split(",")])
                n_owned = int(fields["owned"])
                n_shared = int(fields["shared"])
                fname = fields["file"]
            except (KeyError, ValueError) as exc:
                raise ParseError(f"{manifest_path}:{lineno}: {exc}") from exc
            cams = [] if fields.get("cameras", "-") == "-" else fields["cameras"].split(",")
            sub, provenance = load_block_cloud(os.path.join(base, fname))
            if sub.count != n_owned + n_shared:
                raise ParseError(
                    f"{manifest_path}:{lineno}: block file row count {sub.count} "
                    f"!= owned+shared {n_owned + n_shared}"
                )
            block = Block(
                block_id=bid,
                bounds_min=lo,
                bounds_max=hi,
                owned=np.arange(n_owned),
                shared=np.arange(n_owned, n_owned + n_shared),
                cameras=cams,
            )
            blocks.append(block)
            payloads.append((block, sub, provenance))
    if total_count is None:
        raise ParseError(f"{manifest_path}: missing total_count")
    return blocks, payloads, total_count
