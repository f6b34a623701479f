"""Spatially adaptive Gaussian pruning.

Gaussians are binned into cubic cells whose edge scales with overall scene
density; each Gaussian is scored by the product of its cell-normalized ray
hit rate, its sigmoid opacity, and a sub-linear volume weight against the
cell's percentile volume. Pruning removes the lowest-scoring fraction (or
everything at or below an explicit score threshold) on a fixed schedule.

The linear-combination baseline scoring lives here too for comparisons.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import GaussianCloud
from .errors import InvalidParameterError, ParseError

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (7.0 / 30.0, 15.0 / 30.0, 25.0 / 30.0)


@dataclass
class PruneConfig:
    lambda_cell: float = 1.2  # slight cell enlargement stabilizes local stats
    percentile_t: float = 90.0
    kappa: float = 0.5
    prune_ratio: float = 0.30
    schedule_fractions: tuple = DEFAULT_SCHEDULE

    def validate(self) -> None:
        if not 0 < self.percentile_t <= 100:
            raise InvalidParameterError("percentile must lie in (0, 100]")
        if self.kappa <= 0:
            raise InvalidParameterError("kappa must be positive")
        if not 0 <= self.prune_ratio < 1:
            raise InvalidParameterError("prune ratio must lie in [0, 1)")
        fr = tuple(self.schedule_fractions)
        if any(not 0 < f < 1 for f in fr) or any(a >= b for a, b in zip(fr, fr[1:])):
            raise InvalidParameterError("schedule fractions must be strictly increasing in (0, 1)")


@dataclass
class VoxelGrid:
    cell_length: float
    origin: np.ndarray  # (3,) scene bbox min
    dims: np.ndarray  # (3,) ints
    cell_of: np.ndarray  # (N,) flat cell id per Gaussian
    members: dict  # flat cell id -> index array
    percentile_volume: dict  # flat cell id -> scalar > 0


@dataclass
class ScoreSet:
    phi: np.ndarray
    tau_op: np.ndarray
    w_v: np.ndarray
    score: np.ndarray


def cell_length(bbox_volume: float, n_gaussians: int, lambda_cell: float = 1.2) -> float:
    """Characteristic cell edge: lambda * (volume / count)^(1/3)."""
    if bbox_volume <= 0 or n_gaussians < 1:
        raise InvalidParameterError("need positive volume and at least one Gaussian")
    return float(lambda_cell * (bbox_volume / n_gaussians) ** (1.0 / 3.0))


def gaussian_volumes(cloud: GaussianCloud) -> np.ndarray:
    """Axis-length product per Gaussian; the ellipsoid constant cancels in ratios."""
    return np.prod(cloud.scales, axis=1)


def build_voxel_grid(cloud: GaussianCloud, config: PruneConfig) -> VoxelGrid:
    """Bin Gaussians into cells and record each cell's percentile volume.

    Cells are right-open along every axis, so a Gaussian exactly on an
    interior boundary lands in the higher-index cell; the bbox's top face is
    closed so nothing escapes the grid.
    """
    config.validate()
    if cloud.count < 1:
        raise InvalidParameterError("cannot grid an empty cloud")
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    extent = hi - lo
    degenerate = extent <= 0
    if degenerate.any():
        log.warning("degenerate bbox extent on %d axes; padding by 1e-6", degenerate.sum())
        extent = np.where(degenerate, 1e-6, extent)
    volume = float(np.prod(extent))
    ell = cell_length(volume, cloud.count, config.lambda_cell)
    dims = np.maximum(1, np.ceil(extent / ell).astype(int))
    idx3 = np.floor((cloud.positions - lo) / ell).astype(int)
    idx3 = np.minimum(idx3, dims - 1)
    idx3 = np.maximum(idx3, 0)
    flat = (idx3[:, 0] * dims[1] + idx3[:, 1]) * dims[2] + idx3[:, 2]

    vols = gaussian_volumes(cloud)
    members: dict = {}
    percentile: dict = {}
    for cell in np.unique(flat):
        sel = np.nonzero(flat == cell)[0]
        members[int(cell)] = sel
        percentile[int(cell)] = float(np.percentile(vols[sel], config.percentile_t))
    return VoxelGrid(
        cell_length=ell,
        origin=lo,
        dims=dims,
        cell_of=flat,
        members=members,
        percentile_volume=percentile,
    )


def volume_weight(v, theta_local: float, kappa: float = 0.5):
    """Sub-linear volume weight (min(v / theta, 1))^kappa, in (0, 1]."""
    if theta_local <= 0:
        raise InvalidParameterError("cell percentile volume must be positive")
    return np.minimum(np.asarray(v, dtype=np.float64) / theta_local, 1.0) ** kappa


def importance_scores(cloud: GaussianCloud, grid: VoxelGrid, hit_counts: np.ndarray) -> ScoreSet:
    """Score = cell-normalized hit rate * sigmoid opacity * volume weight."""
    hits = np.asarray(hit_counts, dtype=np.float64).reshape(-1)
    if hits.size != cloud.count:
        raise InvalidParameterError("hit counts length differs from the cloud")
    phi = np.zeros(cloud.count)
    w_v = np.zeros(cloud.count)
    vols = gaussian_volumes(cloud)
    for cell, sel in grid.members.items():
        cell_max = hits[sel].max()
        if cell_max > 0:
            phi[sel] = hits[sel] / cell_max
        w_v[sel] = volume_weight(vols[sel], grid.percentile_volume[cell])
    tau_op = 1.0 / (1.0 + np.exp(-cloud.opacity_logits))
    return ScoreSet(phi=phi, tau_op=tau_op, w_v=w_v, score=phi * tau_op * w_v)


def lwp_scores(phi, tau_op, w_v, alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Linear-combination baseline score alpha*phi + beta*tau + gamma*w_v."""
    if min(alpha, beta, gamma) < 0:
        raise InvalidParameterError("baseline weights must be non-negative")
    return alpha * np.asarray(phi) + beta * np.asarray(tau_op) + gamma * np.asarray(w_v)


@dataclass
class PruneResult:
    cloud: GaussianCloud
    kept: np.ndarray  # new index -> old index, ascending
    old_to_new: np.ndarray  # old index -> new index, -1 where removed
    refused_empty: bool = False


def prune(
    cloud: GaussianCloud,
    scores: np.ndarray,
    prune_ratio: float | None = None,
    threshold: float | None = None,
) -> PruneResult:
    """Drop low-score Gaussians, by fraction or by strict score threshold.

    Ratio mode removes the floor(ratio * N) lowest scores, breaking ties so
    the lower index survives. Threshold mode keeps scores strictly above the
    threshold. A request that would empty the cloud is refused: the single
    best Gaussian survives and the result is flagged.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size != cloud.count:
        raise InvalidParameterError("scores length differs from the cloud")
    if (prune_ratio is None) == (threshold is None):
        raise InvalidParameterError("give exactly one of prune_ratio or threshold")
    n = cloud.count
    refused = False
    if prune_ratio is not None:
        if not 0 <= prune_ratio <= 1:
            raise InvalidParameterError("prune ratio must lie in [0, 1]")
        k = int(np.floor(prune_ratio * n))
        if k >= n:
            refused = True
            k = n - 1
        # ascending score; among ties the higher index is removed first
        order = np.lexsort((-np.arange(n), scores))
        removed = order[:k]
        keep_mask = np.ones(n, dtype=bool)
        keep_mask[removed] = False
    else:
        keep_mask = scores > threshold
        if not keep_mask.any():
            refused = True
            best = int(np.argmax(scores))
            keep_mask[best] = True
    if refused:
        log.warning("prune request would empty the cloud; keeping the top-scoring Gaussian")
    kept = np.nonzero(keep_mask)[0]
    old_to_new = np.full(n, -1, dtype=np.int64)
    old_to_new[kept] = np.arange(kept.size)
    return PruneResult(cloud=cloud.subset(kept), kept=kept, old_to_new=old_to_new,
                       refused_empty=refused)


def schedule_should_prune(iteration: int, total_iterations: int, fractions=DEFAULT_SCHEDULE) -> bool:
    """True exactly at the iterations hit by rounding each schedule fraction."""
    if not 0 <= iteration <= total_iterations:
        raise InvalidParameterError("iteration outside the training range")
    targets = {int(np.rint(f * total_iterations)) for f in fractions}
    return iteration in targets


# ---------------------------------------------------------------------------
# Hit-count sidecar: u64 count header then little-endian u32 payload
# ---------------------------------------------------------------------------


def save_hit_counts(path, hit_counts: np.ndarray) -> None:
    hits = np.asarray(hit_counts)
    if hits.size and hits.min() < 0:
        raise InvalidParameterError("hit counts must be non-negative")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", hits.size))
        fh.write(hits.astype("<u4").tobytes())


def load_hit_counts(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ParseError(f"{path}: truncated count header")
        (count,) = struct.unpack("<Q", head)
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ParseError(f"{path}: truncated hit-count payload")
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)
