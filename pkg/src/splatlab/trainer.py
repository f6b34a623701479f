"""Gradient-descent training loop over synthetic scene bundles.

The loop ties the renderer, the loss stack, and the pruning schedule
together. Two gradient modes exist:

* ``fd`` probes every enabled parameter with central differences; exact but
  only affordable on tiny fixtures.
* ``hybrid`` (default) freezes the compositing weights of the current render
  and pushes analytic gradients through the intersection-depth chain: depth
  losses reach positions and normals via d(depth)/d(center) and
  d(depth)/d(normal), the rendered-normal loss reaches normals through the
  weighted normal average, color gets the L1 photometric adjoint, and
  log-scales get the flattening-regularizer gradient. Opacity has no
  analytic path under frozen weights and falls back to finite differences
  when its learning rate is nonzero.

The hybrid approximation is validated against pure finite differences on
one-Gaussian fixtures in the test suite.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    Camera,
    GaussianCloud,
    PriorSet,
    cloud_normals,
    load_cameras,
    load_cloud,
    perturb_quaternion,
    save_cameras,
    save_cloud,
    scale_loss,
)
from .errors import InvalidParameterError, NumericError, ParseError
from .losses import (
    LossReport,
    LossWeights,
    _central_stencil_valid,
    dnormal_loss_depth_adjoint,
    finite_diff_grad,
    normal_loss_adjoint,
    normalize_adjoint,
    psnr,
    total_loss,
)
from .priors import AnalyticScene, RasterMap, load_anchors, load_raster, save_anchors, save_raster, synth_priors
from .renderer import render
from .sagp import PruneConfig, build_voxel_grid, importance_scores, prune, schedule_should_prune

log = logging.getLogger(__name__)

PARAM_GROUPS = ("position", "rotation", "log_scales", "opacity", "color")


@dataclass
class TrainConfig:
    iterations: int = 100
    lr_position: float = 2.0
    lr_rotation: float = 0.5
    lr_log_scales: float = 0.0
    lr_opacity: float = 0.0
    lr_color: float = 0.0
    scale_loss_weight: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    prune: PruneConfig | None = None
    seed: int = 0
    grad_mode: str = "hybrid"  # or "fd"
    fd_step: float = 1e-4

    def validate(self) -> None:
        if self.iterations < 1:
            raise InvalidParameterError("need at least one iteration")
        rates = (self.lr_position, self.lr_rotation, self.lr_log_scales,
                 self.lr_opacity, self.lr_color)
        if any(r < 0 for r in rates) or self.scale_loss_weight < 0:
            raise InvalidParameterError("learning rates must be non-negative")
        if self.grad_mode not in ("hybrid", "fd"):
            raise InvalidParameterError(f"unknown gradient mode {self.grad_mode!r}")
        self.weights.validate()
        if self.prune is not None:
            self.prune.validate()


@dataclass
class TrainRecord:
    iterations: np.ndarray
    total: np.ndarray
    rgb: np.ndarray
    n: np.ndarray
    dn: np.ndarray
    idw: np.ndarray
    count: np.ndarray
    psnr: np.ndarray
    rms: np.ndarray

    CSV_HEADER = "iter,total,rgb,n,dn,idw,count,psnr,rms"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for i in range(self.iterations.size):
            lines.append(
                f"{int(self.iterations[i])},{self.total[i]!r},{self.rgb[i]!r},"
                f"{self.n[i]!r},{self.dn[i]!r},{self.idw[i]!r},"
                f"{int(self.count[i])},{self.psnr[i]!r},{self.rms[i]!r}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class SceneBundle:
    kind: str
    gt_cloud: GaussianCloud
    init_cloud: GaussianCloud
    cameras: list
    priors: dict  # cam_id -> PriorSet
    references: dict  # cam_id -> (H, W, 3)
    manifest: dict


def rms_point_to_plane(cloud: GaussianCloud, point, normal) -> float:
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    d = (cloud.positions - np.asarray(point, dtype=np.float64)) @ n
    return float(np.sqrt(np.mean(d**2))) if cloud.count else 0.0


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


def _plane_cloud(rng, point, extent: float, n_gaussians: int, spacing_scale: float = 1.3,
                 min_scale: float = 1e-3, opacity_logit: float = 3.0) -> GaussianCloud:
    """Jittered grid of flattened Gaussians covering a z = const plane patch."""
    g = int(np.ceil(np.sqrt(n_gaussians)))
    cell = 2.0 * extent / g
    centers = []
    for iy in range(g):
        for ix in range(g):
            centers.append(
                [
                    -extent + (ix + 0.5) * cell,
                    -extent + (iy + 0.5) * cell,
                    0.0,
                ]
            )
    centers = np.array(centers[:n_gaussians])
    centers[:, :2] += rng.uniform(-0.25, 0.25, size=(n_gaussians, 2)) * cell
    centers += np.asarray(point)
    s_plane = spacing_scale * cell
    log_scales = np.tile(np.log([s_plane, s_plane, min_scale]), (n_gaussians, 1))
    colors = 0.5 + 0.35 * np.sin(centers[:, :3] * np.array([2.1, 1.7, 0.9]) + rng.uniform(0, 2, 3))
    return GaussianCloud(
        positions=centers,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n_gaussians, 1)),
        log_scales=log_scales,
        opacity_logits=np.full(n_gaussians, opacity_logit),
        colors=np.clip(colors, 0.0, 1.0),
    )


def _look_at_rotation(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-to-camera rotation with +z toward the target, image y downward."""
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up_hint = np.array([0.0, 1.0, 0.0])
    if abs(forward @ up_hint) > 0.999:
        up_hint = np.array([1.0, 0.0, 0.0])
    right = np.cross(up_hint, forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def _default_cameras(n_cameras: int, image: int, focal: float,
                     ring_radius: float = 0.0, target_z: float = 5.0) -> list:
    """Either axis-offset cameras looking down +z, or a ring converging on
    the fixture center; the ring gives real parallax for de-occlusion."""
    cams = []
    if ring_radius > 0:
        target = np.array([0.0, 0.0, target_z])
        for i in range(n_cameras):
            theta = 2.0 * np.pi * i / n_cameras
            pos = np.array([ring_radius * np.cos(theta), ring_radius * np.sin(theta), 0.0])
            rot = _look_at_rotation(pos, target)
            cams.append(
                Camera(
                    fx=focal, fy=focal, cx=image / 2, cy=image / 2,
                    width=image, height=image,
                    rotation=rot, translation=-rot @ pos, cam_id=f"cam{i}",
                )
            )
        return cams
    offsets = [(0.0, 0.0), (0.35, 0.0), (0.0, 0.35), (-0.35, 0.0), (0.0, -0.35)]
    for i in range(n_cameras):
        dx, dy = offsets[i % len(offsets)]
        pos = np.array([dx, dy, 0.0])
        cams.append(
            Camera(
                fx=focal, fy=focal, cx=image / 2, cy=image / 2,
                width=image, height=image,
                rotation=np.eye(3), translation=-pos, cam_id=f"cam{i}",
            )
        )
    return cams


def synth_scene(kind: str, params: dict | None = None, seed: int = 0) -> SceneBundle:
    """Deterministic scene bundle: ground-truth cloud, cameras, exact priors,
    reference renders, and a noise-perturbed initial cloud."""
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    image = int(params.get("image", 64))
    focal = float(params.get("focal", image))
    n_cameras = int(params.get("n_cameras", 3))
    sigma = float(params.get("sigma", 0.1))
    ring = float(params.get("camera_ring_radius", 0.0))
    target_z = float(params.get("z0", 5.0))
    cameras = _default_cameras(n_cameras, image, focal, ring_radius=ring, target_z=target_z)
    manifest: dict = {"kind": kind, "seed": seed, "sigma": sigma}

    if kind == "plane":
        z0 = float(params.get("z0", 5.0))
        extent = float(params.get("extent", 3.2))
        n_gaussians = int(params.get("n_gaussians", 200))
        point = np.array([0.0, 0.0, z0])
        normal = np.array([0.0, 0.0, 1.0])
        gt = _plane_cloud(
            rng, point, extent, n_gaussians,
            spacing_scale=float(params.get("spacing_scale", 1.3)),
            opacity_logit=float(params.get("opacity_logit", 3.0)),
        )
        scene = AnalyticScene(kind="plane", params={"point": point, "normal": normal}, seed=seed)
        manifest.update(plane_point=point.tolist(), plane_normal=normal.tolist())
    elif kind == "wedge":
        z0 = float(params.get("z0", 5.0))
        ang = np.deg2rad(float(params.get("angle_deg", 25.0)))
        extent = float(params.get("extent", 3.2))
        n_gaussians = int(params.get("n_gaussians", 200))
        na = np.array([np.sin(ang), 0.0, np.cos(ang)])
        nb = np.array([-np.sin(ang), 0.0, np.cos(ang)])
        point = np.array([0.0, 0.0, z0])
        half = n_gaussians // 2
        clouds = []
        for n_w, side, count in ((na, -1.0, half), (nb, 1.0, n_gaussians - half)):
            part = _plane_cloud(rng, np.zeros(3), extent / 2, count)
            # rotate the patch into the wedge face and place it on that side
            axis = np.cross(np.array([0.0, 0.0, 1.0]), n_w)
            angle = np.arcsin(np.clip(np.linalg.norm(axis), -1, 1))
            if np.linalg.norm(axis) > 1e-12:
                from .core import quaternion_from_rotvec, quaternion_to_matrix

                q = quaternion_from_rotvec(axis / np.linalg.norm(axis) * angle)
                rotm = quaternion_to_matrix(q)
                part.positions = part.positions @ rotm.T
                part.rotations = np.tile(q, (part.count, 1))
            part.positions[:, 0] += side * extent / 3
            part.positions += point
            clouds.append(part)
        gt = GaussianCloud(
            positions=np.vstack([c.positions for c in clouds]),
            rotations=np.vstack([c.rotations for c in clouds]),
            log_scales=np.vstack([c.log_scales for c in clouds]),
            opacity_logits=np.concatenate([c.opacity_logits for c in clouds]),
            colors=np.vstack([c.colors for c in clouds]),
        )
        scene = AnalyticScene(
            kind="wedge",
            params={"points": np.tile(point, (2, 1)), "normals": np.stack([na, nb])},
            seed=seed,
        )
        manifest.update(plane_point=point.tolist(), plane_normal=na.tolist())
    elif kind == "box":
        z0 = float(params.get("z0", 6.0))
        half = float(params.get("half_extent", 1.5))
        n_gaussians = int(params.get("n_gaussians", 150))
        point = np.array([0.0, 0.0, z0])
        front = _plane_cloud(rng, [0.0, 0.0, z0 - half], half, n_gaussians)
        gt = front
        scene = AnalyticScene(
            kind="box",
            params={
                "bounds_min": (point - half).tolist(),
                "bounds_max": (point + half).tolist(),
            },
            seed=seed,
        )
        manifest.update(box_min=(point - half).tolist(), box_max=(point + half).tolist())
    elif kind == "redundant-city":
        z0 = float(params.get("z0", 6.0))
        extent = float(params.get("extent", 3.6))
        n_fg = int(params.get("n_foreground", 200))
        point = np.array([0.0, 0.0, z0])
        fg = _plane_cloud(rng, point, extent, n_fg)
        # planted redundancy: oversized, nearly transparent Gaussians parked
        # just behind the visible surface; their peak alpha stays below the
        # hit-count threshold, so they collect no ray hits at all
        n_planted = n_fg
        planted_pos = np.column_stack(
            [
                rng.uniform(-extent, extent, n_planted),
                rng.uniform(-extent, extent, n_planted),
                np.full(n_planted, z0 + rng.uniform(0.2, 0.6)),
            ]
        )
        planted = GaussianCloud(
            positions=planted_pos,
            rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n_planted, 1)),
            log_scales=np.tile(np.log([2.0, 2.0, 1.0]), (n_planted, 1)),
            opacity_logits=np.full(n_planted, -6.0),
            colors=np.tile([0.5, 0.5, 0.5], (n_planted, 1)),
        )
        order = rng.permutation(n_fg + n_planted)
        gt = GaussianCloud(
            positions=np.vstack([fg.positions, planted.positions])[order],
            rotations=np.vstack([fg.rotations, planted.rotations])[order],
            log_scales=np.vstack([fg.log_scales, planted.log_scales])[order],
            opacity_logits=np.concatenate([fg.opacity_logits, planted.opacity_logits])[order],
            colors=np.vstack([fg.colors, planted.colors])[order],
        )
        planted_idx = np.nonzero(order >= n_fg)[0]
        scene = AnalyticScene(
            kind="plane",
            params={"point": point, "normal": np.array([0.0, 0.0, 1.0])},
            seed=seed,
        )
        manifest.update(
            plane_point=point.tolist(),
            plane_normal=[0.0, 0.0, 1.0],
            planted_indices=planted_idx.tolist(),
        )
    else:
        raise InvalidParameterError(f"unknown scene kind {kind!r}")

    priors = {cam.cam_id: synth_priors(cam, scene) for cam in cameras}
    references = {cam.cam_id: render(cam, gt, update_hit_counts=False).color for cam in cameras}

    init = gt.copy()
    if sigma > 0:
        init.positions = init.positions + sigma * rng.standard_normal(init.positions.shape)
    if "plane_point" in manifest:
        manifest["initial_rms"] = rms_point_to_plane(
            init, manifest["plane_point"], manifest["plane_normal"]
        )
    return SceneBundle(
        kind=kind,
        gt_cloud=gt,
        init_cloud=init,
        cameras=cameras,
        priors=priors,
        references=references,
        manifest=manifest,
    )


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def scene_loss_evaluator(camera: Camera, prior: PriorSet, reference: np.ndarray,
                         weights: LossWeights, scale_loss_weight: float = 0.0):
    """Deterministic cloud -> scalar loss closure for the FD prober."""

    def evaluate(cloud: GaussianCloud) -> float:
        buffers = render(camera, cloud, update_hit_counts=False)
        report = total_loss(buffers, reference, prior, weights, camera, keep_maps=False)
        return report.total + scale_loss_weight * scale_loss(cloud)

    return evaluate


def _scale_loss_gradient(cloud: GaussianCloud, weight: float) -> np.ndarray:
    """d(weight * mean min-scale)/d(log_scales); nonzero on each argmin axis."""
    grad = np.zeros_like(cloud.log_scales)
    if weight == 0.0 or cloud.count == 0:
        return grad
    s = cloud.scales
    k = 2 - np.argmin(s[:, ::-1], axis=1)
    rows = np.arange(cloud.count)
    grad[rows, k] = weight * s[rows, k] / cloud.count
    return grad


def hybrid_gradients(
    cloud: GaussianCloud,
    camera: Camera,
    buffers,
    record,
    report: LossReport,
    prior: PriorSet,
    reference: np.ndarray,
    weights: LossWeights,
    scale_loss_weight: float,
) -> dict:
    """Frozen-weight analytic gradients for position, rotation, log-scales, color."""
    h, w = camera.height, camera.width
    n = cloud.count
    grads = {
        "position": np.zeros((n, 3)),
        "rotation": np.zeros((n, 3)),
        "log_scales": _scale_loss_gradient(cloud, scale_loss_weight),
        "opacity": np.zeros(n),
        "color": np.zeros((n, 3)),
    }
    if record.pixel.size == 0:
        return grads

    # image-space adjoint of the depth-dependent terms
    a_depth = weights.lambda2 * dnormal_loss_depth_adjoint(
        buffers.depth, camera, buffers.valid, prior.pseudo_normal, prior.valid_mask
    )
    m_depth = buffers.valid & prior.valid_mask & (prior.pseudo_depth > 0)
    m_conf = m_depth & _central_stencil_valid(buffers.valid) & _central_stencil_valid(prior.valid_mask)
    if weights.lambda3 > 0 and m_conf.any() and report.confidence_map is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_diff = 1.0 / buffers.depth - 1.0 / prior.pseudo_depth
            d_id = np.sign(inv_diff) * (-1.0 / buffers.depth**2)
        contrib = np.zeros((h, w))
        contrib[m_conf] = (
            weights.lambda3 * report.confidence_map[m_conf] * d_id[m_conf] / m_conf.sum()
        )
        a_depth = a_depth + contrib

    # adjoint of the rendered-normal term through the weighted normal sum
    m_n = buffers.valid & prior.valid_mask
    g_unit = weights.lambda1 * normal_loss_adjoint(buffers.normal, prior.pseudo_normal, m_n)
    a_nsum = normalize_adjoint(record.normal_sum, g_unit, m_n)

    # photometric L1 adjoint (the SSIM share of the mix has no frozen-weight path)
    a_color = (1.0 - weights.dssim_mix) * np.sign(buffers.color - reference) / buffers.color.size

    # camera-frame geometry, reproduced exactly as the renderer computed it
    r_wc = camera.rotation
    p_cam = cloud.positions @ r_wc.T + camera.translation
    n_world = cloud_normals(cloud)
    n_cam = n_world @ r_wc.T
    flip = np.einsum("ij,ij->i", n_cam, p_cam) > 0
    sign = np.where(flip, -1.0, 1.0)
    n_cam = n_cam * sign[:, None]

    px = record.pixel
    src = record.source
    weight = record.weight
    rays_flat = camera.pixel_directions().reshape(-1, 3)
    r_px = rays_flat[px]

    grad_p_cam = np.zeros((n, 3))
    grad_n_cam = np.zeros((n, 3))

    a_d_flat = a_depth.ravel()[px]
    den_flat = record.depth_weight_sum.ravel()[px]
    usable = (~record.grazing) & (den_flat > 0) & (a_d_flat != 0)
    if usable.any():
        dd = a_d_flat[usable] * weight[usable] / den_flat[usable]
        nn = n_cam[src[usable]]
        pp = p_cam[src[usable]]
        rr = r_px[usable]
        ndotr = np.einsum("ij,ij->i", nn, rr)
        rz = rr[:, 2]
        dd_dp = rz[:, None] * nn / ndotr[:, None]
        ndotp = np.einsum("ij,ij->i", nn, pp)
        dd_dn = rz[:, None] * (pp * ndotr[:, None] - rr * ndotp[:, None]) / (ndotr**2)[:, None]
        np.add.at(grad_p_cam, src[usable], dd[:, None] * dd_dp)
        np.add.at(grad_n_cam, src[usable], dd[:, None] * dd_dn)

    a_ns_flat = a_nsum.reshape(-1, 3)[px]
    if np.any(a_ns_flat):
        np.add.at(grad_n_cam, src, weight[:, None] * a_ns_flat)

    a_c_flat = a_color.reshape(-1, 3)[px]
    np.add.at(grads["color"], src, weight[:, None] * a_c_flat)

    grads["position"] = grad_p_cam @ r_wc
    g_n_world = (grad_n_cam * sign[:, None]) @ r_wc
    grads["rotation"] = np.cross(n_world, g_n_world)
    return grads


def compute_gradients(cloud, camera, buffers, record, report, prior, reference, config):
    """Dispatch on gradient mode; returns a dict keyed by parameter group."""
    if config.grad_mode == "hybrid":
        grads = hybrid_gradients(
            cloud, camera, buffers, record, report, prior, reference,
            config.weights, config.scale_loss_weight,
        )
        if config.lr_opacity > 0:
            evaluator = scene_loss_evaluator(
                camera, prior, reference, config.weights, config.scale_loss_weight
            )
            grads["opacity"] = finite_diff_grad(
                evaluator, cloud, "opacity_logit", h=config.fd_step
            ).ravel()
        return grads
    evaluator = scene_loss_evaluator(
        camera, prior, reference, config.weights, config.scale_loss_weight
    )
    grads = {}
    group_to_select = {
        "position": "position",
        "rotation": "rotation",
        "log_scales": "log_scales",
        "opacity": "opacity_logit",
        "color": "color",
    }
    rates = {
        "position": config.lr_position,
        "rotation": config.lr_rotation,
        "log_scales": config.lr_log_scales,
        "opacity": config.lr_opacity,
        "color": config.lr_color,
    }
    for group, select in group_to_select.items():
        if rates[group] > 0:
            scale = max(1.0, float(np.sqrt(np.mean(_group_values(cloud, group) ** 2))))
            g = finite_diff_grad(evaluator, cloud, select, h=config.fd_step * scale)
            grads[group] = g.ravel() if group == "opacity" else g
        else:
            shape = (cloud.count,) if group == "opacity" else (cloud.count, 3)
            grads[group] = np.zeros(shape)
    return grads


def _group_values(cloud: GaussianCloud, group: str) -> np.ndarray:
    return {
        "position": cloud.positions,
        "rotation": np.ones((cloud.count, 3)),  # tangent space has unit scale
        "log_scales": cloud.log_scales,
        "opacity": cloud.opacity_logits,
        "color": cloud.colors,
    }[group]


# ---------------------------------------------------------------------------
# Step / train
# ---------------------------------------------------------------------------


def step(
    cloud: GaussianCloud,
    cameras: list,
    priors: dict,
    references: dict,
    config: TrainConfig,
    iteration: int = 0,
    hit_accumulator: np.ndarray | None = None,
):
    """One optimization step on the round-robin camera for this iteration."""
    config.validate()
    camera = cameras[iteration % len(cameras)]
    prior = priors[camera.cam_id]
    reference = references[camera.cam_id]

    buffers, record = render(camera, cloud, record=True)
    if hit_accumulator is not None:
        hit_accumulator += buffers.hit_counts
    report = total_loss(buffers, reference, prior, config.weights, camera)
    total = report.total + config.scale_loss_weight * scale_loss(cloud)
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss at iteration {iteration}")

    grads = compute_gradients(cloud, camera, buffers, record, report, prior, reference, config)

    new = cloud.copy()
    if config.lr_position > 0:
        new.positions = new.positions - config.lr_position * grads["position"]
    if config.lr_rotation > 0:
        for i in range(new.count):
            omega = -config.lr_rotation * grads["rotation"][i]
            if np.any(omega):
                new.rotations[i] = perturb_quaternion(new.rotations[i], omega)
    if config.lr_log_scales > 0:
        new.log_scales = new.log_scales - config.lr_log_scales * grads["log_scales"]
    if config.lr_opacity > 0:
        new.opacity_logits = new.opacity_logits - config.lr_opacity * grads["opacity"]
    if config.lr_color > 0:
        new.colors = np.clip(new.colors - config.lr_color * grads["color"], 0.0, 1.0)
    new.renormalize()
    return new, report


def train(bundle: SceneBundle, config: TrainConfig):
    """Run the full loop with scheduled pruning; deterministic given the seed."""
    config.validate()
    cloud = bundle.init_cloud.copy()
    n_iters = config.iterations
    cols = {name: np.zeros(n_iters) for name in ("total", "rgb", "n", "dn", "idw", "psnr", "rms")}
    counts = np.zeros(n_iters, dtype=np.int64)
    hit_accumulator = np.zeros(cloud.count, dtype=np.int64)
    plane = None
    if "plane_point" in bundle.manifest:
        plane = (bundle.manifest["plane_point"], bundle.manifest["plane_normal"])

    last_good = cloud
    for it in range(n_iters):
        if config.prune is not None and it > 0 and schedule_should_prune(
            it, n_iters, config.prune.schedule_fractions
        ):
            grid = build_voxel_grid(cloud, config.prune)
            scores = importance_scores(cloud, grid, hit_accumulator).score
            result = prune(cloud, scores, prune_ratio=config.prune.prune_ratio)
            cloud = result.cloud
            # stage boundary: hit counts restart for the surviving set
            hit_accumulator = np.zeros(cloud.count, dtype=np.int64)
            log.info("pruned to %d gaussians at iteration %d", cloud.count, it)

        try:
            cloud, report = step(
                cloud, bundle.cameras, bundle.priors, bundle.references, config, it,
                hit_accumulator=hit_accumulator,
            )
        except NumericError:
            log.exception("aborting training; returning the last finite state")
            cloud = last_good
            break
        last_good = cloud

        cam = bundle.cameras[it % len(bundle.cameras)]
        rendered = render(cam, cloud, update_hit_counts=False).color
        cols["total"][it] = report.total
        cols["rgb"][it] = report.rgb
        cols["n"][it] = report.n
        cols["dn"][it] = report.dn
        cols["idw"][it] = report.id_weighted
        cols["psnr"][it] = psnr(rendered, bundle.references[cam.cam_id])
        cols["rms"][it] = rms_point_to_plane(cloud, *plane) if plane else 0.0
        counts[it] = cloud.count

    record = TrainRecord(
        iterations=np.arange(n_iters),
        total=cols["total"],
        rgb=cols["rgb"],
        n=cols["n"],
        dn=cols["dn"],
        idw=cols["idw"],
        count=counts,
        psnr=cols["psnr"],
        rms=cols["rms"],
    )
    return cloud, record


# ---------------------------------------------------------------------------
# Scene bundle directory format
# ---------------------------------------------------------------------------


def save_bundle(out_dir, bundle: SceneBundle) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_cloud(os.path.join(out_dir, "gt_cloud.ply"), bundle.gt_cloud)
    save_cloud(os.path.join(out_dir, "init_cloud.ply"), bundle.init_cloud)
    save_cameras(os.path.join(out_dir, "cameras.txt"), bundle.cameras)
    for sub in ("priors", "refs"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for cam in bundle.cameras:
        prior = bundle.priors[cam.cam_id]
        save_raster(
            os.path.join(out_dir, "priors", f"{cam.cam_id}_depth.ugsr"),
            RasterMap(data=np.where(prior.valid_mask, prior.pseudo_depth, 0.0).astype(np.float32),
                      valid_mask=prior.valid_mask),
        )
        save_raster(
            os.path.join(out_dir, "priors", f"{cam.cam_id}_normal.ugsr"),
            RasterMap(data=prior.pseudo_normal.astype(np.float32), valid_mask=prior.valid_mask),
        )
        save_anchors(os.path.join(out_dir, "priors", f"{cam.cam_id}_anchors.txt"), prior.anchors)
        save_raster(
            os.path.join(out_dir, "refs", f"{cam.cam_id}_color.ugsr"),
            RasterMap(
                data=bundle.references[cam.cam_id].astype(np.float32),
                valid_mask=np.ones(bundle.references[cam.cam_id].shape[:2], dtype=bool),
            ),
        )
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        for key, value in sorted(bundle.manifest.items()):
            if isinstance(value, list):
                fh.write(f"{key}={','.join(repr(v) for v in value)}\n")
            else:
                fh.write(f"{key}={value!r}\n")


def load_bundle(scene_dir) -> SceneBundle:
    manifest_path = os.path.join(scene_dir, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise ParseError(f"{scene_dir}: missing manifest.txt")
    manifest: dict = {}
    with open(manifest_path) as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            if key in ("plane_point", "plane_normal", "box_min", "box_max"):
                manifest[key] = [float(v) for v in value.split(",")]
            elif key == "planted_indices":
                manifest[key] = [int(float(v)) for v in value.split(",")] if value else []
            elif key == "kind":
                manifest[key] = value.strip("'\"")
            else:
                try:
                    manifest[key] = float(value)
                except ValueError:
                    manifest[key] = value
    cameras = load_cameras(os.path.join(scene_dir, "cameras.txt"))
    gt = load_cloud(os.path.join(scene_dir, "gt_cloud.ply"))
    init = load_cloud(os.path.join(scene_dir, "init_cloud.ply"))
    priors = {}
    references = {}
    for cam in cameras:
        depth = load_raster(os.path.join(scene_dir, "priors", f"{cam.cam_id}_depth.ugsr"))
        normal = load_raster(os.path.join(scene_dir, "priors", f"{cam.cam_id}_normal.ugsr"))
        anchors = load_anchors(os.path.join(scene_dir, "priors", f"{cam.cam_id}_anchors.txt"))
        priors[cam.cam_id] = PriorSet(
            pseudo_depth=depth.plane().astype(np.float64),
            pseudo_normal=normal.data.astype(np.float64),
            anchors=anchors,
            valid_mask=depth.valid_mask,
        )
        ref = load_raster(os.path.join(scene_dir, "refs", f"{cam.cam_id}_color.ugsr"))
        references[cam.cam_id] = ref.data.astype(np.float64)
    return SceneBundle(
        kind=str(manifest.get("kind", "plane")),
        gt_cloud=gt,
        init_cloud=init,
        cameras=cameras,
        priors=priors,
        references=references,
        manifest=manifest,
    )
