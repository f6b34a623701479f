"""The depth-consistent loss stack over render buffers and priors.

Covers the normal and depth-derived-normal losses, inverse-depth supervision
gated by a gradient/deviation confidence weight, the SSIM-mixed photometric
term, analytic intersection-depth gradients, and a finite-difference probe
for verifying any of it end to end.

Fixed stencils (documented here once): the depth-to-normal map uses forward
differences with the final difference replicated at the image border; the
gradient-cosine confidence cue uses central differences with one-sided
differences at the border. Both operate on the stated maps only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianCloud, PriorSet, perturb_quaternion, scale_loss
from .errors import GrazingRayError, InvalidParameterError, NumericError
from .renderer import RenderBuffers

log = logging.getLogger(__name__)

FLAT_GRADIENT_EPS = 1e-12  # below this gradient norm a pixel counts as flat


@dataclass
class LossWeights:
    """Weights of the total objective; defaults follow the reference recipe.

    ``gamma_d`` and ``tau`` steer the exponential confidence decay. The
    lambda values are not published anywhere authoritative; these defaults
    put every term at the same order of magnitude on the synthetic fixtures.
    """

    lambda1: float = 0.05  # rendered-normal term
    lambda2: float = 0.05  # depth-derived-normal term
    lambda3: float = 0.10  # confidence-weighted inverse-depth term
    gamma_d: float = 0.01
    tau: float = 0.1
    dssim_mix: float = 0.2

    def validate(self) -> None:
        vals = (self.lambda1, self.lambda2, self.lambda3, self.gamma_d, self.tau, self.dssim_mix)
        if any(v < 0 for v in vals):
            raise InvalidParameterError("loss weights must be non-negative")
        if self.dssim_mix > 1:
            raise InvalidParameterError("dssim_mix must stay in [0, 1]")


@dataclass
class LossReport:
    total: float
    rgb: float
    n: float
    dn: float
    id_weighted: float
    weights: LossWeights
    confidence_map: np.ndarray | None = None
    cos_map: np.ndarray | None = None
    deviation_map: np.ndarray | None = None
    valid_counts: dict = field(default_factory=dict)

    def serialize(self) -> str:
        lines = [
            f"total={self.total!r}",
            f"rgb={self.rgb!r}",
            f"n={self.n!r}",
            f"dn={self.dn!r}",
            f"id_weighted={self.id_weighted!r}",
            f"lambda1={self.weights.lambda1!r}",
            f"lambda2={self.weights.lambda2!r}",
            f"lambda3={self.weights.lambda3!r}",
        ]
        for name, count in sorted(self.valid_counts.items()):
            lines.append(f"valid_{name}={count}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Normal-map losses
# ---------------------------------------------------------------------------


def normal_loss(rendered: np.ndarray, prior: np.ndarray, mask: np.ndarray) -> float:
    """Mean per-pixel L1-plus-cosine discrepancy between two unit normal maps."""
    mask = np.asarray(mask, dtype=bool)
    if rendered.shape != prior.shape:
        raise InvalidParameterError("normal maps disagree on shape")
    if not mask.any():
        log.warning("normal loss over an empty mask; returning zero")
        return 0.0
    diff = np.abs(rendered[mask] - prior[mask]).sum(axis=-1)
    cos = np.einsum("ij,ij->i", rendered[mask], prior[mask])
    return float(np.mean(diff + (1.0 - cos)))


def backproject(depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Lift a depth map into camera-frame points; z equals the depth exactly."""
    h, w = depth.shape
    u = (np.arange(w) + 0.5 - camera.cx) / camera.fx
    v = (np.arange(h) + 0.5 - camera.cy) / camera.fy
    uu, vv = np.meshgrid(u, v)
    k = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return depth[..., None] * k


def _forward_diff_rows(arr: np.ndarray) -> np.ndarray:
    d = arr[1:] - arr[:-1]
    return np.concatenate([d, d[-1:]], axis=0)


def _forward_diff_cols(arr: np.ndarray) -> np.ndarray:
    d = arr[:, 1:] - arr[:, :-1]
    return np.concatenate([d, d[:, -1:]], axis=1)


def _stencil_valid(mask: np.ndarray) -> np.ndarray:
    """Pixels whose forward-difference stencil (with border replication)
    touches only valid depth."""
    rows = mask[1:] & mask[:-1]
    rows = np.concatenate([rows, rows[-1:]], axis=0)
    cols = mask[:, 1:] & mask[:, :-1]
    cols = np.concatenate([cols, cols[:, -1:]], axis=1)
    return mask & rows & cols


def dnormal_map(depth: np.ndarray, camera: Camera, valid: np.ndarray | None = None):
    """Normal map derived from a depth map.

    Back-projects the depth, takes vertical and horizontal forward
    differences of the point map, crosses them, normalizes, and orients each
    normal toward the camera (negative z). Returns ``(normals, mask)`` where
    the mask drops pixels whose stencil touches invalid depth or whose cross
    product degenerates.
    """
    if valid is None:
        valid = np.ones(depth.shape, dtype=bool)
    points = backproject(depth, camera)
    grad_v = _forward_diff_rows(points)
    grad_h = _forward_diff_cols(points)
    cross = np.cross(grad_v, grad_h)
    norm = np.linalg.norm(cross, axis=-1)
    ok = _stencil_valid(valid) & (norm > 1e-18)
    normals = np.zeros_like(points)
    np.divide(cross, norm[..., None], out=normals, where=ok[..., None])
    flip = ok & (normals[..., 2] > 0)
    normals[flip] *= -1
    return normals, ok


def dnormal_loss(dnormals: np.ndarray, prior: np.ndarray, mask: np.ndarray) -> float:
    """Same functional form as :func:`normal_loss`, applied to derived normals."""
    return normal_loss(dnormals, prior, mask)


def inverse_depth_loss(rendered_depth: np.ndarray, prior_depth: np.ndarray) -> np.ndarray:
    """Per-pixel |1/rendered - 1/prior|; caller masks invalid pixels."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.abs(1.0 / rendered_depth - 1.0 / prior_depth)
    return out


def _central_gradient(depth: np.ndarray):
    """(d/du, d/dv) with central differences inside, one-sided at the borders."""
    gu = np.empty_like(depth)
    gu[:, 1:-1] = 0.5 * (depth[:, 2:] - depth[:, :-2])
    gu[:, 0] = depth[:, 1] - depth[:, 0]
    gu[:, -1] = depth[:, -1] - depth[:, -2]
    gv = np.empty_like(depth)
    gv[1:-1] = 0.5 * (depth[2:] - depth[:-2])
    gv[0] = depth[1] - depth[0]
    gv[-1] = depth[-1] - depth[-2]
    return gu, gv


def _central_stencil_valid(mask: np.ndarray) -> np.ndarray:
    mu = np.empty_like(mask)
    mu[:, 1:-1] = mask[:, 2:] & mask[:, :-2]
    mu[:, 0] = mask[:, 0] & mask[:, 1]
    mu[:, -1] = mask[:, -1] & mask[:, -2]
    mv = np.empty_like(mask)
    mv[1:-1] = mask[2:] & mask[:-2]
    mv[0] = mask[0] & mask[1]
    mv[-1] = mask[-1] & mask[-2]
    return mask & mu & mv


def gradient_cosine(rendered_depth: np.ndarray, prior_depth: np.ndarray) -> np.ndarray:
    """Cosine between the image-space gradients of two depth maps.

    Where either gradient vanishes the cosine is defined as 1: flat regions
    compared against flat regions should not be penalized.
    """
    gu1, gv1 = _central_gradient(rendered_depth)
    gu2, gv2 = _central_gradient(prior_depth)
    dot = gu1 * gu2 + gv1 * gv2
    n1 = np.sqrt(gu1**2 + gv1**2)
    n2 = np.sqrt(gu2**2 + gv2**2)
    flat = (n1 < FLAT_GRADIENT_EPS) | (n2 < FLAT_GRADIENT_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = dot / (n1 * n2)
    cos = np.where(flat, 1.0, cos)
    return np.clip(cos, -1.0, 1.0)


def depth_deviation(id_loss_map: np.ndarray, rendered_depth: np.ndarray,
                    valid: np.ndarray | None = None) -> np.ndarray:
    """Inverse-depth error normalized by the scene's median inverse depth."""
    if valid is None:
        valid = np.ones(rendered_depth.shape, dtype=bool)
    if not valid.any():
        raise NumericError("no valid pixels for the deviation median")
    with np.errstate(divide="ignore"):
        inv = 1.0 / rendered_depth[valid]
    med = float(np.median(inv))
    if not np.isfinite(med) or med <= 1e-12:
        raise NumericError("median inverse depth degenerate")
    return id_loss_map / med


def confidence(cos_map: np.ndarray, deviation_map: np.ndarray,
               gamma_d: float = 0.01, tau: float = 0.1) -> np.ndarray:
    """Exponential-decay confidence in (0, 1]; 1 only at perfect agreement."""
    if np.any(cos_map < -1 - 1e-9) or np.any(cos_map > 1 + 1e-9):
        raise InvalidParameterError("cosine map out of [-1, 1]")
    return np.exp((cos_map - 1.0) / gamma_d) * np.exp(-deviation_map / tau)


# ---------------------------------------------------------------------------
# Photometric losses
# ---------------------------------------------------------------------------


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-0.5 * (x / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    """Windowed SSIM with an 11x11 Gaussian kernel, dynamic range 1.

    Window positions are the fully valid ones (no padding); channels are
    averaged. Images smaller than the window shrink it to the largest odd
    size that fits.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError("images disagree on shape")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w = a.shape[:2]
    if min(h, w) < window:
        window = max(1, min(h, w))
        if window % 2 == 0:
            window -= 1
        log.warning("image smaller than the SSIM window; shrunk to %d", window)
    kern = _gaussian_window(window, sigma)
    k1, k2, dyn = 0.01, 0.03, 1.0
    c1, c2 = (k1 * dyn) ** 2, (k2 * dyn) ** 2

    from numpy.lib.stride_tricks import sliding_window_view

    vals = []
    for ch in range(a.shape[2]):
        wa = sliding_window_view(a[..., ch], (window, window))
        wb = sliding_window_view(b[..., ch], (window, window))
        mu1 = np.einsum("hwij,ij->hw", wa, kern)
        mu2 = np.einsum("hwij,ij->hw", wb, kern)
        e11 = np.einsum("hwij,ij->hw", wa * wa, kern)
        e22 = np.einsum("hwij,ij->hw", wb * wb, kern)
        e12 = np.einsum("hwij,ij->hw", wa * wb, kern)
        s11 = e11 - mu1 * mu1
        s22 = e22 - mu2 * mu2
        s12 = e12 - mu1 * mu2
        num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
        den = (mu1**2 + mu2**2 + c1) * (s11 + s22 + c2)
        vals.append(num / den)
    return float(np.mean(vals))


def rgb_loss(rendered: np.ndarray, reference: np.ndarray, dssim_mix: float = 0.2) -> float:
    """(1 - m) * mean-L1 + m * (1 - SSIM)."""
    if rendered.shape != reference.shape:
        raise InvalidParameterError("images disagree on shape")
    l1 = float(np.mean(np.abs(rendered - reference)))
    if dssim_mix == 0.0:
        return l1
    return (1.0 - dssim_mix) * l1 + dssim_mix * (1.0 - ssim(rendered, reference))


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99."""
    mse = float(np.mean((np.asarray(image) - np.asarray(reference)) ** 2))
    if mse <= 0:
        return 99.0
    return min(99.0, float(10.0 * np.log10(1.0 / mse)))


# ---------------------------------------------------------------------------
# Total objective
# ---------------------------------------------------------------------------


def total_loss(
    buffers: RenderBuffers,
    reference: np.ndarray,
    priors: PriorSet,
    weights: LossWeights,
    camera: Camera,
    keep_maps: bool = True,
) -> LossReport:
    """Assemble the full objective; each term runs over its own valid mask.

    The confidence-weighted inverse-depth term averages the product
    ``w_d * L_id`` over pixels where both depths and both gradient stencils
    are valid.
    """
    weights.validate()
    rgb = rgb_loss(buffers.color, reference, weights.dssim_mix)

    m_n = buffers.valid & priors.valid_mask
    n_term = normal_loss(buffers.normal, priors.pseudo_normal, m_n)

    dn_map, dn_ok = dnormal_map(buffers.depth, camera, buffers.valid)
    m_dn = dn_ok & priors.valid_mask
    dn_term = dnormal_loss(dn_map, priors.pseudo_normal, m_dn)

    m_depth = buffers.valid & priors.valid_mask & (priors.pseudo_depth > 0)
    id_map = np.zeros(buffers.depth.shape)
    if m_depth.any():
        id_map[m_depth] = inverse_depth_loss(buffers.depth, priors.pseudo_depth)[m_depth]
    cos_map = gradient_cosine(buffers.depth, priors.pseudo_depth)
    m_conf = m_depth & _central_stencil_valid(buffers.valid) & _central_stencil_valid(priors.valid_mask)
    if m_depth.any():
        dev_map = depth_deviation(id_map, buffers.depth, buffers.valid)
        conf_map = confidence(cos_map, dev_map, weights.gamma_d, weights.tau)
    else:
        log.warning("inverse-depth term over an empty mask; returning zero")
        dev_map = np.zeros_like(id_map)
        conf_map = np.zeros_like(id_map)
    idw = float(np.mean((conf_map * id_map)[m_conf])) if m_conf.any() else 0.0

    total = rgb + weights.lambda1 * n_term + weights.lambda2 * dn_term + weights.lambda3 * idw
    return LossReport(
        total=total,
        rgb=rgb,
        n=n_term,
        dn=dn_term,
        id_weighted=idw,
        weights=weights,
        confidence_map=conf_map if keep_maps else None,
        cos_map=cos_map if keep_maps else None,
        deviation_map=dev_map if keep_maps else None,
        valid_counts={
            "n": int(m_n.sum()),
            "dn": int(m_dn.sum()),
            "id": int(m_conf.sum()),
        },
    )


# ---------------------------------------------------------------------------
# Analytic gradients and the finite-difference oracle
# ---------------------------------------------------------------------------


def intersection_depth_grads(n: np.ndarray, p: np.ndarray, r: np.ndarray):
    """d(depth)/d(center) and d(depth)/d(normal) of the ray/plane depth.

    depth = r_z * (n . p) / (n . r), so the center gradient is
    r_z * n / (n . r) and the normal gradient follows the quotient rule.
    """
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    n_dot_r = float(n @ r)
    if abs(n_dot_r) < 1e-8:
        raise GrazingRayError("ray nearly parallel to the plane")
    n_dot_p = float(n @ p)
    dd_dp = r[2] * n / n_dot_r
    dd_dn = r[2] * (p * n_dot_r - r * n_dot_p) / n_dot_r**2
    return dd_dp, dd_dn


_PARAM_DIMS = {"position": 3, "rotation": 3, "log_scales": 3, "opacity_logit": 1, "color": 3}


def finite_diff_grad(
    loss_evaluator,
    cloud: GaussianCloud,
    select: str,
    h: float = 1e-4,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar loss over one parameter group.

    ``select`` is one of position, rotation, log_scales, opacity_logit,
    color. Rotations are probed in their 3-dimensional tangent space and
    renormalized, matching :func:`splatlab.core.perturb_quaternion`. Returns
    an array of shape (len(indices), group dimension).
    """
    if select not in _PARAM_DIMS:
        raise InvalidParameterError(f"unknown parameter group {select!r}")
    if indices is None:
        indices = np.arange(cloud.count)
    indices = np.asarray(indices, dtype=np.int64)
    dim = _PARAM_DIMS[select]
    grad = np.zeros((indices.size, dim))

    def eval_perturbed(i, axis, sign):
        trial = cloud.copy()
        if select == "position":
            trial.positions[i, axis] += sign * h
        elif select == "log_scales":
            trial.log_scales[i, axis] += sign * h
        elif select == "color":
            trial.colors[i, axis] = np.clip(trial.colors[i, axis] + sign * h, 0.0, 1.0)
        elif select == "opacity_logit":
            trial.opacity_logits[i] += sign * h
        else:  # rotation tangent
            omega = np.zeros(3)
            omega[axis] = sign * h
            trial.rotations[i] = perturb_quaternion(trial.rotations[i], omega)
        value = float(loss_evaluator(trial))
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss probing {select}[{i}] axis {axis}")
        return value

    for row, i in enumerate(indices):
        for axis in range(dim):
            f_plus = eval_perturbed(i, axis, +1)
            f_minus = eval_perturbed(i, axis, -1)
            grad[row, axis] = (f_plus - f_minus) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Image-space adjoints (shared with the trainer's frozen-weight gradients)
# ---------------------------------------------------------------------------


def normal_loss_adjoint(rendered: np.ndarray, prior: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """d(normal_loss)/d(rendered normal) per pixel; zero off the mask."""
    out = np.zeros_like(rendered)
    count = int(mask.sum())
    if count == 0:
        return out
    out[mask] = (np.sign(rendered[mask] - prior[mask]) - prior[mask]) / count
    return out


def normalize_adjoint(raw: np.ndarray, grad_unit: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. unit vectors back through v / |v|."""
    out = np.zeros_like(raw)
    if not mask.any():
        return out
    norm = np.linalg.norm(raw[mask], axis=-1, keepdims=True)
    unit = raw[mask] / norm
    g = grad_unit[mask]
    out[mask] = (g - unit * np.einsum("ij,ij->i", unit, g)[:, None]) / norm
    return out


def dnormal_loss_depth_adjoint(
    depth: np.ndarray,
    camera: Camera,
    valid: np.ndarray,
    prior_normal: np.ndarray,
    prior_valid: np.ndarray,
) -> np.ndarray:
    """d(dnormal_loss)/d(depth map), holding masks and orientation signs fixed.

    Mirrors the forward stencil of :func:`dnormal_map` exactly: forward
    differences with the last difference replicated at the borders, cross
    product, normalization, camera-facing flip.
    """
    points = backproject(depth, camera)
    grad_v = _forward_diff_rows(points)
    grad_h = _forward_diff_cols(points)
    cross = np.cross(grad_v, grad_h)
    norm = np.linalg.norm(cross, axis=-1)
    ok = _stencil_valid(valid) & (norm > 1e-18)
    unit = np.zeros_like(cross)
    np.divide(cross, norm[..., None], out=unit, where=ok[..., None])
    sign = np.where(unit[..., 2] > 0, -1.0, 1.0)
    oriented = unit * sign[..., None]

    mask = ok & prior_valid
    g_oriented = normal_loss_adjoint(oriented, prior_normal, mask)
    g_unit = g_oriented * sign[..., None]
    g_cross = normalize_adjoint(cross, g_unit, mask)

    # cross = grad_v x grad_h
    g_grad_v = np.cross(grad_h, g_cross)
    g_grad_h = np.cross(g_cross, grad_v)

    # undo the border replication: the copied difference re-uses the stencil
    # one row (column) earlier
    g_grad_v[-2] += g_grad_v[-1]
    g_grad_v = g_grad_v[:-1]
    g_points = np.zeros_like(points)
    g_points[1:] += g_grad_v
    g_points[:-1] -= g_grad_v

    g_grad_h[:, -2] += g_grad_h[:, -1]
    g_grad_h = g_grad_h[:, :-1]
    g_points[:, 1:] += g_grad_h
    g_points[:, :-1] -= g_grad_h

    h, w = depth.shape
    u = (np.arange(w) + 0.5 - camera.cx) / camera.fx
    v = (np.arange(h) + 0.5 - camera.cy) / camera.fy
    uu, vv = np.meshgrid(u, v)
    k = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return np.einsum("hwc,hwc->hw", g_points, k)
