"""Domain types for Gaussian scenes: clouds, cameras, priors, and the
covariance/normal math they share, plus the binary PLY cloud format.

Conventions used throughout the toolkit:

* quaternions are stored (w, x, y, z) and kept unit-norm;
* ``log_scales`` holds the log of the three world-unit axis lengths, so
  ``exp`` of it is always a valid positive scale;
* cameras follow the pinhole model with pixel centers at ``(u + 0.5, v + 0.5)``
  and look down their local +z axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, ParseError

# Relative floor applied to squared scales before inverting a covariance.
# The flattening regularizer drives min-scale toward zero, which would make
# the Gaussian's quadratic form singular without this.
COV_EIGENVALUE_FLOOR = 1e-9


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm. Accepts (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12) or not np.all(np.isfinite(norm)):
        raise InvalidParameterError("quaternion has zero or non-finite norm")
    return q / norm


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z).

    Accepts a single (4,) quaternion or an (N, 4) batch; returns (3, 3)
    or (N, 3, 3) accordingly.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    m[:, 0, 0] = 1 - 2 * (yy + zz)
    m[:, 0, 1] = 2 * (xy - wz)
    m[:, 0, 2] = 2 * (xz + wy)
    m[:, 1, 0] = 2 * (xy + wz)
    m[:, 1, 1] = 1 - 2 * (xx + zz)
    m[:, 1, 2] = 2 * (yz - wx)
    m[:, 2, 0] = 2 * (xz - wy)
    m[:, 2, 1] = 2 * (yz + wx)
    m[:, 2, 2] = 1 - 2 * (xx + yy)
    return m[0] if single else m


def quaternion_from_rotvec(omega: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation vector (axis * angle)."""
    omega = np.asarray(omega, dtype=np.float64)
    angle = np.linalg.norm(omega)
    if angle < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = omega / angle
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def perturb_quaternion(q: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Left-multiply q by the small world-frame rotation ``omega`` and renormalize.

    This is the tangent-space parameterization used by both the
    finite-difference prober and the analytic rotation gradients, so the two
    agree on what a rotation step means.
    """
    return normalize_quaternion(quaternion_multiply(quaternion_from_rotvec(omega), q))


@dataclass
class Gaussian:
    """A single anisotropic Gaussian primitive.

    ``rotation`` is a unit quaternion (w, x, y, z); ``log_scales`` is the log
    of the three axis lengths in world units; ``opacity_logit`` maps to
    opacity through a sigmoid; ``color`` is RGB in [0, 1].
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = normalize_quaternion(self.rotation)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if not (
            np.all(np.isfinite(self.position))
            and np.all(np.isfinite(self.log_scales))
            and np.isfinite(self.opacity_logit)
            and np.all(np.isfinite(self.color))
        ):
            raise InvalidParameterError("gaussian has non-finite fields")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise InvalidParameterError("color components must lie in [0, 1]")

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian scene.

    All arrays share leading dimension N. Quaternions are normalized on
    ingest; callers that mutate ``rotations`` in place are expected to call
    :meth:`renormalize` afterwards (the trainer does).
    """

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4), unit (w, x, y, z)
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if n:
            self.rotations = normalize_quaternion(self.rotations)
        self.validate()

    def validate(self) -> None:
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"cloud field {name!r} has non-finite values")
        if self.count and (np.any(self.colors < 0) or np.any(self.colors > 1)):
            raise InvalidParameterError("cloud colors must lie in [0, 1]")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def renormalize(self) -> None:
        if self.count:
            self.rotations = normalize_quaternion(self.rotations)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scales=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i].copy(),
        )

    def subset(self, indices: np.ndarray) -> "GaussianCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianCloud(
            positions=self.positions[idx].copy(),
            rotations=self.rotations[idx].copy(),
            log_scales=self.log_scales[idx].copy(),
            opacity_logits=self.opacity_logits[idx].copy(),
            colors=self.colors[idx].copy(),
        )

    def copy(self) -> "GaussianCloud":
        return self.subset(np.arange(self.count))

    @staticmethod
    def empty() -> "GaussianCloud":
        return GaussianCloud(
            positions=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)),
            opacity_logits=np.zeros(0),
            colors=np.zeros((0, 3)),
        )


@dataclass
class Camera:
    """Pinhole camera: intrinsics, world-to-camera rigid transform, resolution.

    ``rotation`` and ``translation`` map world points into the camera frame
    via ``p_cam = R @ p_world + t``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    cam_id: str = "cam0"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()
        self._rays = None

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError("principal point must lie inside the image")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise InvalidParameterError(f"camera rotation not orthonormal (error {err:.2e})")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def pixel_directions(self) -> np.ndarray:
        """Unit ray directions through every pixel center, camera frame, (H, W, 3).

        Cached; the grid depends only on intrinsics and resolution.
        """
        if self._rays is None:
            u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
            v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
            uu, vv = np.meshgrid(u, v)
            d = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
            self._rays = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return self._rays


@dataclass
class PriorSet:
    """Per-view pseudo-depth/normal maps plus sparse metric depth anchors.

    ``anchors`` rows are (u, v, depth) with integer pixel coordinates stored
    as floats. Normal vectors live in the camera frame and are camera-facing.
    """

    pseudo_depth: np.ndarray  # (H, W)
    pseudo_normal: np.ndarray  # (H, W, 3)
    anchors: np.ndarray  # (K, 3) rows (u, v, depth)
    valid_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.pseudo_depth = np.asarray(self.pseudo_depth, dtype=np.float64)
        self.pseudo_normal = np.asarray(self.pseudo_normal, dtype=np.float64)
        self.anchors = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 3)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)

    def validate(self, camera: Camera | None = None) -> None:
        h, w = self.pseudo_depth.shape
        if self.pseudo_normal.shape != (h, w, 3) or self.valid_mask.shape != (h, w):
            raise InvalidParameterError("prior maps disagree on resolution")
        if camera is not None and (h, w) != (camera.height, camera.width):
            raise InvalidParameterError("prior maps do not match the camera resolution")
        if np.any(self.pseudo_depth[self.valid_mask] <= 0):
            raise InvalidParameterError("pseudo depth must be positive on valid pixels")
        norms = np.linalg.norm(self.pseudo_normal[self.valid_mask], axis=-1)
        if norms.size and np.abs(norms - 1).max() > 1e-6:
            raise InvalidParameterError("pseudo normals must be unit on valid pixels")


# ---------------------------------------------------------------------------
# Covariance / normal math
# ---------------------------------------------------------------------------


def build_covariance(rotation: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """World-space covariance R * diag(s)^2 * R^T of one Gaussian.

    The result is symmetric positive semi-definite with eigenvalues equal to
    the squared scales.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(scales))):
        raise InvalidParameterError("non-finite rotation or scales")
    if np.any(scales <= 0):
        raise InvalidParameterError("scales must be strictly positive")
    r = quaternion_to_matrix(normalize_quaternion(rotation))
    m = r * scales[np.newaxis, :]  # columns scaled: R @ diag(s)
    return m @ m.T


def covariances(cloud: GaussianCloud) -> np.ndarray:
    """Batched world-space covariances, (N, 3, 3)."""
    r = quaternion_to_matrix(cloud.rotations)
    m = r * cloud.scales[:, np.newaxis, :]
    return m @ np.transpose(m, (0, 2, 1))


def smallest_axis_index(scales: np.ndarray) -> int:
    """Index of the smallest scale; exact ties resolved to the highest index."""
    scales = np.asarray(scales)
    return int(2 - np.argmin(scales[::-1]))


def gaussian_normal(rotation: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Unit normal of a flattened Gaussian: the minor-axis direction.

    This is the covariance eigenvector whose eigenvalue is the squared
    smallest scale, i.e. the rotation matrix column of the min-scale axis.
    """
    scales = np.asarray(scales, dtype=np.float64)
    if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
        raise InvalidParameterError("scales must be finite and positive")
    r = quaternion_to_matrix(normalize_quaternion(rotation))
    return r[:, smallest_axis_index(scales)].copy()


def cloud_normals(cloud: GaussianCloud) -> np.ndarray:
    """Batched world-frame minor-axis normals, (N, 3)."""
    r = quaternion_to_matrix(cloud.rotations)
    s = cloud.scales
    # last-wins argmin, vectorized over the reversed axis order
    k = 2 - np.argmin(s[:, ::-1], axis=1)
    return r[np.arange(cloud.count), :, k]


def regularized_inverse_covariance(rotation: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Inverse covariance with squared scales floored at 1e-9 * max(s)^2.

    Keeps the quadratic form finite when the flattening loss has driven the
    smallest scale toward zero.
    """
    scales = np.asarray(scales, dtype=np.float64)
    r = quaternion_to_matrix(normalize_quaternion(rotation))
    eig = scales**2 + COV_EIGENVALUE_FLOOR * np.max(scales) ** 2
    return (r / eig[np.newaxis, :]) @ r.T


def evaluate_gaussian(g: Gaussian, p: np.ndarray) -> float:
    """Unnormalized Gaussian density exp(-0.5 * d^T Sigma^-1 * d), d = p - center."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise InvalidParameterError("query point has non-finite components")
    inv = regularized_inverse_covariance(g.rotation, g.scales)
    d = p - g.position
    return float(np.exp(-0.5 * d @ inv @ d))


def scale_loss(cloud: GaussianCloud) -> float:
    """Mean over Gaussians of the smallest axis length; flattens ellipsoids."""
    if cloud.count == 0:
        return 0.0
    return float(np.mean(np.abs(np.min(cloud.scales, axis=1))))


# ---------------------------------------------------------------------------
# Cloud file format: binary little-endian PLY
# ---------------------------------------------------------------------------

CLOUD_PROPERTIES = (
    "x",
    "y",
    "z",
    "rot_0",
    "rot_1",
    "rot_2",
    "rot_3",
    "scale_0",
    "scale_1",
    "scale_2",
    "opacity",
    "red",
    "green",
    "blue",
)
PROVENANCE_PROPERTY = "provenance"


def _write_ply(path, cloud: GaussianCloud, provenance: np.ndarray | None) -> None:
    n = cloud.count
    props = [f"property float {name}" for name in CLOUD_PROPERTIES]
    if provenance is not None:
        props.append(f"property uint {PROVENANCE_PROPERTY}")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n" + "\n".join(props) + "\nend_header\n"
    )
    payload = np.column_stack(
        [
            cloud.positions,
            cloud.rotations,
            cloud.log_scales,
            cloud.opacity_logits,
            cloud.colors,
        ]
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if provenance is None:
            fh.write(payload.tobytes())
        else:
            prov = np.asarray(provenance, dtype="<u4").reshape(n)
            row = np.dtype(
                [(name, "<f4") for name in CLOUD_PROPERTIES]
                + [(PROVENANCE_PROPERTY, "<u4")]
            )
            rec = np.zeros(n, dtype=row)
            for j, name in enumerate(CLOUD_PROPERTIES):
                rec[name] = payload[:, j]
            rec[PROVENANCE_PROPERTY] = prov
            fh.write(rec.tobytes())


def save_cloud(path, cloud: GaussianCloud) -> None:
    """Write the cloud as binary little-endian PLY with float32 properties."""
    _write_ply(path, cloud, provenance=None)


def save_block_cloud(path, cloud: GaussianCloud, provenance: np.ndarray) -> None:
    """Write a partition sub-cloud carrying a uint32 provenance property."""
    _write_ply(path, cloud, provenance=provenance)


def _parse_ply_header(fh, path):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise ParseError(f"{path}: not a PLY file (missing 'ply' magic)")
    fmt = fh.readline().strip()
    if fmt != b"format binary_little_endian 1.0":
        raise ParseError(f"{path}: unsupported format line {fmt!r}")
    count = None
    props = []
    while True:
        line = fh.readline()
        if not line:
            raise ParseError(f"{path}: truncated header (no end_header)")
        line = line.strip()
        if line == b"end_header":
            break
        if line.startswith(b"comment"):
            continue
        parts = line.decode("ascii", "replace").split()
        if parts[:2] == ["element", "vertex"] and len(parts) == 3:
            count = int(parts[2])
        elif parts[0] == "element":
            raise ParseError(f"{path}: unexpected element {parts[1]!r}")
        elif parts[0] == "property" and len(parts) == 3:
            props.append((parts[1], parts[2]))
        else:
            raise ParseError(f"{path}: malformed header line {line!r}")
    if count is None:
        raise ParseError(f"{path}: header missing 'element vertex'")
    return count, props


def _load_ply(path, expect_provenance: bool):
    with open(path, "rb") as fh:
        count, props = _parse_ply_header(fh, path)
        expected = [("float", name) for name in CLOUD_PROPERTIES]
        if expect_provenance:
            expected.append(("uint", PROVENANCE_PROPERTY))
        names = [name for _, name in props]
        for _, want in expected:
            if want not in names:
                raise ParseError(f"{path}: missing property: {want}")
        for ptype, name in props:
            want = dict((n, t) for t, n in expected).get(name)
            if want is None:
                raise ParseError(f"{path}: unexpected property: {name}")
            if ptype != want:
                raise ParseError(f"{path}: property {name} has type {ptype}, expected {want}")
        if names != [name for _, name in expected]:
            raise ParseError(f"{path}: property order {names} differs from the cloud schema")
        row = np.dtype(
            [(name, "<f4") for name in CLOUD_PROPERTIES]
            + ([(PROVENANCE_PROPERTY, "<u4")] if expect_provenance else [])
        )
        data = fh.read()
    if len(data) != count * row.itemsize:
        raise ParseError(
            f"{path}: truncated payload ({len(data)} bytes for {count} vertices "
            f"of {row.itemsize} bytes)"
        )
    rec = np.frombuffer(data, dtype=row, count=count)
    fields = np.column_stack([rec[name].astype(np.float64) for name in CLOUD_PROPERTIES]) if count else np.zeros((0, 14))
    cloud = GaussianCloud(
        positions=fields[:, 0:3],
        rotations=fields[:, 3:7],
        log_scales=fields[:, 7:10],
        opacity_logits=fields[:, 10],
        colors=fields[:, 11:14],
    )
    prov = rec[PROVENANCE_PROPERTY].astype(np.int64) if expect_provenance else None
    return cloud, prov


def load_cloud(path) -> GaussianCloud:
    """Read a cloud saved by :func:`save_cloud`; exact schema required."""
    cloud, _ = _load_ply(path, expect_provenance=False)
    return cloud


def load_block_cloud(path) -> tuple[GaussianCloud, np.ndarray]:
    """Read a partition sub-cloud; returns (cloud, provenance indices)."""
    cloud, prov = _load_ply(path, expect_provenance=True)
    return cloud, prov


# ---------------------------------------------------------------------------
# Camera text format (one camera per line)
# ---------------------------------------------------------------------------


def save_cameras(path, cameras: list[Camera]) -> None:
    """Write cameras as text lines:
    id fx fy cx cy width height r00..r22 tx ty tz
    """
    with open(path, "w") as fh:
        fh.write("# id fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n")
        for cam in cameras:
            vals = [cam.fx, cam.fy, cam.cx, cam.cy]
            nums = " ".join(repr(float(v)) for v in vals)
            rot = " ".join(repr(float(v)) for v in cam.rotation.ravel())
            tr = " ".join(repr(float(v)) for v in cam.translation)
            fh.write(f"{cam.cam_id} {nums} {cam.width} {cam.height} {rot} {tr}\n")


def load_cameras(path) -> list[Camera]:
    cameras = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 19:
                raise ParseError(f"{path}:{lineno}: expected 19 fields, got {len(parts)}")
            try:
                cam_id = parts[0]
                fx, fy, cx, cy = (float(p) for p in parts[1:5])
                width, height = int(parts[5]), int(parts[6])
                rot = np.array([float(p) for p in parts[7:16]]).reshape(3, 3)
                tr = np.array([float(p) for p in parts[16:19]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            cameras.append(
                Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                       rotation=rot, translation=tr, cam_id=cam_id)
            )
    return cameras
