"""SE(3) poses, pinhole projection, bilinear sampling and disparity/depth conversion.

All functions are pure; nothing here mutates its inputs, so everything is safe
to call concurrently.
"""

import numpy as np

EPS_DEPTH = 1e-6
SMALL_ANGLE = 1e-8
ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


def hat(w):
    """Skew-symmetric matrix of a 3-vector."""
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def so3_exp(w):
    """Rodrigues formula with a second-order Taylor fallback near zero."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R):
    """Axis-angle of a rotation matrix, with a stable branch near angle pi."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < SMALL_ANGLE:
        # R ~ I + hat(w): read off the skew part.
        return 0.5 * np.array([R[2, 1] - R[1, 2],
                               R[0, 2] - R[2, 0],
                               R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # Near pi the sine-based extraction is ill-conditioned; use the
        # diagonal of R + I, whose largest entry gives the axis robustly.
        A = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / np.sqrt(max(A[k, k], 1e-15))
        axis = axis / np.linalg.norm(axis)
        # Fix the sign using the skew part (zero exactly at pi; any sign ok).
        s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, s) < 0:
            axis = -axis
        return axis * theta
    s = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * s


def _so3_left_jacobian(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * W + b * (W @ W)


class Pose:
    """Rigid transform: rotation matrix + translation vector."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation, check=True):
        R = np.array(rotation, dtype=float)
        t = np.array(translation, dtype=float).reshape(3)
        if check:
            if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
                raise GeometryError("non-finite pose")
            if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-7:
                raise GeometryError("rotation not orthonormal")
            if abs(np.linalg.det(R) - 1.0) > 1e-7:
                raise GeometryError("rotation determinant != +1")
        self.rotation = R
        self.translation = t

    @staticmethod
    def identity():
        return Pose(np.eye(3), np.zeros(3), check=False)

    @staticmethod
    def from_rt(rotvec, translation):
        """Pose from an axis-angle rotation vector and a translation vector."""
        return Pose(so3_exp(rotvec), translation, check=False)

    def compose(self, other):
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation,
                    check=False)

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation, check=False)

    def transform(self, points):
        """Apply to a 3-vector or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def reorthonormalize(self):
        U, _, Vt = np.linalg.svd(self.rotation)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return Pose(R, self.translation, check=False)

    def matrix34(self):
        return np.hstack([self.rotation, self.translation.reshape(3, 1)])

    def __repr__(self):
        return f"Pose(t={self.translation}, rotvec={so3_log(self.rotation)})"


def se3_exp(xi):
    """Exponential map: 6-vector (rotation, translation part) -> Pose."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise GeometryError("non-finite twist")
    w, v = xi[:3], xi[3:]
    R = so3_exp(w)
    t = _so3_left_jacobian(w) @ v
    return Pose(R, t, check=False)


def se3_log(pose):
    """Inverse of se3_exp. Rejects non-orthonormal input."""
    R = pose.rotation
    if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-7:
        raise GeometryError("rotation not orthonormal")
    w = so3_log(R)
    V = _so3_left_jacobian(w)
    v = np.linalg.solve(V, pose.translation)
    return np.concatenate([w, v])


class Intrinsics:
    """Pinhole camera parameters."""

    __slots__ = ("fx", "fy", "cx", "cy", "width", "height")

    def __init__(self, fx, fy, cx, cy, width, height):
        if fx <= 0 or fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 < cx < width) or not (0 < cy < height):
            raise GeometryError("principal point outside image")
        self.fx, self.fy = float(fx), float(fy)
        self.cx, self.cy = float(cx), float(cy)
        self.width, self.height = int(width), int(height)

    def scaled(self, factor):
        """Intrinsics for an image downscaled by `factor` (e.g. 0.5)."""
        return Intrinsics(self.fx * factor, self.fy * factor,
                          (self.cx + 0.5) * factor - 0.5,
                          (self.cy + 0.5) * factor - 0.5,
                          max(1, int(round(self.width * factor))),
                          max(1, int(round(self.height * factor))))

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


class StereoRig:
    """Rectified stereo pair: shared intrinsics + baseline along +x."""

    __slots__ = ("intrinsics", "baseline")

    def __init__(self, intrinsics, baseline):
        if baseline <= 0:
            raise GeometryError("baseline must be positive")
        self.intrinsics = intrinsics
        self.baseline = float(baseline)


def project(point, K):
    """Perspective projection of a camera-frame point to pixel coordinates."""
    p = np.asarray(point, dtype=float)
    if p[2] <= EPS_DEPTH:
        raise GeometryError(f"point behind camera (z={p[2]})")
    return np.array([K.fx * p[0] / p[2] + K.cx,
                     K.fy * p[1] / p[2] + K.cy])


def backproject(pixel, depth, K):
    """Pixel + depth -> camera-frame 3D point."""
    if depth <= 0:
        raise GeometryError("depth must be positive")
    u, v = float(pixel[0]), float(pixel[1])
    return np.array([(u - K.cx) / K.fx * depth,
                     (v - K.cy) / K.fy * depth,
                     depth])


def warp_pixel(pixel, depth, T, K):
    """Reproject a pixel with known depth into the target frame.

    Returns (target_pixel, target_depth, valid). Invalid means the warped
    point fell behind the camera or outside the image bounds.
    """
    p = backproject(pixel, depth, K)
    q = T.transform(p)
    if q[2] <= EPS_DEPTH:
        return np.zeros(2), 0.0, False
    px = np.array([K.fx * q[0] / q[2] + K.cx, K.fy * q[1] / q[2] + K.cy])
    valid = (0.0 <= px[0] <= K.width - 1) and (0.0 <= px[1] <= K.height - 1)
    return px, q[2], valid


def sample_bilinear(img, x, y):
    """Bilinear interpolation. Scalar or array coordinates.

    Returns (values, valid) where queries outside [0, W-1] x [0, H-1] are
    flagged invalid and return 0.
    """
    img = np.asarray(img, dtype=float)
    if img.size == 0:
        raise GeometryError("empty image")
    H, W = img.shape
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    valid = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    x0 = np.clip(np.floor(xc).astype(int), 0, W - 2) if W > 1 else np.zeros_like(xc, dtype=int)
    y0 = np.clip(np.floor(yc).astype(int), 0, H - 2) if H > 1 else np.zeros_like(yc, dtype=int)
    ax = xc - x0
    ay = yc - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    val = (img[y0, x0] * (1 - ax) * (1 - ay) + img[y0, x1] * ax * (1 - ay)
           + img[y1, x0] * (1 - ax) * ay + img[y1, x1] * ax * ay)
    val = np.where(valid, val, 0.0)
    if np.isscalar(x) or x.ndim == 0:
        return float(val), bool(valid)
    return val, valid


def disparity_to_depth(disp, rig):
    """z = fx * baseline / d. Returns (depth, valid) masking d <= 1e-6."""
    d = np.asarray(disp, dtype=float)
    valid = np.isfinite(d) & (d > 1e-6)
    safe = np.where(valid, d, 1.0)
    z = rig.intrinsics.fx * rig.baseline / safe
    z = np.where(valid, z, 0.0)
    if d.ndim == 0:
        return float(z), bool(valid)
    return z, valid


def depth_to_disparity(depth, rig):
    """d = fx * baseline / z. Returns (disparity, valid) masking z <= 1e-6."""
    z = np.asarray(depth, dtype=float)
    valid = np.isfinite(z) & (z > 1e-6)
    safe = np.where(valid, z, 1.0)
    d = rig.intrinsics.fx * rig.baseline / safe
    d = np.where(valid, d, 0.0)
    if z.ndim == 0:
        return float(d), bool(valid)
    return d, valid
