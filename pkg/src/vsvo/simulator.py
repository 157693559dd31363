"""Synthetic two-domain dataset generation.

A scene is a textured height-field relief (depths over a base plane) facing
the camera; frames are ray-cast against it, which yields exact ground-truth
depth per pixel. The virtual domain carries stereo pairs and ground-truth
disparity; the real domain exposes only monocular left images to training
consumers, with its ground truth reserved for evaluation.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, StereoRig, depth_to_disparity
from . import imageio


class SimulatorError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Procedural value noise (deterministic integer-lattice hash, quintic fade)

_M = np.uint64(0xFFFFFFFFFFFFFFFF)


def _hash01(ix, iy, seed):
    with np.errstate(over="ignore"):
        h = (np.asarray(ix).astype(np.uint64) * np.uint64(374761393)
             + np.asarray(iy).astype(np.uint64) * np.uint64(668265263)) & _M
        h = (h ^ np.uint64(seed * 2654435761 % 2**63)) & _M
        h = (h * np.uint64(1274126177)) & _M
        h = h ^ (h >> np.uint64(31))
        h = (h * np.uint64(0x9E3779B97F4A7C15)) & _M
        h = h ^ (h >> np.uint64(33))
    return (h >> np.uint64(11)).astype(float) / float(1 << 53)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(x, y, seed, wavelengths, amplitudes):
    """Multi-octave value noise in roughly [-1, 1], C2-smooth."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    total = np.zeros_like(x)
    norm = 0.0
    for octave, (lam, amp) in enumerate(zip(wavelengths, amplitudes)):
        gx = x / lam + 1000.0
        gy = y / lam + 1000.0
        ix = np.floor(gx).astype(np.int64)
        iy = np.floor(gy).astype(np.int64)
        fx = _fade(gx - ix)
        fy = _fade(gy - iy)
        s = seed * 131 + octave
        v00 = _hash01(ix, iy, s)
        v01 = _hash01(ix + 1, iy, s)
        v10 = _hash01(ix, iy + 1, s)
        v11 = _hash01(ix + 1, iy + 1, s)
        v = (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
             + v10 * (1 - fx) * fy + v11 * fx * fy)
        total += amp * (2.0 * v - 1.0)
        norm += amp
    return total / norm


# ---------------------------------------------------------------------------
# Scene and appearance

@dataclass
class Scene:
    """Height-field relief: per-cell depth over a base plane, plus texture."""
    seed: int
    depth_grid: np.ndarray        # (H_s, W_s) depths
    extent: tuple                 # (x_min, x_max, y_min, y_max) world units
    z_range: tuple                # (z_min, z_max)
    texture_wavelengths: tuple = (8.0, 4.0, 2.0)
    texture_amplitudes: tuple = (0.5, 0.3, 0.2)

    def surface_depth(self, x, y):
        """Bilinear depth lookup, clamp-extended beyond the grid."""
        x_min, x_max, y_min, y_max = self.extent
        H, W = self.depth_grid.shape
        gx = np.clip((np.asarray(x) - x_min) / (x_max - x_min) * (W - 1), 0, W - 1)
        gy = np.clip((np.asarray(y) - y_min) / (y_max - y_min) * (H - 1), 0, H - 1)
        x0 = np.clip(np.floor(gx).astype(int), 0, W - 2)
        y0 = np.clip(np.floor(gy).astype(int), 0, H - 2)
        ax, ay = gx - x0, gy - y0
        g = self.depth_grid
        return (g[y0, x0] * (1 - ax) * (1 - ay) + g[y0, x0 + 1] * ax * (1 - ay)
                + g[y0 + 1, x0] * (1 - ax) * ay + g[y0 + 1, x0 + 1] * ax * ay)

    def albedo(self, x, y):
        n = value_noise(x, y, self.seed * 7 + 3,
                        self.texture_wavelengths, self.texture_amplitudes)
        return 0.5 + 0.35 * n


def build_scene(seed, grid_dims=(96, 128), depth_range=(6.0, 10.0),
                extent=(-14.0, 14.0, -10.0, 10.0), relief_wavelength=8.0):
    """Deterministic scene for a given seed."""
    z_min, z_max = depth_range
    if z_min < 1.0:
        raise SimulatorError("z_min must be >= 1")
    H, W = grid_dims
    if H < 2 or W < 2:
        raise SimulatorError(f"degenerate scene grid {grid_dims}")
    x_min, x_max, y_min, y_max = extent
    xs = np.linspace(x_min, x_max, W)
    ys = np.linspace(y_min, y_max, H)
    X, Y = np.meshgrid(xs, ys)
    mid = 0.5 * (z_min + z_max)
    amp = 0.45 * (z_max - z_min)
    relief = value_noise(X, Y, seed, (relief_wavelength, relief_wavelength / 2),
                         (0.7, 0.3))
    grid = np.clip(mid + amp * relief, z_min, z_max)
    return Scene(seed=seed, depth_grid=grid, extent=extent, z_range=depth_range)


@dataclass
class DomainAppearance:
    """Monotone intensity transform + additive noise; models the domain gap."""
    gamma: float = 1.0
    brightness: float = 0.0
    noise_sigma: float = 0.0
    curve_knots: tuple = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.curve_knots, self.curve_knots[1:])):
            raise SimulatorError("curve knots must be strictly increasing")
        if self.gamma <= 0:
            raise SimulatorError("gamma must be positive")

    def apply(self, img, rng=None):
        y = np.clip(img, 0.0, 1.0) ** self.gamma
        y = np.interp(y, [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], self.curve_knots)
        y = y + self.brightness
        if self.noise_sigma > 0 and rng is not None:
            y = y + rng.normal(0.0, self.noise_sigma, size=y.shape)
        return np.clip(y, 0.0, 1.0)

    def is_identity(self):
        return (self.gamma == 1.0 and self.brightness == 0.0
                and self.noise_sigma == 0.0
                and self.curve_knots == (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0))


IDENTITY_APPEARANCE = DomainAppearance()


@dataclass
class TrajectorySpec:
    n_frames: int = 60
    speed: float = 0.04           # scene units per frame
    yaw_rate_bound: float = 0.004  # rad per frame
    lateral_bob: float = 0.003
    seed: int = 0


def generate_trajectory(spec):
    """Camera-to-world poses: forward motion with a smooth yaw random walk."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xA11CE)))
    poses = []
    pos = np.zeros(3)
    yaw = 0.0
    yaw_rate = 0.0
    for i in range(spec.n_frames):
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        poses.append(Pose(R, pos.copy(), check=False))
        yaw_rate = np.clip(0.7 * yaw_rate + 0.3 * rng.uniform(
            -spec.yaw_rate_bound, spec.yaw_rate_bound),
            -spec.yaw_rate_bound, spec.yaw_rate_bound)
        yaw += yaw_rate
        bob = spec.lateral_bob * rng.uniform(-1.0, 1.0)
        step = R @ np.array([bob, 0.0, 1.0])
        pos = pos + spec.speed * step / np.linalg.norm(step)
    return poses


# ---------------------------------------------------------------------------
# Rendering

_MARCH_STEPS = 96
_BISECT_ITERS = 45


def render_frame(scene, pose, K, appearance=IDENTITY_APPEARANCE, rng=None):
    """Ray-cast one frame. Returns (image, depth, valid_mask).

    Depth is the exact camera-frame z of the surface intersection; rays with
    non-positive forward component (or no root) are flagged invalid.
    """
    u, v = np.meshgrid(np.arange(K.width, dtype=float),
                       np.arange(K.height, dtype=float))
    hbar = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)])
    d = np.einsum("ij,jhw->ihw", pose.rotation, hbar)
    o = pose.translation
    dz = d[2]
    castable = dz > 1e-6
    dz_safe = np.where(castable, dz, 1.0)
    z_min, z_max = scene.z_range
    s_hi = (z_max + 1.0 - o[2]) / dz_safe
    s_lo = np.maximum((z_min - 1.0 - o[2]) / dz_safe, 0.05)

    def f(s):
        px = o[0] + s * d[0]
        py = o[1] + s * d[1]
        pz = o[2] + s * dz
        return pz - scene.surface_depth(px, py)

    # Coarse march to bracket the first crossing, then bisect.
    lo = s_lo.copy()
    hi = s_hi.copy()
    found = np.zeros_like(dz, dtype=bool)
    prev_s = s_lo
    prev_f = f(s_lo)
    for k in range(1, _MARCH_STEPS + 1):
        s_k = s_lo + (s_hi - s_lo) * (k / _MARCH_STEPS)
        f_k = f(s_k)
        cross = (~found) & (prev_f <= 0) & (f_k >= 0)
        lo = np.where(cross, prev_s, lo)
        hi = np.where(cross, s_k, hi)
        found |= cross
        prev_s, prev_f = s_k, f_k
    valid = castable & found
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        lo = np.where(f_mid < 0, mid, lo)
        hi = np.where(f_mid < 0, hi, mid)
    s_hit = 0.5 * (lo + hi)
    depth = np.where(valid, s_hit, 0.0)
    hx = o[0] + s_hit * d[0]
    hy = o[1] + s_hit * d[1]
    img = np.where(valid, scene.albedo(hx, hy), 0.0)
    img = appearance.apply(img, rng)
    return img, depth, valid


# ---------------------------------------------------------------------------
# Sequence bundles

@dataclass
class TrainingView:
    """What the learner is allowed to see."""
    domain: str
    images: list
    rig: StereoRig
    right_images: list = None
    gt_disparity: list = None


@dataclass
class SequenceBundle:
    domain: str                   # "virtual" | "real"
    images: list                  # left grayscale, float in [0, 1]
    rig: StereoRig
    gt_poses: list                # camera-to-world; evaluation-only for real
    gt_depth: list
    gt_disparity: list = None
    right_images: list = None
    appearance: DomainAppearance = field(default_factory=DomainAppearance)

    def training_view(self):
        if self.domain == "real":
            return TrainingView(domain="real", images=self.images, rig=self.rig)
        return TrainingView(domain="virtual", images=self.images, rig=self.rig,
                            right_images=self.right_images,
                            gt_disparity=self.gt_disparity)


def _frame_rng(seed, frame_index, tag):
    return np.random.default_rng(np.random.SeedSequence((seed, frame_index, tag)))


def _check_coverage(valid):
    frac = float(np.mean(valid))
    if frac < 0.5:
        raise SimulatorError(
            f"trajectory leaves the scene: only {frac:.0%} of pixels hit the surface")


def generate_virtual_sequence(scene, traj, rig, appearance, n=None, seed=0):
    """Stereo left/right pairs with ground-truth disparity and poses."""
    n = traj.n_frames if n is None else n
    if n < 3:
        raise SimulatorError("need at least 3 frames")
    spec = TrajectorySpec(n_frames=n, speed=traj.speed,
                          yaw_rate_bound=traj.yaw_rate_bound,
                          lateral_bob=traj.lateral_bob, seed=traj.seed)
    poses = generate_trajectory(spec)
    K = rig.intrinsics
    right_offset = Pose(np.eye(3), np.array([rig.baseline, 0.0, 0.0]), check=False)
    images, rights, depths, disps = [], [], [], []
    for i, pose in enumerate(poses):
        img, depth, valid = render_frame(scene, pose, K, appearance,
                                         _frame_rng(seed, i, 1))
        _check_coverage(valid)
        right_pose = pose.compose(right_offset)
        img_r, _, _ = render_frame(scene, right_pose, K, appearance,
                                   _frame_rng(seed, i, 2))
        disp, _ = depth_to_disparity(np.where(valid, depth, 0.0), rig)
        images.append(img)
        rights.append(img_r)
        depths.append(depth)
        disps.append(disp)
    return SequenceBundle(domain="virtual", images=images, rig=rig,
                          gt_poses=poses, gt_depth=depths, gt_disparity=disps,
                          right_images=rights, appearance=appearance)


def generate_real_sequence(scene, traj, rig, appearance, n=None, seed=0):
    """Monocular sequence; ground truth retained for evaluation only."""
    bundle = generate_virtual_sequence(scene, traj, rig, appearance, n=n,
                                       seed=seed + 0x5EA1)
    return SequenceBundle(domain="real", images=bundle.images, rig=rig,
                          gt_poses=bundle.gt_poses, gt_depth=bundle.gt_depth,
                          gt_disparity=bundle.gt_disparity,
                          right_images=None, appearance=appearance)


# ---------------------------------------------------------------------------
# Dataset directories

def write_bundle(bundle, root):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "disp_gt"), exist_ok=True)
    for i, img in enumerate(bundle.images):
        imageio.write_pgm(os.path.join(root, "images", f"{i:06d}.pgm"), img)
        imageio.write_pfm(os.path.join(root, "disp_gt", f"{i:06d}.pfm"),
                          bundle.gt_disparity[i])
    if bundle.domain == "virtual":
        os.makedirs(os.path.join(root, "right"), exist_ok=True)
        for i, img in enumerate(bundle.right_images):
            imageio.write_pgm(os.path.join(root, "right", f"{i:06d}.pgm"), img)
    imageio.write_kitti_poses(os.path.join(root, "poses_gt.txt"), bundle.gt_poses)
    imageio.write_calib(os.path.join(root, "calib.txt"), bundle.rig)
    with open(os.path.join(root, "domain.txt"), "w") as f:
        f.write(bundle.domain + "\n")


def read_bundle(root):
    with open(os.path.join(root, "domain.txt")) as f:
        domain = f.read().strip()
    img_dir = os.path.join(root, "images")
    names = sorted(os.listdir(img_dir))
    images = [imageio.read_pgm(os.path.join(img_dir, n)) for n in names]
    h, w = images[0].shape
    rig = imageio.read_calib(os.path.join(root, "calib.txt"), w, h)
    poses = imageio.read_kitti_poses(os.path.join(root, "poses_gt.txt"))
    disps = [imageio.read_pfm(os.path.join(root, "disp_gt", n.replace(".pgm", ".pfm")))
             for n in names]
    from .geometry import disparity_to_depth
    depths = []
    for d in disps:
        z, valid = disparity_to_depth(d, rig)
        depths.append(np.where(valid, z, 0.0))
    rights = None
    if domain == "virtual":
        rights = [imageio.read_pgm(os.path.join(root, "right", n)) for n in names]
    return SequenceBundle(domain=domain, images=images, rig=rig, gt_poses=poses,
                          gt_depth=depths, gt_disparity=disps, right_images=rights)
