"""Training objectives for the disparity learner.

All losses operate on diffops Tensors shaped (B, 1, H, W) and return scalar
tape nodes, so gradients reach every differentiable input. Intensities live
in [0, 1]. Pose inputs are (axis-angle, translation) pairs of 3-vectors.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diffops as dx
from .diffops import Tensor


class DegenerateBatchError(RuntimeError):
    """All pixels of a photometric term were masked out."""


@dataclass
class LossWeights:
    lambda_p: float = 1.0
    lambda_s: float = 0.1
    lambda_gt: float = 1.0
    lambda_sc: float = 1.0
    lambda_g: float = 10.0
    lambda_r: float = 10.0
    lambda_p_star: float = 0.01
    alpha_ssim: float = 0.85

    def __post_init__(self):
        for name in ("lambda_p", "lambda_s", "lambda_gt", "lambda_sc",
                     "lambda_g", "lambda_r", "lambda_p_star"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.alpha_ssim <= 1.0:
            raise ValueError("alpha_ssim must lie in [0, 1]")


@dataclass
class LossReport:
    """Named per-term values plus the weighted total."""
    terms: dict
    total: float
    valid_counts: dict = field(default_factory=dict)

    def csv_header(self):
        return "iteration," + ",".join(sorted(self.terms)) + ",total"

    def csv_row(self, iteration):
        vals = ",".join(f"{self.terms[k]:.9g}" for k in sorted(self.terms))
        return f"{iteration},{vals},{self.total:.9g}"


@dataclass
class TripletBatch:
    """One training minibatch of temporal triplets (tensors are constants)."""
    center: Tensor                 # (B, 1, H, W)
    prev: Tensor
    next: Tensor
    right: Tensor = None           # virtual domain only
    gt_disparity: np.ndarray = None  # (B, 1, H, W), virtual domain only
    gt_mask: np.ndarray = None


_BIG = 1e6


def _box3(x):
    k = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
    return dx.conv2d(x, k)


def pair_photometric(a, b, alpha=0.85):
    """Per-pixel photometric distance: alpha*(1-SSIM)/2 + (1-alpha)*L1.

    SSIM uses a 3x3 block filter with C1=0.01^2, C2=0.03^2; its term is
    zero on the one-pixel border (only the L1 part contributes there).
    """
    if a.data.shape != b.data.shape:
        raise dx.DiffopsError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    l1 = dx.abs_(dx.sub(a, b))
    if alpha == 0.0:
        return l1
    C1, C2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = _box3(a), _box3(b)
    var_a = dx.sub(_box3(dx.mul(a, a)), dx.mul(mu_a, mu_a))
    var_b = dx.sub(_box3(dx.mul(b, b)), dx.mul(mu_b, mu_b))
    cov = dx.sub(_box3(dx.mul(a, b)), dx.mul(mu_a, mu_b))
    num = dx.mul(dx.add(dx.mul(dx.mul(mu_a, mu_b), 2.0), C1),
                 dx.add(dx.mul(cov, 2.0), C2))
    den = dx.mul(dx.add(dx.add(dx.mul(mu_a, mu_a), dx.mul(mu_b, mu_b)), C1),
                 dx.add(dx.add(var_a, var_b), C2))
    dssim = dx.mul(dx.sub(Tensor(1.0), dx.div(num, den)), 0.5)
    return dx.add(dx.mul(dx.pad2d(dssim, 1), alpha), dx.mul(l1, 1.0 - alpha))


def _erode3(mask):
    """3x3 erosion of a boolean (B, 1, H, W) mask, edge-extended."""
    m = np.pad(mask, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.ones_like(mask, dtype=bool)
    for dy in range(3):
        for dx_ in range(3):
            out &= m[:, :, dy:dy + mask.shape[2], dx_:dx_ + mask.shape[3]]
    return out


def _pixel_grid(H, W):
    gx, gy = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    return gx, gy


def _warp_branch(center_item, neighbor, item, rotvec, trans, depth_item, K,
                 alpha):
    """Warp one neighbor frame of one batch item; returns (loss map, mask)."""
    coords, valid_proj = dx.reproject_coords(rotvec, trans, depth_item, K)
    coords4 = dx.reshape(coords, (1, 2) + depth_item.data.shape)
    neighbor_item = dx.take(neighbor, (slice(item, item + 1),))
    warped, valid_sample = dx.sample_grid(neighbor_item, coords4)
    mask = _erode3((valid_proj[None, None] & valid_sample[:, None]))
    return pair_photometric(center_item, warped, alpha), mask


def _masked_min_mean(maps_and_masks):
    """Per-pixel min over branches (invalid branches excluded), masked mean."""
    combined = None
    union = None
    for loss_map, mask in maps_and_masks:
        m = Tensor(mask.astype(float))
        guarded = dx.add(dx.mul(loss_map, m),
                         Tensor((1.0 - mask.astype(float)) * _BIG))
        combined = guarded if combined is None else dx.min2(combined, guarded)
        union = mask if union is None else (union | mask)
    count = int(union.sum())
    if count == 0:
        raise DegenerateBatchError("no valid pixels in photometric term")
    total = dx.sum_(dx.mul(combined, Tensor(union.astype(float))))
    return dx.mul(total, 1.0 / count), count, combined, union


def temporal_photometric(triplet, disparity, poses, rig, alpha=0.85,
                         return_details=False):
    """Min-over-neighbors reprojection loss, depth via the virtual baseline.

    poses[delta][item] is a (rotvec, trans) pair of (3,) tensors mapping the
    center camera into neighbor `delta` (0 = prev, 1 = next). Depth comes
    from disparity as z = fx * t_b / d for both domains, which is what ties
    the predicted disparities to a single metric scale.
    """
    K = rig.intrinsics
    B = triplet.center.data.shape[0]
    c = K.fx * rig.baseline
    per_item = []
    details = []
    for i in range(B):
        center_item = dx.take(triplet.center, (slice(i, i + 1),))
        disp_item = dx.reshape(dx.take(disparity, (i, 0)), disparity.data.shape[2:])
        depth_item = dx.div(Tensor(c), disp_item)
        branches = []
        for delta, neighbor in enumerate((triplet.prev, triplet.next)):
            rotvec, trans = poses[delta][i]
            branches.append(_warp_branch(center_item, neighbor, i, rotvec,
                                         trans, depth_item, K, alpha))
        mean_i, count, combined, union = _masked_min_mean(branches)
        per_item.append(mean_i)
        details.append({"branches": branches, "combined": combined,
                        "union": union, "count": count})
    total = per_item[0]
    for t in per_item[1:]:
        total = dx.add(total, t)
    loss = dx.mul(total, 1.0 / B)
    if return_details:
        return loss, details
    return loss


def smoothness(disparity, image):
    """Edge-aware disparity smoothness: mean of |dD| * exp(-|dI|)."""
    d = disparity
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=float)
    if d.data.shape[2:] != img.shape[2:]:
        raise dx.DiffopsError(
            f"spatial dims differ: {d.data.shape} vs {img.shape}")
    B, _, H, W = d.data.shape
    wx = np.exp(-np.abs(img[:, :, :, 1:] - img[:, :, :, :-1]))
    wy = np.exp(-np.abs(img[:, :, 1:, :] - img[:, :, :-1, :]))
    ddx = dx.abs_(dx.sub(dx.take(d, (slice(None), slice(None), slice(None), slice(1, None))),
                         dx.take(d, (slice(None), slice(None), slice(None), slice(0, -1)))))
    ddy = dx.abs_(dx.sub(dx.take(d, (slice(None), slice(None), slice(1, None), slice(None))),
                         dx.take(d, (slice(None), slice(None), slice(0, -1), slice(None)))))
    total = dx.add(dx.sum_(dx.mul(ddx, Tensor(wx))),
                   dx.sum_(dx.mul(ddy, Tensor(wy))))
    return dx.mul(total, 1.0 / (B * H * W))


def disparity_supervision(pred, gt, mask=None):
    """Mean L1 between predicted and ground-truth disparity on valid pixels."""
    gt = np.asarray(gt, dtype=float)
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise DegenerateBatchError("empty supervision mask")
    diff = dx.abs_(dx.sub(pred, Tensor(gt)))
    return dx.mul(dx.sum_(dx.mul(diff, Tensor(mask.astype(float)))), 1.0 / count)


def stereo_consistency(left, right, disparity, alpha=0.85):
    """Photometric distance between the left image and the right image
    sampled at x - d (right camera displaced along +x)."""
    B, _, H, W = left.data.shape
    gx, gy = _pixel_grid(H, W)
    xmap = dx.sub(Tensor(np.broadcast_to(gx, (B, 1, H, W)).copy()), disparity)
    ymap = Tensor(np.broadcast_to(gy, (B, 1, H, W)).copy())
    coords = dx.concat([xmap, ymap], axis=1)
    warped, valid = dx.sample_grid(right, coords)
    mask = _erode3(valid[:, None])
    count = int(mask.sum())
    if count == 0:
        raise DegenerateBatchError("stereo warp fully out of bounds")
    loss_map = pair_photometric(left, warped, alpha)
    total = dx.sum_(dx.mul(loss_map, Tensor(mask.astype(float))))
    return dx.mul(total, 1.0 / count)


def adversarial_loss(disc, f_real, f_virtual):
    """Critic-style adversarial loss: E[M(F_r)] - E[M(F_v)], on the tape."""
    return dx.sub(dx.mean(disc.forward(f_real)), dx.mean(disc.forward(f_virtual)))


def gradient_penalty(disc, f_real, f_virtual, epsilon):
    """(||grad_F M(F~)||_2 - 1)^2 at F~ = eps*F_r + (1-eps)*F_v.

    The feature gradient is the discriminator's closed form; the returned
    interpolates allow the caller to finite-difference the discriminator
    parameters. Mean over the batch.
    """
    f_r = f_real.data if isinstance(f_real, Tensor) else np.asarray(f_real, dtype=float)
    f_v = f_virtual.data if isinstance(f_virtual, Tensor) else np.asarray(f_virtual, dtype=float)
    eps = np.asarray(epsilon, dtype=float).reshape(-1, 1, 1, 1)
    f_tilde = eps * f_r + (1.0 - eps) * f_v
    g = disc.input_gradient(f_tilde)
    norms = np.sqrt(np.sum(g.reshape(g.shape[0], -1) ** 2, axis=1))
    return float(np.mean((norms - 1.0) ** 2)), f_tilde


def penalty_value(disc, f_tilde):
    """Gradient-penalty value at fixed interpolates (for parameter FD)."""
    g = disc.input_gradient(f_tilde)
    norms = np.sqrt(np.sum(g.reshape(g.shape[0], -1) ** 2, axis=1))
    return float(np.mean((norms - 1.0) ** 2))


def reconstruction(image, encoded):
    """Self-encoding penalty: per-pixel mean of squared error.

    The squared-L2 sum equals this value times the pixel count; both are
    reported so the weight stays comparable across resolutions.
    """
    diff = dx.sub(image, encoded)
    return dx.mean(dx.mul(diff, diff))


def task_loss(real, virt, d_real, d_virt, poses_real, poses_virt, rig,
              weights):
    """Weighted sum of photometric, smoothness, supervision and stereo terms.

    `real` may be None (virtual-only training); every term it contributes is
    then zero. Returns (scalar tape node, LossReport).
    """
    terms = {}
    counts = {}
    zero = Tensor(0.0)
    alpha = weights.alpha_ssim

    if real is not None:
        pc_r = temporal_photometric(real, d_real, poses_real, rig, alpha)
        s_r = smoothness(d_real, real.center)
    else:
        pc_r, s_r = zero, zero
    if virt is not None:
        pc_v = temporal_photometric(virt, d_virt, poses_virt, rig, alpha)
        s_v = smoothness(d_virt, virt.center)
        gt_v = disparity_supervision(d_virt, virt.gt_disparity, virt.gt_mask)
        sc_v = stereo_consistency(virt.center, virt.right, d_virt, alpha)
    else:
        pc_v, s_v, gt_v, sc_v = zero, zero, zero, zero

    total = dx.add(
        dx.add(dx.mul(dx.add(pc_r, pc_v), weights.lambda_p),
               dx.mul(dx.add(s_r, s_v), weights.lambda_s)),
        dx.add(dx.mul(gt_v, weights.lambda_gt), dx.mul(sc_v, weights.lambda_sc)))

    terms["pc_real"] = float(pc_r.data)
    terms["pc_virtual"] = float(pc_v.data)
    terms["smooth_real"] = float(s_r.data)
    terms["smooth_virtual"] = float(s_v.data)
    terms["disp_gt"] = float(gt_v.data)
    terms["stereo_sc"] = float(sc_v.data)
    report_total = (weights.lambda_p * (terms["pc_real"] + terms["pc_virtual"])
                    + weights.lambda_s * (terms["smooth_real"] + terms["smooth_virtual"])
                    + weights.lambda_gt * terms["disp_gt"]
                    + weights.lambda_sc * terms["stereo_sc"])
    return total, LossReport(terms=terms, total=report_total, valid_counts=counts)


def backward_reinforcement(triplet, disparity, poses_star, rig, alpha=0.85):
    """Photometric regularization against fixed backend poses.

    Identical computation to temporal_photometric but the poses carry no
    gradient. Items whose backend pose is missing (None) are skipped; the
    skip count is returned alongside the loss.
    """
    B = triplet.center.data.shape[0]
    usable = [i for i in range(B)
              if poses_star[0][i] is not None and poses_star[1][i] is not None]
    skipped = B - len(usable)
    if not usable:
        raise DegenerateBatchError("no backend poses available for this batch")
    K = rig.intrinsics
    c = K.fx * rig.baseline
    per_item = []
    for i in usable:
        center_item = dx.take(triplet.center, (slice(i, i + 1),))
        disp_item = dx.reshape(dx.take(disparity, (i, 0)), disparity.data.shape[2:])
        depth_item = dx.div(Tensor(c), disp_item)
        branches = []
        for delta, neighbor in enumerate((triplet.prev, triplet.next)):
            rotvec, trans = poses_star[delta][i]
            rv = Tensor(rotvec.data if isinstance(rotvec, Tensor) else rotvec)
            tv = Tensor(trans.data if isinstance(trans, Tensor) else trans)
            branches.append(_warp_branch(center_item, neighbor, i, rv, tv,
                                         depth_item, K, alpha))
        mean_i, _, _, _ = _masked_min_mean(branches)
        per_item.append(mean_i)
    total = per_item[0]
    for t in per_item[1:]:
        total = dx.add(total, t)
    return dx.mul(total, 1.0 / len(usable)), skipped
