"""Toy-scale disparity/pose/encoder/critic networks and the training loops.

The pipeline follows the three-phase update schedule: per iteration one
critic ascent step, k_s encoder steps, one disparity+pose step; afterwards
k_f mutual-reinforcement rounds alternate backend odometry runs with
finetuning of the disparity and pose networks only.
"""

from dataclasses import dataclass

import numpy as np

from . import diffops as dx
from . import losses as L
from .diffops import Tensor
from .geometry import so3_log


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Parameters and optimizer

def _conv_init(rng, out_c, in_c, k=3):
    scale = 1.0 / np.sqrt(in_c * k * k)
    w = Tensor(rng.uniform(-scale, scale, (out_c, in_c, k, k)), requires_grad=True)
    b = Tensor(np.zeros(out_c), requires_grad=True)
    return w, b


def _affine_init(rng, in_f, out_f):
    scale = 1.0 / np.sqrt(in_f)
    w = Tensor(rng.uniform(-scale, scale, (in_f, out_f)), requires_grad=True)
    b = Tensor(np.zeros(out_f), requires_grad=True)
    return w, b


class Module:
    """Named parameter container."""

    def named_params(self):
        return list(self._params.items())

    def params(self):
        return [p for _, p in self._params.items()]

    def param_hash(self):
        import hashlib
        h = hashlib.sha256()
        for name, p in sorted(self._params.items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class SharedEncoder(Module):
    """3-layer conv stack mapping an image into the shared feature space
    (image-shaped output)."""

    def __init__(self, rng):
        w1, b1 = _conv_init(rng, 8, 1)
        w2, b2 = _conv_init(rng, 8, 8)
        w3, b3 = _conv_init(rng, 1, 8)
        self._params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2,
                        "w3": w3, "b3": b3}

    def forward(self, x):
        p = self._params
        h = dx.tanh(dx.conv2d(x, p["w1"], p["b1"], padding=1))
        h = dx.tanh(dx.conv2d(h, p["w2"], p["b2"], padding=1))
        return dx.conv2d(h, p["w3"], p["b3"], padding=1)


class DisparityDecoder(Module):
    """4-layer conv stack; output bounded to (0, d_max) by a scaled sigmoid."""

    def __init__(self, rng, d_max):
        self.d_max = float(d_max)
        w1, b1 = _conv_init(rng, 16, 1)
        w2, b2 = _conv_init(rng, 16, 16)
        w3, b3 = _conv_init(rng, 16, 16)
        w4, b4 = _conv_init(rng, 1, 16)
        self._params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2,
                        "w3": w3, "b3": b3, "w4": w4, "b4": b4}

    def forward(self, f):
        p = self._params
        h = dx.tanh(dx.conv2d(f, p["w1"], p["b1"], padding=1))
        h = dx.tanh(dx.conv2d(h, p["w2"], p["b2"], padding=1))
        h = dx.tanh(dx.conv2d(h, p["w3"], p["b3"], padding=1))
        return dx.mul(dx.sigmoid(dx.conv2d(h, p["w4"], p["b4"], padding=1)),
                      self.d_max)


class PoseRegressor(Module):
    """Conv stack on a concatenated frame pair -> 6-vector (rotvec, trans),
    scaled by 0.01 so the initial poses are near identity."""

    OUTPUT_SCALE = 0.01

    def __init__(self, rng):
        w1, b1 = _conv_init(rng, 8, 2)
        w2, b2 = _conv_init(rng, 8, 8)
        w3, b3 = _conv_init(rng, 8, 8)
        wa, ba = _affine_init(rng, 8, 6)
        self._params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2,
                        "w3": w3, "b3": b3, "wa": wa, "ba": ba}

    def forward(self, pair):
        p = self._params
        h = dx.tanh(dx.conv2d(pair, p["w1"], p["b1"], stride=2, padding=1))
        h = dx.tanh(dx.conv2d(h, p["w2"], p["b2"], stride=2, padding=1))
        h = dx.tanh(dx.conv2d(h, p["w3"], p["b3"], stride=2, padding=1))
        pooled = dx.global_avg_pool(h)
        return dx.mul(dx.affine(pooled, p["wa"], p["ba"]), self.OUTPUT_SCALE)


class Discriminator(Module):
    """Critic on shared features: global average pool -> two affine layers.

    Depends on the input only through its global mean, so the feature
    gradient has a closed form (constant per sample).
    """

    def __init__(self, rng):
        w1, b1 = _affine_init(rng, 1, 16)
        w2, b2 = _affine_init(rng, 16, 1)
        self._params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
        assert sum(p.data.size for p in self.params()) <= 2000

    def forward(self, f):
        p = self._params
        pooled = dx.global_avg_pool(f)  # (B, 1)
        h = dx.tanh(dx.affine(pooled, p["w1"], p["b1"]))
        return dx.affine(h, p["w2"], p["b2"])

    def value(self, f_np):
        p = self._params
        m = np.mean(f_np, axis=(1, 2, 3), keepdims=False).reshape(-1, 1)
        h = np.tanh(m @ p["w1"].data + p["b1"].data)
        return (h @ p["w2"].data + p["b2"].data).reshape(-1)

    def calibrate_sign(self, f_real, f_virtual):
        """Flip the output layer so real scores are above virtual ones.

        The critic sees its input only through a scalar mean, so negating
        the output layer is an exact symmetry of the architecture. The
        gradient penalty blocks sign changes during training (zero slope
        costs (0-1)^2), and on the losing branch the encoder's alignment
        gradient points away from the other domain instead of toward it,
        so the game must stay on the winning branch: at initialization a
        bad draw starts there, and once the encoder aligns the domains it
        can overshoot past the crossing, after which the signed gap goes
        negative and widens without bound. Applied before every critic
        step; it is a no-op unless the ordering has crossed. Returns True
        if the sign was flipped.
        """
        gap = float(np.mean(self.value(f_real))
                    - np.mean(self.value(f_virtual)))
        if gap < 0.0:
            self._params["w2"].data *= -1.0
            self._params["b2"].data *= -1.0
            return True
        return False

    def input_gradient(self, f_np):
        """Closed-form d(output_i)/d(F_i): uniform over pixels per sample."""
        p = self._params
        B = f_np.shape[0]
        n = f_np[0].size
        m = np.mean(f_np, axis=(1, 2, 3)).reshape(-1, 1)
        h = np.tanh(m @ p["w1"].data + p["b1"].data)          # (B, 16)
        dh = (1.0 - h ** 2) * p["w1"].data[0][None, :]        # (B, 16)
        dval = dh @ p["w2"].data                               # (B, 1)
        return np.broadcast_to((dval / n).reshape(B, 1, 1, 1),
                               f_np.shape).copy()


class Adam:
    """Moment-based updates; decay constants 0.9/0.999, epsilon 1e-8."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def step_with_grads(self, grads):
        """Like step() but with explicit gradient arrays (used for the
        finite-differenced gradient-penalty term)."""
        for p, g in zip(self.params, grads):
            p.grad[...] = g
        self.step()


# ---------------------------------------------------------------------------
# Network bundle and checkpoints

@dataclass
class LearnerNets:
    ms: SharedEncoder
    md: DisparityDecoder
    mp: PoseRegressor
    madv: Discriminator

    @staticmethod
    def create(seed, d_max):
        root = np.random.SeedSequence((seed, 0x11E7))
        r = [np.random.default_rng(s) for s in root.spawn(4)]
        return LearnerNets(ms=SharedEncoder(r[0]),
                           md=DisparityDecoder(r[1], d_max),
                           mp=PoseRegressor(r[2]),
                           madv=Discriminator(r[3]))

    def named_params(self):
        out = []
        for prefix, mod in (("ms", self.ms), ("md", self.md),
                            ("mp", self.mp), ("madv", self.madv)):
            out.extend((f"{prefix}.{n}", p) for n, p in mod.named_params())
        return out

    def predict_disparity(self, image):
        """(H, W) numpy image -> (H, W) disparity prediction."""
        x = Tensor(image[None, None])
        return self.md.forward(self.ms.forward(x)).data[0, 0]


def save_checkpoint(path, nets):
    """Text header of named shapes + flat little-endian float64 stream."""
    named = nets.named_params()
    meta = [("d_max", np.array([nets.md.d_max]))]
    with open(path, "wb") as f:
        entries = meta + [(n, p.data) for n, p in named]
        f.write(f"{len(entries)}\n".encode("ascii"))
        for name, arr in entries:
            dims = " ".join(str(d) for d in arr.shape)
            f.write(f"{name} {dims}\n".encode("ascii"))
        for _, arr in entries:
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path, seed=0):
    with open(path, "rb") as f:
        count = int(f.readline())
        shapes = []
        for _ in range(count):
            parts = f.readline().split()
            shapes.append((parts[0].decode(), tuple(int(x) for x in parts[1:])))
        arrays = {}
        for name, shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
    d_max = float(arrays.pop("d_max")[0])
    nets = LearnerNets.create(seed, d_max)
    for name, p in nets.named_params():
        p.data[...] = arrays[name]
    return nets


# ---------------------------------------------------------------------------
# Batching

@dataclass
class TrainConfig:
    n_train: int = 2000
    k_s: int = 5
    k_f: int = 5
    n_finetune: int = 200
    lr_da: float = 1e-4
    lr_mr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    seed: int = 0
    warmstart_encoder: int = 500
    warmstart_task: int = 500
    adversarial: bool = True
    fd_step: float = 1e-5

    def __post_init__(self):
        for name in ("n_train", "k_s", "k_f", "n_finetune", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _stack(images, indices):
    return Tensor(np.stack([images[i] for i in indices])[:, None])


def sample_triplet_batch(view, rng, batch_size):
    """Random temporal triplets from one training view."""
    n = len(view.images)
    idx = rng.integers(1, n - 1, size=batch_size)
    batch = L.TripletBatch(
        center=_stack(view.images, idx),
        prev=_stack(view.images, idx - 1),
        next=_stack(view.images, idx + 1))
    if view.domain == "virtual":
        batch.right = _stack(view.right_images, idx)
        batch.gt_disparity = np.stack([view.gt_disparity[i] for i in idx])[:, None]
        batch.gt_mask = batch.gt_disparity > 1e-6
    return batch, idx


def predict_poses(mp, batch):
    """Pose network on (center, prev) and (center, next) pairs.

    Returns poses[delta][item] = (rotvec Tensor(3,), trans Tensor(3,)).
    """
    B = batch.center.data.shape[0]
    poses = []
    for neighbor in (batch.prev, batch.next):
        out = mp.forward(dx.concat([batch.center, neighbor], axis=1))
        per_item = []
        for i in range(B):
            rv = dx.reshape(dx.take(out, (slice(i, i + 1), slice(0, 3))), (3,))
            tv = dx.reshape(dx.take(out, (slice(i, i + 1), slice(3, 6))), (3,))
            per_item.append((rv, tv))
        poses.append(per_item)
    return poses


def _task_forward(nets, real_batch, virt_batch, rig, weights):
    d_real = poses_real = None
    if real_batch is not None:
        d_real = nets.md.forward(nets.ms.forward(real_batch.center))
        poses_real = predict_poses(nets.mp, real_batch)
    d_virt = poses_virt = None
    if virt_batch is not None:
        d_virt = nets.md.forward(nets.ms.forward(virt_batch.center))
        poses_virt = predict_poses(nets.mp, virt_batch)
    return L.task_loss(real_batch, virt_batch, d_real, d_virt,
                       poses_real, poses_virt, rig, weights)


def forward_pass(nets, real_batch, virt_batch, rig):
    """All network outputs of one minibatch on a single tape."""
    f_r = nets.ms.forward(real_batch.center)
    f_v = nets.ms.forward(virt_batch.center)
    return {
        "f_real": f_r,
        "f_virtual": f_v,
        "d_real": nets.md.forward(f_r),
        "d_virtual": nets.md.forward(f_v),
        "poses_real": predict_poses(nets.mp, real_batch),
        "poses_virtual": predict_poses(nets.mp, virt_batch),
        "disc_real": nets.madv.forward(f_r),
        "disc_virtual": nets.madv.forward(f_v),
    }


def _check_finite(value, nets, tag):
    if not np.isfinite(value):
        raise TrainingDiverged(f"{tag} loss is {value}; aborting "
                               f"(param hash ms={nets.ms.param_hash()[:12]})")


def _gp_param_grads(disc, f_tilde, step):
    """Central finite differences of the gradient penalty over the critic's
    parameters (closed-form feature gradient inside)."""
    grads = []
    for _, p in disc.named_params():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + step
            fp = L.penalty_value(disc, f_tilde)
            flat[c] = orig - step
            fm = L.penalty_value(disc, f_tilde)
            flat[c] = orig
            gf[c] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def train_da(real_view, virt_view, rig, cfg, weights=None,
             curve_writer=None):
    """Domain-adaptation phase. Returns (nets, loss curve rows).

    real_view may be None (virtual-only ablation); the adversarial and
    reconstruction machinery is skipped when cfg.adversarial is off.
    """
    weights = weights or L.LossWeights()
    nets = LearnerNets.create(cfg.seed, disparity_ceiling(virt_view))
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7241)))

    opt_adv = Adam(nets.madv.params(), cfg.lr_da, cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt_s = Adam(nets.ms.params(), cfg.lr_da, cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt_dp = Adam(nets.md.params() + nets.mp.params(), cfg.lr_da,
                  cfg.beta1, cfg.beta2, cfg.adam_eps)

    def zero_all():
        for _, p in nets.named_params():
            p.grad[...] = 0.0

    # Warm start: encoder as self-encoder, then task nets on virtual data.
    for _ in range(cfg.warmstart_encoder):
        vb, _ = sample_triplet_batch(virt_view, rng, cfg.batch_size)
        batches = [vb.center]
        if real_view is not None:
            rb, _ = sample_triplet_batch(real_view, rng, cfg.batch_size)
            batches.append(rb.center)
        zero_all()
        rec = None
        for img in batches:
            term = L.reconstruction(img, nets.ms.forward(img))
            rec = term if rec is None else dx.add(rec, term)
        rec.backward()
        opt_s.step()
    for _ in range(cfg.warmstart_task):
        vb, _ = sample_triplet_batch(virt_view, rng, cfg.batch_size)
        zero_all()
        total, _report = _task_forward(nets, None, vb, rig, weights)
        total.backward()
        opt_dp.step()

    curves = []
    for it in range(cfg.n_train):
        vb, _ = sample_triplet_batch(virt_view, rng, cfg.batch_size)
        rb = None
        if real_view is not None:
            rb, _ = sample_triplet_batch(real_view, rng, cfg.batch_size)

        adv_val = gp_val = 0.0
        if cfg.adversarial and rb is not None:
            # Critic ascent: one step on -L_adv + lambda_g * L_gp.
            f_r = nets.ms.forward(rb.center)
            f_v = nets.ms.forward(vb.center)
            nets.madv.calibrate_sign(f_r.data, f_v.data)
            zero_all()
            neg_adv = dx.neg(L.adversarial_loss(nets.madv, f_r, f_v))
            neg_adv.backward()
            adv_val = -float(neg_adv.data)
            eps = rng.uniform(0.0, 1.0, size=f_r.data.shape[0])
            gp_val, f_tilde = L.gradient_penalty(nets.madv, f_r.data,
                                                 f_v.data, eps)
            gp_grads = _gp_param_grads(nets.madv, f_tilde, cfg.fd_step)
            grads = [p.grad + weights.lambda_g * g
                     for p, g in zip(nets.madv.params(), gp_grads)]
            opt_adv.step_with_grads(grads)

            # Encoder steps: k_s steps on L_adv + L_task + lambda_r * L_rec.
            for _ in range(cfg.k_s):
                zero_all()
                f_r = nets.ms.forward(rb.center)
                f_v = nets.ms.forward(vb.center)
                adv = L.adversarial_loss(nets.madv, f_r, f_v)
                task, _ = L.task_loss(
                    rb, vb, nets.md.forward(f_r), nets.md.forward(f_v),
                    predict_poses(nets.mp, rb), predict_poses(nets.mp, vb),
                    rig, weights)
                rec = dx.add(L.reconstruction(rb.center, f_r),
                             L.reconstruction(vb.center, f_v))
                total = dx.add(dx.add(adv, task), dx.mul(rec, weights.lambda_r))
                _check_finite(float(total.data), nets, "encoder")
                total.backward()
                opt_s.step()

        # Task step for the disparity and pose networks.
        zero_all()
        total, report = _task_forward(nets, rb, vb, rig, weights)
        _check_finite(report.total, nets, "task")
        total.backward()
        opt_dp.step()
        report.terms["adv"] = adv_val
        report.terms["gp"] = gp_val
        curves.append((it, report))
        if curve_writer is not None:
            curve_writer(it, report)
    return nets, curves


def disparity_ceiling(virt_view):
    """Upper bound for predicted disparities: 1.2x the largest seen in the
    virtual ground truth."""
    d_hi = max(float(np.max(d)) for d in virt_view.gt_disparity)
    if d_hi <= 0:
        raise ValueError("virtual view has no positive ground-truth disparity")
    return 1.2 * d_hi


def forward_warp_disparity(d_left):
    """Splat a left-view disparity map into the right view.

    Each left pixel (x, y, d) lands at (x - d, y); collisions keep the larger
    disparity (nearer surface wins); holes take the smaller of the nearest
    valid row neighbors (background fill).
    """
    d = np.asarray(d_left, dtype=float)
    H, W = d.shape
    out = np.full((H, W), -np.inf)
    xs = np.arange(W)
    for y in range(H):
        xt = np.round(xs - d[y]).astype(int)
        ok = (xt >= 0) & (xt < W) & (d[y] > 0)
        np.maximum.at(out[y], xt[ok], d[y][ok])
    filled = out.copy()
    for y in range(H):
        row = out[y]
        valid = np.isfinite(row)
        if not valid.any():
            filled[y] = 0.0
            continue
        idx = np.where(valid)[0]
        # nearest valid neighbor to the left / right of every column
        left_idx = np.maximum.accumulate(np.where(valid, xs, -1))
        right_scan = np.where(valid[::-1], xs[::-1], W)
        right_idx = np.minimum.accumulate(right_scan)[::-1]
        lv = np.where(left_idx >= 0, row[np.clip(left_idx, 0, W - 1)], np.inf)
        rv = np.where(right_idx < W, row[np.clip(right_idx, 0, W - 1)], np.inf)
        fill = np.minimum(lv, rv)
        filled[y] = np.where(valid, row, fill)
    return filled


def relative_pose_rt(pose_from, pose_to):
    """(rotvec, trans) of the transform taking pose_from's camera frame into
    pose_to's (both camera-to-world)."""
    rel = pose_to.inverse().compose(pose_from)
    return so3_log(rel.rotation), rel.translation.copy()


def mr_step(nets, real_view, virt_view, t_star, rig, cfg, weights=None,
            rng=None):
    """One mutual-reinforcement finetuning round: update only M_D and M_P on
    L_task + lambda_p_star * backward-reinforcement; M_S and M_adv frozen.

    t_star[(frame, delta)] is the backend (rotvec, trans) for warping frame
    `frame` into its neighbor at offset delta (-1 or +1), or missing.
    Returns the number of skipped batch items.
    """
    weights = weights or L.LossWeights()
    rng = rng or np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x3712)))
    opt = Adam(nets.md.params() + nets.mp.params(), cfg.lr_mr,
               cfg.beta1, cfg.beta2, cfg.adam_eps)
    skipped_total = 0
    for _ in range(cfg.n_finetune):
        vb, _ = sample_triplet_batch(virt_view, rng, cfg.batch_size)
        rb, idx = sample_triplet_batch(real_view, rng, cfg.batch_size)
        for _, p in nets.named_params():
            p.grad[...] = 0.0
        total, report = _task_forward(nets, rb, vb, rig, weights)
        if weights.lambda_p_star > 0:
            poses_star = [[t_star.get((int(i), d)) for i in idx]
                          for d in (-1, +1)]
            if any(p is not None for branch in poses_star for p in branch):
                d_real = nets.md.forward(nets.ms.forward(rb.center))
                star, skipped = L.backward_reinforcement(rb, d_real,
                                                         poses_star, rig,
                                                         weights.alpha_ssim)
                skipped_total += skipped
                total = dx.add(total, dx.mul(star, weights.lambda_p_star))
            else:
                skipped_total += len(idx)
        _check_finite(float(total.data), nets, "mr")
        total.backward()
        opt.step()
    return skipped_total
