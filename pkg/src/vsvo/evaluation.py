"""Trajectory and depth metrics: similarity alignment, ATE, KITTI-style
relative errors over path-length sub-sequences, and multi-run aggregation.

All functions are pure. Trajectories are lists of camera-to-world Poses
(optionally with frame ids); positions enter the metrics, orientations only
through the relative-error terms.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, so3_log

DESK_SUBLENGTHS = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0)


class EvaluationError(ValueError):
    pass


def _positions(trajectory):
    if len(trajectory) and isinstance(trajectory[0], Pose):
        return np.stack([p.translation for p in trajectory])
    return np.asarray(trajectory, dtype=float)


def align_umeyama(estimate, reference, with_scale=True):
    """Least-squares similarity (or rigid) fit of estimate onto reference.

    Returns (s, R, t, aligned) minimizing sum ||ref_i - (s R est_i + t)||^2.
    Degenerate (collinear or coincident) inputs raise EvaluationError.
    """
    x = _positions(estimate)
    y = _positions(reference)
    if x.shape != y.shape:
        raise EvaluationError(f"trajectory shapes differ: {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise EvaluationError("need at least 3 positions to align")
    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    cov = yc.T @ xc / len(x)
    U, D, Vt = np.linalg.svd(cov)
    if np.sum(D > 1e-12 * max(D[0], 1e-300)) < 2:
        raise EvaluationError("degenerate (collinear) trajectory; "
                              "alignment is rank-deficient")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_x = np.mean(np.sum(xc ** 2, axis=1))
        s = float(np.trace(np.diag(D) @ S) / var_x)
    else:
        s = 1.0
    if s <= 0:
        raise EvaluationError("non-positive alignment scale")
    t = mu_y - s * R @ mu_x
    aligned = s * x @ R.T + t
    return s, R, t, aligned


def ate(estimate, reference, align="7dof", ids_estimate=None,
        ids_reference=None):
    """Root-mean-square position error after optional alignment.

    align: "7dof" (similarity), "6dof" (rigid) or "none".
    """
    if ids_estimate is not None or ids_reference is not None:
        if (ids_estimate is None or ids_reference is None
                or list(ids_estimate) != list(ids_reference)):
            raise EvaluationError("frame id mismatch between trajectories")
    x = _positions(estimate)
    y = _positions(reference)
    if x.shape != y.shape:
        raise EvaluationError(f"trajectory shapes differ: {x.shape} vs {y.shape}")
    if align == "7dof":
        _, _, _, x = align_umeyama(x, y, with_scale=True)
    elif align == "6dof":
        _, _, _, x = align_umeyama(x, y, with_scale=False)
    elif align != "none":
        raise EvaluationError(f"unknown alignment {align!r}")
    return float(np.sqrt(np.mean(np.sum((x - y) ** 2, axis=1))))


def _path_distances(positions):
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _relative(a, b):
    return a.inverse().compose(b)


def relative_errors(estimate, reference, sublengths=DESK_SUBLENGTHS,
                    step=1):
    """KITTI-devkit style drift metrics.

    For every start frame and every path sublength L reachable in the
    reference, the relative-pose error between the estimate's and the
    reference's (start, end) deltas contributes ||t_err||/L and angle/L.
    Returns (t_err %, r_err deg per 100 length units, per-sublength table);
    infeasible sublengths are simply absent from the table.
    """
    if len(estimate) != len(reference):
        raise EvaluationError("trajectory length mismatch")
    dist = _path_distances(_positions(reference))
    table = {}
    for L in sublengths:
        terrs, rerrs = [], []
        for f in range(0, len(reference), step):
            target = dist[f] + L
            g = int(np.searchsorted(dist, target))
            if g >= len(reference):
                break
            d_ref = _relative(reference[f], reference[g])
            d_est = _relative(estimate[f], estimate[g])
            err = _relative(d_ref, d_est)
            terrs.append(np.linalg.norm(err.translation) / L)
            rerrs.append(np.degrees(np.linalg.norm(so3_log(err.rotation))) / L)
        if terrs:
            table[L] = (100.0 * float(np.mean(terrs)),
                        100.0 * float(np.mean(rerrs)))
    if not table:
        raise EvaluationError(
            f"reference path ({dist[-1]:.3g}) shorter than every sublength")
    t_err = float(np.mean([v[0] for v in table.values()]))
    r_err = float(np.mean([v[1] for v in table.values()]))
    return t_err, r_err, table


def depth_scale_ratio(predicted, ground_truth, mask=None):
    """median(gt) / median(pred) over valid pixels pooled across frames."""
    pred = np.concatenate([np.asarray(p, dtype=float).ravel()
                           for p in np.atleast_1d(predicted)]) \
        if isinstance(predicted, (list, tuple)) else np.asarray(predicted, dtype=float).ravel()
    gt = np.concatenate([np.asarray(g, dtype=float).ravel()
                         for g in np.atleast_1d(ground_truth)]) \
        if isinstance(ground_truth, (list, tuple)) else np.asarray(ground_truth, dtype=float).ravel()
    if pred.shape != gt.shape:
        raise EvaluationError("prediction/ground-truth size mismatch")
    if mask is None:
        valid = (pred > 0) & (gt > 0)
    else:
        valid = (np.concatenate([np.asarray(m).ravel() for m in mask])
                 if isinstance(mask, (list, tuple))
                 else np.asarray(mask).ravel())
        valid = valid & (pred > 0)
    if not valid.any():
        raise EvaluationError("no overlapping valid pixels")
    return float(np.median(gt[valid]) / np.median(pred[valid]))


@dataclass
class MetricReport:
    t_err: float
    r_err: float
    ate: float
    alignment: str
    scale: float
    table: dict = field(default_factory=dict)

    def as_dict(self):
        return {"t_err": self.t_err, "r_err": self.r_err, "ate": self.ate,
                "scale": self.scale}


def evaluate_trajectory(estimate, reference, sublengths=DESK_SUBLENGTHS,
                        align="7dof"):
    """One-stop trajectory report: relative errors, aligned ATE and the
    recovered scale (Umeyama estimate -> reference)."""
    s, _, _, _ = align_umeyama(estimate, reference, with_scale=True)
    t_err, r_err, table = relative_errors(estimate, reference, sublengths)
    return MetricReport(t_err=t_err, r_err=r_err,
                        ate=ate(estimate, reference, align=align),
                        alignment=align, scale=s, table=table)


def aggregate_runs(reports):
    """Per-metric mean and sample standard deviation over >= 2 runs.

    Accepts a list of dicts (or MetricReports); returns
    {metric: (mean, std)}."""
    if len(reports) < 2:
        raise EvaluationError("need at least 2 runs to aggregate")
    rows = [r.as_dict() if isinstance(r, MetricReport) else dict(r)
            for r in reports]
    keys = rows[0].keys()
    if any(r.keys() != keys for r in rows):
        raise EvaluationError("runs report different metrics")
    out = {}
    for k in keys:
        vals = np.array([float(r[k]) for r in rows])
        out[k] = (float(vals.mean()), float(vals.std(ddof=1)))
    return out


def format_aggregate(aggregate, key):
    mean, std = aggregate[key]
    return f"{mean:.3f}±{std:.3f}"


def write_metrics_csv(path, report):
    with open(path, "w") as f:
        f.write("metric,value\n")
        for k, v in report.as_dict().items():
            f.write(f"{k},{v:.9g}\n")
        for L, (te, re_) in sorted(report.table.items()):
            f.write(f"t_err_{L:g},{te:.9g}\n")
            f.write(f"r_err_{L:g},{re_:.9g}\n")


def write_trajectory_svg(path, estimate, reference, align="7dof",
                         size=(640, 480)):
    """Top-down x-z overlay of the (aligned) estimate and the reference."""
    est = _positions(estimate)
    ref = _positions(reference)
    if align == "7dof":
        _, _, _, est = align_umeyama(est, ref, with_scale=True)
    elif align == "6dof":
        _, _, _, est = align_umeyama(est, ref, with_scale=False)
    W, H = size
    pts = np.concatenate([est, ref])[:, [0, 2]]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    pad = 40.0

    def to_px(xy):
        u = pad + (xy[:, 0] - lo[0]) / span[0] * (W - 2 * pad)
        v = H - pad - (xy[:, 1] - lo[1]) / span[1] * (H - 2 * pad)
        return np.stack([u, v], axis=1)

    def polyline(xy, color):
        coords = " ".join(f"{p[0]:.2f},{p[1]:.2f}" for p in to_px(xy))
        return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                f'points="{coords}"/>')

    svg = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        polyline(ref[:, [0, 2]], "#444444"),
        polyline(est[:, [0, 2]], "#d62728"),
        f'<text x="{pad}" y="20" font-size="13" fill="#444444">'
        f'reference</text>',
        f'<text x="{pad + 90}" y="20" font-size="13" fill="#d62728">'
        f'estimate ({align})</text>',
        f'<text x="{pad}" y="{H - 10}" font-size="11" fill="#888888">'
        f'top-down x-z</text>',
        "</svg>",
    ]
    with open(path, "w") as f:
        f.write("\n".join(svg) + "\n")
