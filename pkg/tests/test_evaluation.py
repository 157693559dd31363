import numpy as np
import pytest

from vsvo.evaluation import (EvaluationError, MetricReport, aggregate_runs,
                             align_umeyama, ate, depth_scale_ratio,
                             evaluate_trajectory, format_aggregate,
                             relative_errors, write_metrics_csv,
                             write_trajectory_svg)
from vsvo.geometry import Pose, so3_exp


def random_points(seed, n=40, scale=2.0):
    rng = np.random.default_rng(seed)
    return rng.normal(scale=scale, size=(n, 3))


def yaw(theta):
    return so3_exp(np.array([0.0, theta, 0.0]))


def line_trajectory(n, spacing, rot_per_frame=0.0, axis=2):
    poses = []
    for i in range(n):
        t = np.zeros(3)
        t[axis] = spacing * i
        poses.append(Pose(yaw(rot_per_frame * i), t))
    return poses


def arc_trajectory(n, radius=50.0, dphi=0.005):
    poses = []
    for i in range(n):
        phi = dphi * i
        t = np.array([radius * np.sin(phi), 0.0, radius * (1 - np.cos(phi))])
        poses.append(Pose(yaw(phi), t))
    return poses


class TestUmeyama:
    def test_inverts_known_similarity(self):
        # Oracle: construct the transform, check exact recovery.
        for seed in range(5):
            rng = np.random.default_rng(seed)
            ref = random_points(seed)
            s_true = float(rng.uniform(0.3, 3.0))
            R_true = so3_exp(rng.normal(size=3))
            t_true = rng.normal(size=3)
            est = (ref - t_true) @ R_true / s_true  # inverse map of ref
            s, R, t, aligned = align_umeyama(est, ref, with_scale=True)
            assert abs(s - s_true) < 1e-9
            assert np.max(np.abs(R - R_true)) < 1e-9
            assert np.max(np.abs(t - t_true)) < 1e-9
            assert np.max(np.abs(aligned - ref)) < 1e-9

    def test_rigid_mode_keeps_unit_scale(self):
        ref = random_points(1)
        est = ref @ so3_exp(np.array([0.1, -0.2, 0.05])) + 0.7
        s, _, _, aligned = align_umeyama(est, ref, with_scale=False)
        assert s == 1.0
        assert np.max(np.abs(aligned - ref)) < 1e-9

    def test_scale_fit_never_worse_than_rigid(self):
        for seed in range(5):
            rng = np.random.default_rng(seed + 100)
            ref = random_points(seed + 100)
            est = 1.4 * ref + rng.normal(scale=0.05, size=ref.shape)
            _, _, _, a7 = align_umeyama(est, ref, with_scale=True)
            _, _, _, a6 = align_umeyama(est, ref, with_scale=False)
            r7 = np.sum((a7 - ref) ** 2)
            r6 = np.sum((a6 - ref) ** 2)
            assert r7 <= r6 + 1e-12

    def test_collinear_rejected(self):
        z = np.linspace(0, 5, 10)
        pts = np.stack([np.zeros(10), np.zeros(10), z], axis=1)
        with pytest.raises(EvaluationError):
            align_umeyama(pts, pts)

    def test_too_few_points_rejected(self):
        pts = random_points(0, n=2)
        with pytest.raises(EvaluationError):
            align_umeyama(pts, pts)


class TestATE:
    def test_pythagorean_hand_case(self):
        ref = random_points(3)
        est = ref + np.array([3.0, 0.0, 4.0])
        assert abs(ate(est, ref, align="none") - 5.0) < 1e-12

    def test_single_outlier_hand_case(self):
        ref = random_points(4, n=3)
        est = ref.copy()
        est[0] += np.array([3.0, 4.0, 0.0])
        # rms of residual norms (5, 0, 0)
        assert abs(ate(est, ref, align="none") - np.sqrt(25.0 / 3.0)) < 1e-12

    def test_7dof_similarity_invariance(self):
        rng = np.random.default_rng(7)
        ref = random_points(7)
        est = ref + rng.normal(scale=0.1, size=ref.shape)
        base = ate(est, ref, align="7dof")
        R = so3_exp(rng.normal(size=3))
        warped = 2.3 * est @ R.T + rng.normal(size=3)
        assert abs(ate(warped, ref, align="7dof") - base) < 1e-9

    def test_6dof_rigid_invariance(self):
        rng = np.random.default_rng(8)
        ref = random_points(8)
        est = ref + rng.normal(scale=0.1, size=ref.shape)
        base = ate(est, ref, align="6dof")
        R = so3_exp(rng.normal(size=3))
        warped = est @ R.T + rng.normal(size=3)
        assert abs(ate(warped, ref, align="6dof") - base) < 1e-9

    def test_matches_scalar_oracle(self):
        # Independent oracle: explicit per-pose residual loop.
        rng = np.random.default_rng(12)
        ref = random_points(12, n=20)
        est = ref + rng.normal(scale=0.3, size=ref.shape)
        acc = 0.0
        for e, r in zip(est, ref):
            acc += sum((e[k] - r[k]) ** 2 for k in range(3))
        assert abs(ate(est, ref, align="none") - np.sqrt(acc / 20)) < 1e-12

    def test_scale_gap_exposes_scale_drift(self):
        # 2x-scaled trajectory: rigid alignment leaves a large residual,
        # similarity alignment removes it.
        ref = random_points(13)
        est = 2.0 * ref
        assert ate(est, ref, align="7dof") < 1e-9
        assert ate(est, ref, align="6dof") > 0.5 * float(np.std(ref))

    def test_id_mismatch_rejected(self):
        ref = random_points(9)
        with pytest.raises(EvaluationError):
            ate(ref, ref, ids_estimate=[0, 1, 2], ids_reference=[0, 1, 3])

    def test_unknown_alignment_rejected(self):
        ref = random_points(10)
        with pytest.raises(EvaluationError):
            ate(ref, ref, align="8dof")


class TestRelativeErrors:
    def test_scaled_estimate_translation_drift(self):
        # Straight line: a (1+eps)-scaled estimate must drift by |eps| per
        # unit length, i.e. t_err = 100*|eps| percent.
        ref = line_trajectory(120, spacing=0.5)
        for eps in (-0.2, 0.1):
            est = [Pose(p.rotation, (1 + eps) * p.translation) for p in ref]
            t_err, r_err, table = relative_errors(est, ref)
            expected = 100.0 * abs(eps)
            assert abs(t_err - expected) < 0.01 * expected
            assert r_err < 1e-9
            assert len(table) == 8  # path length 59.5 covers all sublengths

    def test_rotation_drift_hand_case(self):
        # Constant yaw drift of theta per frame at 0.5 spacing gives
        # r_err = 100 * deg(theta * (g - f)) / L = 200 * deg(theta).
        # Motion along the yaw axis so the drift leaves translations alone.
        theta = 1e-3
        ref = line_trajectory(120, spacing=0.5, axis=1)
        est = line_trajectory(120, spacing=0.5, rot_per_frame=theta, axis=1)
        t_err, r_err, _ = relative_errors(est, ref)
        assert t_err < 1e-9
        assert abs(r_err - 200.0 * np.degrees(theta)) < 1e-9

    def test_perfect_estimate_is_zero(self):
        ref = line_trajectory(120, spacing=0.5, rot_per_frame=0.01)
        t_err, r_err, _ = relative_errors(ref, ref)
        assert t_err == 0.0 and r_err == 0.0

    def test_invariant_under_common_rigid_transform(self):
        rng = np.random.default_rng(15)
        ref = arc_trajectory(120)
        est = [Pose(p.rotation @ yaw(1e-3 * i),
                    1.03 * p.translation + rng.normal(scale=1e-3, size=3))
               for i, p in enumerate(ref)]
        base = relative_errors(est, ref)[:2]
        g = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3))
        moved = relative_errors([g.compose(p) for p in est],
                                [g.compose(p) for p in ref])[:2]
        assert np.allclose(base, moved, atol=1e-9)

    def test_infeasible_sublengths_skipped(self):
        ref = line_trajectory(30, spacing=0.1)  # path length 2.9
        est = [Pose(p.rotation, 1.1 * p.translation) for p in ref]
        t_err, _, table = relative_errors(est, ref, sublengths=(1.0, 2.0, 50.0))
        assert set(table) == {1.0, 2.0}
        assert abs(t_err - 10.0) < 0.1

    def test_all_infeasible_raises(self):
        ref = line_trajectory(10, spacing=0.1)
        with pytest.raises(EvaluationError):
            relative_errors(ref, ref, sublengths=(100.0,))

    def test_length_mismatch_rejected(self):
        ref = line_trajectory(10, spacing=0.5)
        with pytest.raises(EvaluationError):
            relative_errors(ref[:-1], ref)


class TestDepthScaleRatio:
    def test_halved_prediction(self):
        rng = np.random.default_rng(11)
        gt = rng.uniform(2, 10, (8, 12))
        assert abs(depth_scale_ratio(gt / 2.0, gt) - 2.0) < 1e-12

    def test_pooled_frames_use_global_median(self):
        gt = [np.full((4, 4), 2.0), np.full((4, 4), 8.0)]
        pred = [np.full((4, 4), 1.0), np.full((4, 4), 8.0)]
        # pooled medians: gt 5.0, pred 4.5
        assert abs(depth_scale_ratio(pred, gt) - 5.0 / 4.5) < 1e-12

    def test_mask_excludes_pixels(self):
        gt = np.array([[2.0, 100.0]])
        pred = np.array([[1.0, 1.0]])
        mask = np.array([[True, False]])
        assert abs(depth_scale_ratio(pred, gt, mask) - 2.0) < 1e-12

    def test_empty_overlap_rejected(self):
        with pytest.raises(EvaluationError):
            depth_scale_ratio(np.zeros((2, 2)), np.ones((2, 2)))


class TestAggregation:
    def test_mean_and_sample_std(self):
        runs = [{"t_err": 1.5}, {"t_err": 1.6}, {"t_err": 1.7}]
        agg = aggregate_runs(runs)
        assert abs(agg["t_err"][0] - 1.6) < 1e-12
        assert abs(agg["t_err"][1] - 0.1) < 1e-12

    def test_formatting(self):
        agg = {"ate": (1.5463, 0.0214)}
        assert format_aggregate(agg, "ate") == "1.546±0.021"

    def test_single_run_rejected(self):
        with pytest.raises(EvaluationError):
            aggregate_runs([{"t_err": 1.0}])

    def test_inconsistent_metrics_rejected(self):
        with pytest.raises(EvaluationError):
            aggregate_runs([{"a": 1.0}, {"b": 2.0}])


class TestReportsAndArtifacts:
    def make_pair(self):
        rng = np.random.default_rng(20)
        ref = arc_trajectory(120)  # path length ~29.75, gentle turn
        est = [Pose(p.rotation,
                    1.05 * p.translation + rng.normal(scale=1e-3, size=3))
               for p in ref]
        return est, ref

    def test_evaluate_trajectory_report(self):
        est, ref = self.make_pair()
        report = evaluate_trajectory(est, ref)
        assert abs(report.scale - 1 / 1.05) < 1e-2
        assert abs(report.t_err - 5.0) < 0.5
        assert report.ate < 0.05  # similarity alignment absorbs the scale

    def test_metrics_csv_roundtrip(self, tmp_path):
        est, ref = self.make_pair()
        report = evaluate_trajectory(est, ref)
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, report)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "metric,value"
        values = dict(l.split(",") for l in lines[1:])
        assert abs(float(values["t_err"]) - report.t_err) < 1e-8
        assert abs(float(values["ate"]) - report.ate) < 1e-8
        assert f"t_err_{min(report.table):g}" in values

    def test_svg_plot_written(self, tmp_path):
        est, ref = self.make_pair()
        path = tmp_path / "traj.svg"
        write_trajectory_svg(path, est, ref)
        text = path.read_text()
        assert text.startswith("<svg")
        assert text.count("<polyline") == 2
        assert "reference" in text and "estimate" in text
