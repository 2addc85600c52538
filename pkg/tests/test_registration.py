import numpy as np
import pytest

from xrayreg import phantom
from xrayreg.errors import DegenerateInputError
from xrayreg.evaluation import LandmarkSet, mtre
from xrayreg.geometry import make_detector
from xrayreg.lie import Pose, compose, exp_se3, geodesic_log_se3, geodesic_so3
from xrayreg.registration import (
    AdamState,
    EarlyStopper,
    OptimConfig,
    SamplerConfig,
    Trajectory,
    TrajectoryRow,
    init_multistart,
    register,
    sample_pose,
    step_adam,
)
from xrayreg.render import render
from xrayreg.similarity import MetricConfig
from xrayreg.volume import Volume, isocenter_pose


def _setup(dims=(32, 32, 32), det_px=32, seed=1):
    v, lm = phantom.spheres(dims, (1.0, 1.0, 1.0), seed=seed)
    det = make_detector(160.0, (0.0, 0.0), 2.0, 2.0, det_px, det_px)
    return v, lm, isocenter_pose(v), det


# ---------------------------------------------------------------------------
# sample_pose
# ---------------------------------------------------------------------------


def test_sample_pose_sigma_zero_limit():
    _, _, iso, _ = _setup()
    cfg = SamplerConfig(sigma_rot=np.full(3, 1e-12), sigma_trans=np.full(3, 1e-12))
    T = sample_pose(iso, cfg, np.random.default_rng(0))
    assert geodesic_log_se3(T, iso) < 1e-6


def test_sample_pose_rotation_angle_mean():
    _, _, iso, _ = _setup()
    sigma = 0.2
    cfg = SamplerConfig(sigma_rot=np.full(3, sigma), sigma_trans=np.full(3, 10.0))
    rng = np.random.default_rng(1)
    angles = [geodesic_so3(iso.R, sample_pose(iso, cfg, rng).R) for _ in range(10_000)]
    expected = 2 * sigma * np.sqrt(2 / np.pi)  # chi distribution, 3 dof
    assert abs(np.mean(angles) - expected) / expected < 0.02


def test_sample_pose_seed_reproducible():
    _, _, iso, _ = _setup()
    cfg = SamplerConfig()
    a = sample_pose(iso, cfg, np.random.default_rng(3))
    b = sample_pose(iso, cfg, np.random.default_rng(3))
    assert np.array_equal(a.matrix(), b.matrix())


# ---------------------------------------------------------------------------
# init_multistart
# ---------------------------------------------------------------------------


def test_multistart_selects_iso_for_iso_image():
    v, _, iso, det = _setup()
    fixed = render(v, iso, det).pixels
    best = init_multistart(fixed, v, det, iso, 4, MetricConfig(kind="mncc"), np.random.default_rng(2))
    assert np.array_equal(best.matrix(), iso.matrix())


def test_multistart_recovers_planted_candidate():
    v, _, iso, det = _setup()
    scfg = SamplerConfig(sigma_rot=np.full(3, 0.1), sigma_trans=np.full(3, 8.0))
    # pre-draw the same candidate sequence the function will draw
    planted = [sample_pose(iso, scfg, np.random.default_rng(7)) for _ in range(5)][2]
    fixed = render(v, planted, det).pixels
    best = init_multistart(
        fixed, v, det, iso, 5, MetricConfig(kind="mncc"), np.random.default_rng(7), sampler=scfg
    )
    assert np.array_equal(best.matrix(), planted.matrix())


def test_multistart_flat_volume_warns_and_returns_iso():
    v, _, iso, det = _setup()
    flat = Volume(np.zeros(v.dims), v.spacing)
    with pytest.warns(UserWarning, match="degenerate"):
        best = init_multistart(
            np.zeros((det.height, det.width)), flat, det, iso, 2,
            MetricConfig(kind="global_ncc"), np.random.default_rng(0),
        )
    assert np.array_equal(best.matrix(), iso.matrix())


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_no_move():
    cfg = OptimConfig()
    params = np.arange(6.0)
    state, new = step_adam(AdamState.zeros(6), params, np.zeros(6), 0, cfg)
    assert np.array_equal(new, params)


def test_adam_first_step_magnitude():
    cfg = OptimConfig(lr_rot=0.01, lr_trans=2.0)
    g = np.array([0.3, -0.2, 5.0, 0.1, -4.0, 2.5])
    _, new = step_adam(AdamState.zeros(6), np.zeros(6), g, 0, cfg)
    # bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
    assert np.allclose(new[:3], -0.01 * np.sign(g[:3]), atol=1e-8)
    assert np.allclose(new[3:], -2.0 * np.sign(g[3:]), atol=1e-6)


def test_adam_converges_on_quadratic():
    rng = np.random.default_rng(4)
    target = rng.uniform(-2, 2, size=6)
    scale = rng.uniform(0.5, 3.0, size=6)
    cfg = OptimConfig(lr_rot=0.05, lr_trans=0.05, decay=0.9, decay_every=25)
    params = np.zeros(6)
    state = AdamState.zeros(6)
    for it in range(200):
        grad = scale * (params - target)
        state, params = step_adam(state, params, grad, it, cfg)
    assert np.max(np.abs(params - target)) < 1e-3


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(FloatingPointError):
        step_adam(AdamState.zeros(6), np.zeros(6), np.array([np.nan] * 6), 0, OptimConfig())


def test_adam_lr_decay_schedule():
    cfg = OptimConfig(lr_rot=1.0, lr_trans=1.0, decay=0.5, decay_every=10, beta1=0.0, beta2=0.0)
    g = np.ones(6)
    # with beta1=beta2=0 the step is exactly lr * sign(g)
    _, p0 = step_adam(AdamState.zeros(6), np.zeros(6), g, 0, cfg)
    _, p1 = step_adam(AdamState.zeros(6), np.zeros(6), g, 10, cfg)
    assert np.allclose(p1 / p0, 0.5, atol=1e-7)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


def test_early_stop_sub_threshold_improvements():
    stopper = EarlyStopper(0.05, 20)
    sims = np.cumsum(np.full(300, 0.049)) - 0.049  # 0, 0.049, 0.098, ...
    stopped_at = None
    for i, s in enumerate(sims):
        if stopper.update(s):
            stopped_at = i
            break
    assert stopped_at == 20  # 21 iterations total (0-based index 20)


def test_early_stop_above_threshold_never_fires():
    stopper = EarlyStopper(0.05, 20)
    sims = np.cumsum(np.full(250, 0.051)) - 0.051
    assert not any(stopper.update(s) for s in sims)


def test_early_stop_constant_sequence():
    stopper = EarlyStopper(0.05, 20)
    count = 0
    for _ in range(100):
        count += 1
        if stopper.update(1.0):
            break
    assert count == 21  # patience + 1


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------


def test_register_fixed_point_at_truth():
    v, lm, iso, det = _setup()
    fixed = render(v, iso, det).pixels
    ocfg = OptimConfig(param_kind="se3")
    mcfg = MetricConfig(kind="mncc", scales=(13, None))
    pose, traj = register(fixed, v, det, iso, ocfg, mcfg, np.random.default_rng(5))
    assert mtre(np.eye(3), iso, pose, lm, mode="per_landmark") < 1e-3
    assert len(traj) == ocfg.patience + 1  # similarity already maximal
    best_seq = np.maximum.accumulate(traj.similarities())
    assert np.all(np.diff(best_seq) >= 0)


def test_register_zero_lr_keeps_pose():
    v, _, iso, det = _setup()
    fixed = render(v, iso, det).pixels
    ocfg = OptimConfig(param_kind="se3", lr_rot=0.0, lr_trans=0.0, max_iters=3, patience=2)
    mcfg = MetricConfig(kind="global_ncc")
    init = compose(exp_se3(np.array([0.02, 0, 0, 1.0, 0, 0])), iso)
    pose, traj = register(fixed, v, det, init, ocfg, mcfg, np.random.default_rng(6))
    assert np.max(np.abs(pose.matrix() - init.matrix())) < 1e-9
    for row in traj.rows:
        assert np.max(np.abs(row.pose.matrix() - init.matrix())) < 1e-9


def test_register_degenerate_init_raises():
    v, _, iso, det = _setup()
    flat = Volume(np.zeros(v.dims), v.spacing)
    with pytest.raises(DegenerateInputError, match="re-initialize"):
        register(
            np.zeros((det.height, det.width)), flat, det, iso,
            OptimConfig(), MetricConfig(kind="global_ncc"), np.random.default_rng(7),
        )


def test_register_recovers_small_perturbation():
    v, lm, iso, det = _setup(det_px=48)
    truth = compose(exp_se3(np.array([0.02, -0.015, 0.01, 2.0, -1.5, 1.0])), iso)
    fixed = render(v, truth, det).pixels
    ocfg = OptimConfig(param_kind="se3")
    mcfg = MetricConfig(kind="mncc", scales=(13, None))
    pose, traj = register(fixed, v, det, iso, ocfg, mcfg, np.random.default_rng(8))
    err = mtre(np.eye(3), truth, pose, lm, mode="per_landmark")
    assert err < 1.0
    assert len(traj) <= ocfg.max_iters


def test_register_sparse_metric_runs_and_improves():
    v, lm, iso, det = _setup(det_px=48)
    truth = compose(exp_se3(np.array([0.015, 0.01, -0.01, 1.5, 1.0, -1.0])), iso)
    fixed = render(v, truth, det).pixels
    ocfg = OptimConfig(param_kind="se3")
    mcfg = MetricConfig(kind="sparse_mncc", patch_size=9, n_patches=40)
    pose, traj = register(fixed, v, det, iso, ocfg, mcfg, np.random.default_rng(9))
    assert mtre(np.eye(3), truth, pose, lm, mode="per_landmark") < mtre(
        np.eye(3), truth, iso, lm, mode="per_landmark"
    )


def test_trajectory_rejects_nonfinite_similarity():
    with pytest.raises(ValueError):
        TrajectoryRow(0, Pose.identity(), float("nan"), 0.0, 0.0)


def test_trajectory_csv(tmp_path):
    traj = Trajectory()
    traj.append(TrajectoryRow(0, Pose.identity(), 0.5, 1.0, 2.0))
    traj.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().strip().splitlines()
    assert lines[0].startswith("iter,")
    assert len(lines) == 2
