import numpy as np
import pytest
import torch
from scipy.spatial import cKDTree

from sparsesplat import optim
from sparsesplat.geometry import so3_exp
from sparsesplat.optim import (DivergenceError, ExposureParams, JointSchedule, LossWeights, OptimError, PoseDelta,
                               TrainingFrame, AdaptiveDescent, DescentConfig, apply_exposure, joint_optimize,
                               masked_l1_t, masked_rgbd_loss, posed_cameras, refine, refine_loss, rgbd_loss_t,
                               scale_cap, ssim, stabilize_poses, write_history_csv)
from sparsesplat.render import RenderOutput, as_tensor, render, render_tensors, scene_tensors
from sparsesplat.synthetic import SyntheticSceneSpec, generate_synthetic

SPEC200 = SyntheticSceneSpec(gaussian_count=200, camera_count=3)


@pytest.fixture(scope="module")
def synth200():
    return generate_synthetic(SPEC200)


def ssim_oracle(a, b, size=11, sigma=1.5, c1=1e-4, c2=9e-4):
    """Window-by-window SSIM straight from the definition."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    w = np.outer(g, g) / np.outer(g, g).sum()
    a = a[..., None] if a.ndim == 2 else a
    b = b[..., None] if b.ndim == 2 else b
    H, W, C = a.shape
    vals = []
    for ch in range(C):
        for y in range(H - size + 1):
            for x0 in range(W - size + 1):
                pa = a[y : y + size, x0 : x0 + size, ch]
                pb = b[y : y + size, x0 : x0 + size, ch]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cov = (w * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# --- exposure -------------------------------------------------------------


def test_exposure_identity(rng):
    img = rng.uniform(size=(4, 5, 3))
    np.testing.assert_array_equal(apply_exposure(img, ExposureParams()), img)


def test_exposure_arithmetic():
    assert abs(apply_exposure(np.array([0.3]), ExposureParams(2.0, 0.1))[0] - 0.7) < 1e-12


def test_exposure_inverse(rng):
    img = rng.uniform(-1, 2, size=(6, 6, 3))
    e = ExposureParams(1.7, -0.23)
    np.testing.assert_allclose(apply_exposure(apply_exposure(img, e), e.inverse()), img, atol=1e-7)


def test_exposure_clamp_only_for_display():
    e = ExposureParams(2.0, 0.5)
    assert apply_exposure(np.array([0.4]), e)[0] == pytest.approx(1.3)
    assert apply_exposure(np.array([0.4]), e, clamp=True)[0] == 1.0


def test_exposure_gain_positive():
    with pytest.raises(OptimError):
        ExposureParams(0.0, 0.0)


def test_pose_delta_round_trip(rng):
    from conftest import random_pose

    base, target = random_pose(rng), random_pose(rng, max_angle=2.5)
    d = PoseDelta.between(base, target)
    np.testing.assert_allclose(d.apply(base).matrix(), target.matrix(), atol=1e-9)
    np.testing.assert_allclose(PoseDelta.from_vector(d.vector()).vector(), d.vector(), atol=0)


# --- losses ---------------------------------------------------------------


def _frame(img, depth=None, mask=None):
    from conftest import pinhole

    H, W = img.shape[:2]
    return TrainingFrame(img, pinhole(fx=30.0, cx=W / 2, cy=H / 2, width=W, height=H), depth, mask)


def _rendered(color, depth=None, alpha=None):
    H, W = color.shape[:2]
    return RenderOutput(color, np.ones((H, W)) if depth is None else depth, np.ones((H, W)) if alpha is None else alpha)


def test_loss_zero_when_render_matches(rng):
    img, depth = rng.uniform(size=(12, 16, 3)), rng.uniform(1, 3, (12, 16))
    t = masked_rgbd_loss(_rendered(img, depth), _frame(img, depth))
    assert t.rgb == 0.0 and t.depth == 0.0 and t.total == 0.0


def test_loss_constant_error(rng):
    img = rng.uniform(0.2, 0.8, size=(12, 16, 3))
    t = masked_rgbd_loss(_rendered(img + 0.1), _frame(img))
    assert abs(t.rgb - 0.1) < 1e-12


def test_loss_half_mask_cancels(rng):
    img = rng.uniform(0.2, 0.8, size=(12, 16, 3))
    t = masked_rgbd_loss(_rendered(img + 0.1), _frame(img, mask=np.full((12, 16), 0.5)))
    assert abs(t.rgb - 0.1) < 1e-12


def test_loss_empty_mask_flagged(rng):
    img = rng.uniform(size=(12, 16, 3))
    t = masked_rgbd_loss(_rendered(img + 0.2, np.full((12, 16), 9.0)), _frame(img, np.ones((12, 16)), np.zeros((12, 16))))
    assert t.empty_mask and t.rgb == 0.0 and t.depth == 0.0


def test_depth_term_skips_uncovered_pixels(rng):
    img = rng.uniform(size=(12, 16, 3))
    target = np.full((12, 16), 2.0)
    depth = np.full((12, 16), 2.0)
    alpha = np.ones((12, 16))
    depth[:, :8], alpha[:, :8] = 0.0, 0.0  # nothing rendered there
    depth[:, 8:12] = 2.5
    t = masked_rgbd_loss(_rendered(img, depth, alpha), _frame(img, target))
    assert abs(t.depth - 0.25) < 1e-12


def test_beta_extremes(rng, synth200):
    scene = synth200.scene
    img, depth = rng.uniform(size=(60, 80, 3)), rng.uniform(1, 5, (60, 80))
    frame = TrainingFrame(img, synth200.cameras[0], depth)
    out = render(scene, synth200.cameras[0])
    scene_big = scene.copy()
    scene_big.log_scales[:5] += 3.0  # push a few Gaussians past the scale cap
    for beta in (0.0, 1.0):
        t = masked_rgbd_loss(out, frame, LossWeights(beta=beta, lambda_s=2.0), scene_big)
        expect = (t.rgb if beta == 1.0 else t.depth) + 2.0 * t.scale
        assert t.scale > 0 and abs(t.total - expect) < 1e-12


def test_scale_penalty_form(rng):
    pts = np.arange(10.0)[:, None] * np.array([[1.0, 0.0, 0.0]])
    assert scale_cap(pts) == 5.0
    log_scales = torch.log(torch.tensor([[6.0, 1.0, 1.0], [2.0, 7.0, 1.0], [1.0, 1.0, 1.0]], dtype=torch.float64))
    from sparsesplat.optim import scale_penalty_t

    assert abs(float(scale_penalty_t(log_scales, 5.0)) - (1.0 + 4.0) / 3.0) < 1e-12


@pytest.mark.parametrize("c", [1e-3, 0.3, 1.0, 7.0, 1e4])
def test_mask_scaling_invariance_exact(rng, c):
    pred, target = as_tensor(rng.uniform(size=(10, 12, 3))), as_tensor(rng.uniform(size=(10, 12, 3)))
    mask = rng.choice([0.0, 0.5, 1.0], size=(10, 12))
    half = np.where(mask > 0, 0.5, 0.0)
    for m in (mask, half):
        assert float(masked_l1_t(pred, target, as_tensor(c * m))) == float(masked_l1_t(pred, target, as_tensor(m)))


def test_mask_levels_validated(rng):
    with pytest.raises(OptimError):
        _frame(rng.uniform(size=(8, 8, 3)), mask=np.full((8, 8), 0.3))


# --- SSIM and refinement loss -----------------------------------------------


def test_ssim_self_is_one(rng):
    x = rng.uniform(size=(20, 24, 3))
    assert abs(ssim(x, x) - 1.0) < 1e-12


def test_ssim_inverted_checker_negative():
    y, x = np.mgrid[0:24, 0:24]
    board = ((x // 2 + y // 2) % 2).astype(float)
    assert ssim(board, 1 - board) < 0


def test_ssim_matches_direct_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = rng.uniform(size=(16, 18, 3))
        b = np.clip(a + rng.normal(scale=0.2, size=a.shape), 0, 1)
        assert abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-6


def test_ssim_too_small():
    with pytest.raises(OptimError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_refine_loss_degenerate_mixes(rng):
    img = rng.uniform(size=(16, 20, 3))
    other = np.clip(img + rng.normal(scale=0.1, size=img.shape), 0, 1)
    mask = rng.choice([0.0, 0.5, 1.0], size=(16, 20))
    frame = _frame(img, mask=mask)
    assert refine_loss(img, _frame(img), 0.2) == 0.0
    l1 = float(masked_l1_t(as_tensor(other), as_tensor(img), as_tensor(mask)))
    assert refine_loss(other, frame, 0.0) == l1
    m = mask[..., None]
    assert refine_loss(other, frame, 1.0) == pytest.approx(1 - ssim(m * other, m * img), abs=1e-12)


# --- gradient of the training losses ------------------------------------------


def test_loss_gradients_match_finite_differences(synth200):
    # the optimizers descend autograd gradients of these losses; check them against central differences.
    # L1 residuals change sign under larger steps, so the step is small (float64 keeps roundoff far below 2%)
    rng = np.random.default_rng(8)
    cam = synth200.cameras[1]
    target = np.clip(synth200.renders[1].color + rng.normal(scale=0.1, size=(60, 80, 3)), 0, 1)
    frame = TrainingFrame(target, cam, synth200.renders[1].depth * 1.05, rng.choice([0.5, 1.0], size=(60, 80)))
    scene = synth200.scene
    cap = scale_cap(scene.centers) * 0.5
    weights = LossWeights()

    def loss(p, delta, expo, which):
        color, depth, alpha = render_tensors(p, scene.ids, cam, delta, expo)
        if which == "rgbd":
            return rgbd_loss_t(color, depth, alpha, frame, weights, p["log_scales"], cap)[0]
        from sparsesplat.optim import refine_loss_t

        return refine_loss_t(color, frame, 0.2)

    for which in ("rgbd", "refine"):
        p = scene_tensors(scene, requires_grad=True)
        delta = torch.zeros(6, dtype=torch.float64, requires_grad=True)
        expo = torch.tensor([0.05, 0.01], dtype=torch.float64, requires_grad=True)
        value = loss(p, delta, expo, which)
        leaves = {**p, "delta": delta, "expo": expo}
        grads = dict(zip(leaves, torch.autograd.grad(value, list(leaves.values()))))
        checked = 0
        for key in ("centers", "log_scales", "colors", "opacity_logits", "delta", "expo"):
            g = grads[key].numpy().ravel()
            candidates = np.flatnonzero(np.abs(g) > 1e-3 * np.abs(g).max())
            for flat in rng.choice(candidates, size=min(3, candidates.size), replace=False):
                base = leaves[key].detach().numpy().ravel()
                h = 1e-6 * max(abs(base[flat]), 1.0)
                vals = []
                for sgn in (1, -1):
                    q = {k: v.detach().clone() for k, v in leaves.items()}
                    q[key].view(-1)[flat] += sgn * h
                    with torch.no_grad():
                        vals.append(float(loss({k: q[k] for k in p}, q["delta"], q["expo"], which)))
                fd = (vals[0] - vals[1]) / (2 * h)
                assert abs(g[flat] - fd) <= 0.02 * max(abs(fd), abs(g[flat])), (which, key, flat, g[flat], fd)
                checked += 1
        assert checked >= 12


# --- descent ---------------------------------------------------------------


def test_descent_never_accepts_a_rise():
    x = {"x": torch.tensor([3.0, -2.0], dtype=torch.float64)}
    opt = AdaptiveDescent(x, {"x": 5.0}, DescentConfig(iterations=30))

    def f(p, _):
        return ((p["x"] - 1.0) ** 2).sum() + 0.1 * torch.sin(10 * p["x"]).sum()

    cur = float(f(opt.params, False))
    for _ in range(30):
        new, _ = opt.step(f, cur)
        assert new <= cur
        cur = new


def test_descent_non_finite_raises():
    opt = AdaptiveDescent({"x": torch.ones(1, dtype=torch.float64)}, {"x": 1.0}, DescentConfig())
    with pytest.raises(DivergenceError):
        opt.step(lambda p, _: p["x"].sum() * float("nan"), 0.0)


# --- stage one ------------------------------------------------------------


def _perturb(pose, rng, trans=0.05, deg=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    shift = rng.normal(size=3)
    shift *= trans / np.linalg.norm(shift)
    dR = so3_exp(np.deg2rad(deg) * axis)
    from sparsesplat.geometry import RigidPose

    return RigidPose.from_matrix(dR @ pose.R, dR @ pose.translation + shift)


def _pose_error(a, b):
    from sparsesplat.geometry import rotation_angle

    return np.linalg.norm(a.center - b.center), np.rad2deg(rotation_angle(a.R @ b.R.T))


def test_stabilize_recovers_perturbed_pose(synth200):
    rng = np.random.default_rng(2)
    gt = synth200.cameras[1]
    start = gt.with_pose(_perturb(gt.pose, rng))
    frame = TrainingFrame(synth200.renders[1].color, start, synth200.renders[1].depth)
    res = stabilize_poses(synth200.scene, [frame], iterations=60)
    est = posed_cameras([frame], res.poses)[0]
    dt, dr = _pose_error(est.pose, gt.pose)
    assert dt < 0.005 and dr < 0.1
    h = res.histories[0]
    assert all(b <= a for a, b in zip(h, h[1:]))


def test_stabilize_zero_perturbation_stays(synth200):
    frame = TrainingFrame(synth200.renders[0].color, synth200.cameras[0], synth200.renders[0].depth)
    res = stabilize_poses(synth200.scene, [frame], iterations=20)
    assert np.abs(res.poses[0].vector()).max() < 1e-6
    assert abs(res.exposures[0].a - 1.0) < 1e-6 and abs(res.exposures[0].b) < 1e-6


def test_stabilize_recovers_gain(synth200):
    img = synth200.renders[2].color * 1.3
    frame = TrainingFrame(img, synth200.cameras[2], synth200.renders[2].depth)
    res = stabilize_poses(synth200.scene, [frame], iterations=60,
                          lr={"delta_rot": 0.0, "delta_trans": 0.0, "log_a": 4e-2, "b": 5e-3}, lr_final_ratio=0.3)
    assert abs(res.exposures[0].a - 1.3) < 0.02


# --- stage two / three -------------------------------------------------------


def _real_frames(synth, views):
    return [TrainingFrame(synth.renders[v].color, synth.cameras[v], synth.renders[v].depth) for v in views]


def test_joint_recovers_corrupted_colors(synth200):
    rng = np.random.default_rng(4)
    scene = synth200.scene.copy()
    bad = rng.choice(len(scene), size=len(scene) // 10, replace=False)
    scene.colors[bad] = rng.uniform(size=(bad.size, 3))
    frames = _real_frames(synth200, [0, 2])
    res = joint_optimize(scene, frames, JointSchedule(iterations=60, lr={"colors": 5e-2}, lr_final_ratio=0.5,
                                                               optimize_poses=False))
    assert len(res.history) == 60
    totals = res.losses
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    initial = np.mean([masked_rgbd_loss(render(scene, f.camera), f).rgb for f in frames])
    assert res.history[-1].rgb < 0.1 * initial


def test_joint_zero_iterations_is_identity(synth200):
    frames = _real_frames(synth200, [0])
    res = joint_optimize(synth200.scene, frames, JointSchedule(iterations=0))
    assert res.scene.max_abs_difference(synth200.scene) == 0.0 and res.history == []
    assert np.all(res.poses[0].vector() == 0)


def test_joint_is_deterministic(synth200):
    frames = _real_frames(synth200, [0, 2])
    scene = synth200.scene.copy()
    scene.colors = np.clip(scene.colors + 0.1, 0, 1)
    a = joint_optimize(scene, frames, JointSchedule(iterations=5))
    b = joint_optimize(scene, frames, JointSchedule(iterations=5))
    assert a.losses == b.losses and a.scene.max_abs_difference(b.scene) == 0.0


def test_history_csv(tmp_path, synth200):
    res = joint_optimize(synth200.scene, _real_frames(synth200, [0]), JointSchedule(iterations=2))
    write_history_csv(res.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "iter,total,rgb,depth,scale" and len(lines) == 3


def test_refine_no_drift_at_optimum(synth200):
    frames = _real_frames(synth200, [1])
    out, hist = refine(synth200.scene, frames, iterations=5)
    assert out.max_abs_difference(synth200.scene) < 1e-6


def test_refine_improves_ssim_of_blurred_colors():
    spec = SyntheticSceneSpec(gaussian_count=80, camera_count=2, image_size=(32, 24), focal=36.0)
    synth = generate_synthetic(spec)
    scene = synth.scene.copy()
    _, nn = cKDTree(scene.centers).query(scene.centers, k=12)
    scene.colors = scene.colors[nn].mean(axis=1)  # colors blurred across neighboring Gaussians
    frame = _real_frames(synth, [0])[0]
    before = ssim(render(scene, frame.camera).color, frame.image)
    out, hist = refine(scene, [frame], iterations=200, lambda_ssim=0.2, lr={"colors": 2e-2})
    after = ssim(render(out, frame.camera).color, frame.image)
    assert after > before
    assert len(hist) == 200 and all(b <= a for a, b in zip(hist, hist[1:]))


def test_refine_without_ssim_equals_l1_descent(synth200):
    frames = _real_frames(synth200, [0, 2])
    scene = synth200.scene.copy()
    scene.colors = np.clip(scene.colors * 0.8, 0, 1)
    out, hist = refine(scene, frames, iterations=4, lambda_ssim=0.0)

    # the same descent written directly against the masked L1 term
    def l1(p, _):
        total = torch.zeros((), dtype=torch.float64)
        for f in frames:
            color, _, _ = render_tensors(p, scene.ids, f.camera)
            total = total + masked_l1_t(color, as_tensor(f.image), as_tensor(f.mask))
        return total / len(frames)

    cfg = DescentConfig(iterations=4)
    opt = AdaptiveDescent(scene_tensors(scene), dict(optim.DEFAULT_GAUSSIAN_LR), cfg, project=optim._clamp_gaussians)
    with torch.no_grad():
        cur = float(l1(opt.params, False))
    ref_hist = []
    for it in range(4):
        cur, _ = opt.step(l1, cur, cfg.lr_final_ratio ** (it / 3))
        ref_hist.append(cur)
    assert hist == ref_hist
    for k, v in opt.params.items():
        assert torch.equal(v, scene_tensors(out)[k]), k
