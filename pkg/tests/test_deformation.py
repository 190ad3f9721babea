import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from conftest import perturb_corrector, random_pose
from handfield.deformation import (
    CanonicalBox,
    ErrorCorrector,
    PosedHand,
    correct,
    deform_ray,
    deform_ray_samples,
    lbs_warp,
    side_map_points,
    side_map_pose,
    stratified_edges,
)
from handfield.hand import FINGERS, Pose, forward_kinematics, mirror_map_pose, ring_cameras
from handfield.mathcore import Ray, frustum_moments, positional_encoding
from handfield.nn import ParameterStore


@pytest.fixture(scope="module")
def box(right_hand):
    return CanonicalBox.from_vertices(right_hand[1].vertices)


def _corrector(box, seed=0, perturb=False):
    c = ErrorCorrector(ParameterStore(torch.float64), box, generator=torch.Generator().manual_seed(seed))
    if perturb:
        perturb_corrector(c, seed)
    return c


def _hand_rays(hand, n_rays, seed, size=32):
    cams = ring_cameras(4, [0, 0.4, 0], size=size)
    rng = np.random.default_rng(seed)
    o, d, r = [], [], []
    for cam in cams:
        px = cam.pixel_grid()
        oo, dd = cam.rays(px)
        o.append(oo)
        d.append(dd)
        r.append(np.full(len(oo), cam.radius))
    o, d, r = np.vstack(o), np.vstack(d), np.concatenate(r)
    pick = rng.choice(len(o), n_rays, replace=False)
    return o[pick], d[pick], r[pick]


# lbs warp ---------------------------------------------------------------------


def test_lbs_canonical_pose_is_identity(right_hand):
    skel, mesh = right_hand
    hand = PosedHand.build(skel, mesh, Pose())
    pts = np.random.default_rng(0).uniform(hand.lo, hand.hi, (200, 3))
    x_hat, w, d = lbs_warp(pts, hand)
    assert np.max(np.abs(x_hat - pts)) < 1e-9
    assert np.allclose(w.sum(1), 1.0)


def test_lbs_root_translation(right_hand):
    skel, mesh = right_hand
    t = np.array([0.2, -0.1, 0.3])
    hand = PosedHand.build(skel, mesh, Pose(root_translation=t))
    pts = np.random.default_rng(1).uniform(hand.lo, hand.hi, (100, 3))
    assert np.allclose(lbs_warp(pts, hand)[0], pts - t, atol=1e-12)


def test_lbs_one_bone_point_inverts_bend(right_hand):
    skel, mesh = right_hand
    j = FINGERS["middle"][1]
    aa = np.array([0.0, 0.0, np.pi / 2])
    pose = Pose()
    pose.joint_rotations[j] = aa
    hand = PosedHand.build(skel, mesh, pose)
    only = np.flatnonzero(mesh.weights[:, j] > 1 - 1e-12)
    x_ob = hand.vertices[only[:20]]
    x_hat, w, _ = lbs_warp(x_ob, hand)
    pivot = forward_kinematics(skel, pose)[j].translation
    Rinv = Rotation.from_rotvec(aa).as_matrix().T
    assert np.allclose(w[:, j], 1.0)
    assert np.allclose(x_hat, (x_ob - pivot) @ Rinv.T + pivot, atol=1e-12)
    assert np.allclose(x_hat, mesh.vertices[only[:20]], atol=1e-12)


def test_lbs_pose_consistency_forward_recovers_point(right_hand):
    skel, mesh = right_hand
    pose = random_pose(np.random.default_rng(3), 0.3)
    hand = PosedHand.build(skel, mesh, pose)
    j = FINGERS["ring"][2]
    only = np.flatnonzero(mesh.weights[:, j] > 1 - 1e-12)[:20]
    x_ob = hand.vertices[only]
    x_hat, _, _ = lbs_warp(x_ob, hand)
    G = forward_kinematics(skel, pose)[j].matrix() @ np.linalg.inv(forward_kinematics(skel, Pose())[j].matrix())
    back = x_hat @ G[:3, :3].T + G[:3, 3]
    assert np.allclose(back, x_ob, atol=1e-6)


# corrector --------------------------------------------------------------------


def test_fresh_corrector_right_is_bitwise_identity(box):
    c = _corrector(box)
    x = torch.as_tensor(np.random.default_rng(0).normal(0, 0.2, (50, 3)))
    x_can, r = correct(x, random_pose(np.random.default_rng(1)), "right", c)
    assert torch.equal(x_can, x)
    assert torch.count_nonzero(r) == 0


def test_fresh_corrector_left_reflects_into_shared_frame(box):
    c = _corrector(box)
    x = np.random.default_rng(0).normal(0, 0.2, (50, 3))
    x_can, r = correct(x, random_pose(np.random.default_rng(1)), "left", c)
    assert torch.count_nonzero(r) == 0
    # literal mapping: a left-hand point in its own canonical frame lands on its mirror
    assert np.array_equal(x_can.detach().numpy(), side_map_points(x, "left"))
    assert np.array_equal(side_map_points(x_can.detach().numpy(), "left"), x)


def test_left_hand_queries_the_mirrored_inputs(box):
    c = _corrector(box, 2, perturb=True)
    x = np.random.default_rng(0).normal(0, 0.2, (30, 3))
    p = random_pose(np.random.default_rng(4))
    left, r_left = correct(x, p, "left", c)
    _, r_right = correct(side_map_points(x, "left"), mirror_map_pose(p), "right", c)
    assert torch.count_nonzero(r_left) > 0
    assert torch.allclose(r_left, r_right, atol=1e-12)
    expected = side_map_points(torch.as_tensor(x) + r_left, "left")
    assert torch.allclose(left, expected, atol=1e-12)


def test_side_maps_are_involutions():
    x = np.random.default_rng(0).normal(size=(10, 3))
    p = np.random.default_rng(1).normal(size=48)
    for side in ("left", "right"):
        assert np.array_equal(side_map_points(side_map_points(x, side), side), x)
        assert np.array_equal(side_map_pose(side_map_pose(p, side), side), p)


def test_corrector_matches_independent_forward(box):
    c = _corrector(box, 5, perturb=True)
    x = np.random.default_rng(0).normal(0, 0.2, (7, 3))
    pose = random_pose(np.random.default_rng(6))
    got = c.residual(x, pose.flat()).detach().numpy()

    # scratch forward pass: PE of the normalized point, pose appended, ReLU hidden layers
    xn = (x - box.center) * box.scale
    feats = [np.sin(2.0**k * xn) for k in range(6)] + [np.cos(2.0**k * xn) for k in range(6)]
    h = np.concatenate([np.concatenate(feats, 1), np.tile(pose.flat(), (7, 1))], 1)
    n = c.spec.n_layers
    for i in range(n):
        h = h @ c.store[f"correction.{i}.weight"].detach().numpy() + c.store[f"correction.{i}.bias"].detach().numpy()
        if i < n - 1:
            h = np.maximum(h, 0.0)
    assert np.allclose(got, h, atol=1e-6)
    assert np.allclose(positional_encoding(xn, 6), np.concatenate(feats, 1), atol=1e-12)


def test_corrector_input_width(box):
    c = _corrector(box)
    assert c.spec.widths[0] == 6 * 6 + 48
    assert c.spec.widths[-1] == 3


# ray samples ------------------------------------------------------------------


def test_ray_missing_box_is_empty(right_hand, box):
    skel, mesh = right_hand
    hand = PosedHand.build(skel, mesh, Pose())
    ray = Ray(np.array([10.0, 10.0, 10.0]), np.array([1.0, 0.0, 0.0]), 0.001)
    assert deform_ray(ray, hand, box, _corrector(box)) == []


def test_canonical_pose_samples_are_identity(right_hand, box):
    """1000+ near-surface samples at the canonical pose map to their observation means."""
    skel, mesh = right_hand
    hand = PosedHand.build(skel, mesh, Pose())
    c = _corrector(box)
    o, d, r = _hand_rays(hand, 400, 0)
    s = deform_ray_samples(o, d, r, hand, box, 64)
    rows, cols = s.active_index()
    assert len(rows) >= 1000
    mean, _ = frustum_moments(o[rows], d[rows], r[rows], s.t0[rows, cols], s.t1[rows, cols])
    with torch.no_grad():
        x_can, res = correct(s.x_hat, hand.pose, "right", c)
    assert np.max(np.abs(x_can.detach().numpy() - mean)) < 1e-9
    assert torch.count_nonzero(res) == 0


def test_sample_depths_increase_inside_bounds(right_hand, box):
    skel, mesh = right_hand
    hand = PosedHand.build(skel, mesh, random_pose(np.random.default_rng(0), 0.2))
    o, d, r = _hand_rays(hand, 100, 1)
    rng = np.random.default_rng(2)
    s = deform_ray_samples(o, d, r, hand, box, 64, rng)
    hit = s.hit
    assert np.all(np.diff(s.t[hit], axis=1) > 0)
    assert np.all(s.t0[hit] < s.t[hit]) and np.all(s.t[hit] < s.t1[hit])
    assert np.all(s.t0[hit, 0] >= 0) and np.allclose(s.t1[hit, -1], s.far[hit])


def test_covariance_stays_symmetric_psd(right_hand, box):
    skel, mesh = right_hand
    hand = PosedHand.build(skel, mesh, random_pose(np.random.default_rng(1), 0.3))
    o, d, r = _hand_rays(hand, 200, 3)
    s = deform_ray_samples(o, d, r, hand, box, 32)
    assert len(s.cov)
    assert np.allclose(s.cov, np.swapaxes(s.cov, 1, 2), atol=1e-15)
    assert np.linalg.eigvalsh(s.cov).min() > -1e-12


def test_far_samples_are_inactive(right_hand, box):
    skel, mesh = right_hand
    hand = PosedHand.build(skel, mesh, Pose())
    o, d, r = _hand_rays(hand, 200, 4)
    s = deform_ray_samples(o, d, r, hand, box, 64)
    finite = np.isfinite(s.distance)
    assert np.all(s.distance[s.active] <= hand.empty_threshold)
    assert not np.any(s.active & s.degenerate)
    assert np.all(~s.active[~finite])


def test_degenerate_samples_flagged(right_hand):
    skel, mesh = right_hand
    hand = PosedHand.build(skel, mesh, Pose())
    # a box that excludes the fingers makes their samples degenerate
    tiny = CanonicalBox(np.array([-0.2, -0.1, -0.3]), np.array([0.2, 0.3, 0.3]))
    o, d, r = _hand_rays(hand, 300, 5)
    s = deform_ray_samples(o, d, r, hand, tiny, 32)
    assert s.degenerate.any()
    assert np.all(tiny.contains(s.x_hat))
    ray = Ray(o[np.flatnonzero(s.degenerate.any(1))[0]], d[np.flatnonzero(s.degenerate.any(1))[0]], 0.001)
    samples = deform_ray(ray, hand, tiny, _corrector(tiny))
    assert any(x.degenerate for x in samples)
    assert all(np.all(np.isfinite(x.residual)) for x in samples)


def test_residuals_feed_deform_loss(small_scene):
    from conftest import make_state
    from handfield.losses import TrainBatch, loss_deform
    from handfield.render import render_rays

    state = make_state(small_scene, seed=3)
    cam = small_scene.split("train")[0]
    o, d = cam.rays(cam.pixel_grid())
    out = render_rays(state, o, d, np.full(len(o), cam.radius))
    with torch.no_grad():
        direct = torch.cat([correct(s.x_hat, s.pose, s.side, state.corrector)[1] for s in out.samples if len(s.x_hat)])
    assert torch.allclose(out.residuals, direct, atol=1e-12)
    n = len(o)
    batch = TrainBatch(out.color, torch.full((n,), np.inf, dtype=out.color.dtype), out.color, out.depth,
                       out.weights, torch.as_tensor(out.real), out.residuals)
    assert torch.allclose(loss_deform(batch), torch.linalg.norm(direct, dim=-1).mean())


def test_stratified_edges():
    near, far = np.array([1.0, 2.0]), np.array([2.0, 5.0])
    e = stratified_edges(near, far, 4)
    assert np.allclose(e[0], [1.0, 1.25, 1.5, 1.75, 2.0])
    j = stratified_edges(near, far, 4, np.random.default_rng(0))
    assert np.all(np.diff(j, axis=1) > 0)
    assert np.array_equal(j[:, [0, -1]], e[:, [0, -1]])
