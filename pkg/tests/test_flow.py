import numpy as np
import pytest

from flowdenoise import flow, nn
from flowdenoise.flow import FilterConfig, FlowModel, VelocityStack
from flowdenoise.geometry import extract_patch


def tiny_stack(K, seed=0, width=8):
    rng = np.random.default_rng(seed)
    specs = (nn.edgeconv(3, width, 6), nn.mlp(width, 3))
    return VelocityStack([nn.init_net(specs, rng) for _ in range(K)])


def tiny_distance(seed=1):
    return nn.init_net((nn.edgeconv(3, 6, 6), nn.mlp(6, 6), nn.max_pool(6), nn.sigmoid_head(6)),
                       np.random.default_rng(seed))


def test_interpolate_endpoints_exact():
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    assert np.array_equal(flow.interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(flow.interpolate(x0, x1, 1.0), x1)
    assert np.allclose(flow.interpolate(x0, x1, 0.25), 0.75 * x0 + 0.25 * x1)


def test_interpolate_rejects_bad_t():
    with pytest.raises(ValueError):
        flow.interpolate(np.zeros((2, 3)), np.zeros((2, 3)), 1.5)


def test_coupled_step_constant_velocity():
    stack = VelocityStack([nn.constant_velocity_net([0.6, 0.0, -1.2])])
    out = flow.coupled_step(stack, np.zeros((4, 3)), 0, 6, 0.5)
    assert np.allclose(out, [[0.05, 0.0, -0.1]] * 4, rtol=0, atol=1e-15)


def test_coupled_step_rejects_bad_d():
    stack = VelocityStack([nn.zero_net(nn.VELOCITY_SPECS)])
    for d in (0.0, 1.5):
        with pytest.raises(ValueError):
            flow.coupled_step(stack, np.zeros((4, 3)), 0, 6, d)


def test_constant_velocity_reaches_target():
    # with d = 1 the full pass moves every point by exactly the velocity
    v = np.array([0.1, -0.2, 0.3])
    stack = VelocityStack([nn.constant_velocity_net(v), nn.constant_velocity_net(v)])
    x = np.random.default_rng(1).normal(size=(20, 3))
    traj = flow.integrate(stack, None, x, FilterConfig(K=2, N=3))
    assert len(traj.states) == 7
    assert np.allclose(traj.states[-1], x + v, rtol=0, atol=1e-14)
    assert flow.straightness(traj) == pytest.approx(1.0, abs=1e-12)


def test_zero_model_is_identity_on_patch():
    model = FlowModel.zeros()
    pts = np.random.default_rng(2).normal(size=(300, 3))
    patch = extract_patch(pts, 0, 64)
    out, traj = flow.filter_patch(model.stack, model.distance, patch, model.filter_config(2))
    assert np.array_equal(out.points, patch.points)
    assert traj.distances == [0.5, 0.5]


@pytest.mark.parametrize("seed", range(20))
def test_sequential_equals_summed(seed):
    rng = np.random.default_rng(100 + seed)
    K = int(rng.integers(1, 4))
    cfg = FilterConfig(K=K, N=int(rng.integers(1, 4)), repeats=int(rng.integers(1, 3)))
    stack, dm = tiny_stack(K, seed), tiny_distance(seed)
    x = rng.normal(size=(int(rng.integers(8, 40)), 3))
    traj = flow.integrate(stack, dm, x, cfg)
    assert np.abs(traj.states[-1] - flow.summed_update(stack, dm, traj, cfg)).max() <= 1e-12


def test_k1_without_distance_is_plain_euler():
    stack = tiny_stack(1, 3)
    x = np.random.default_rng(4).normal(size=(25, 3))
    traj = flow.integrate(stack, None, x, FilterConfig(K=1, N=4))
    y = x.copy()
    for _ in range(4):
        y = y + 0.25 * nn.forward(stack.modules[0], y)[0]
    assert np.array_equal(traj.states[-1], y)


def test_distance_evaluated_once_per_pass():
    stack, dm = tiny_stack(2, 5), tiny_distance(6)
    x = np.random.default_rng(7).normal(size=(30, 3))
    traj = flow.integrate(stack, dm, x, FilterConfig(K=2, N=3, repeats=3))
    assert len(traj.distances) == 3
    for r in range(3):
        assert traj.distances[r] == flow.distance_forward(dm, traj.states[6 * r])


def test_stack_size_must_match_config():
    with pytest.raises(ValueError):
        flow.integrate(tiny_stack(2), None, np.zeros((5, 3)), FilterConfig(K=3))


def test_straightness_right_angle():
    states = [np.zeros((1, 3)), np.array([[1.0, 0, 0]]), np.array([[1.0, 1, 0]])]
    assert flow.straightness(states) == pytest.approx(np.sqrt(2), rel=1e-12)


def test_straightness_skips_still_points():
    states = [np.zeros((2, 3)), np.array([[1.0, 0, 0], [0, 0, 0]])]
    assert flow.straightness(states) == 1.0


def test_straightness_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        flow.straightness([np.zeros((3, 3)), np.zeros((3, 3))])


def test_straightness_at_least_one():
    stack = tiny_stack(2, 8)
    x = np.random.default_rng(9).normal(size=(40, 3))
    assert flow.straightness(flow.integrate(stack, None, x, FilterConfig(K=2))) >= 1.0


def sphere(n, seed):
    p = np.random.default_rng(seed).normal(size=(n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def test_cloud_zero_model_identity():
    model = FlowModel.zeros()
    pts = sphere(600, 10)
    out = flow.filter_cloud(model.stack, model.distance, pts, model.filter_config())
    assert np.allclose(out, pts, rtol=0, atol=1e-12)


def test_cloud_translation_equivariant():
    stack, dm = tiny_stack(2, 11), tiny_distance(12)
    cfg = FilterConfig(K=2, N=2, patch_k=64)
    pts = sphere(300, 13)
    shift = np.array([3.0, -2.0, 5.0])
    a = flow.filter_cloud(stack, dm, pts, cfg)
    b = flow.filter_cloud(stack, dm, pts + shift, cfg)
    assert np.allclose(b - shift, a, rtol=0, atol=1e-9)


def test_cloud_deterministic_and_worker_independent():
    stack, dm = tiny_stack(2, 14), tiny_distance(15)
    cfg = FilterConfig(K=2, N=2, patch_k=64)
    pts = sphere(400, 16)
    a = flow.filter_cloud(stack, dm, pts, cfg)
    assert np.array_equal(a, flow.filter_cloud(stack, dm, pts, cfg))
    assert np.array_equal(a, flow.filter_cloud(stack, dm, pts, cfg, workers=4))


def test_cloud_smaller_than_patch():
    model = FlowModel.zeros()
    with pytest.raises(ValueError):
        flow.filter_cloud(model.stack, model.distance, sphere(100, 0), model.filter_config())


def test_point_trajectories_end_at_output():
    stack = tiny_stack(2, 17)
    cfg = FilterConfig(K=2, N=3, patch_k=64)
    pts = sphere(250, 18)
    res = flow.filter_cloud_full(stack, None, pts, cfg)
    tr = res.point_trajectories(pts)
    assert tr.shape == (7, 250, 3)
    assert np.allclose(tr[0], pts, rtol=0, atol=1e-12)
    assert np.allclose(tr[-1], res.points, rtol=0, atol=1e-12)


def test_model_save_load(tmp_path):
    rng = np.random.default_rng(19)
    model = FlowModel(VelocityStack([nn.init_net(nn.VELOCITY_SPECS, rng) for _ in range(2)]),
                      nn.init_net(nn.DISTANCE_SPECS, rng), N=4, patch_k=128)
    model.save(tmp_path / "m.spcf")
    back = FlowModel.load(tmp_path / "m.spcf")
    assert back.equal(model) and back.N == 4 and back.patch_k == 128


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(repeats=0)
    assert FilterConfig(K=3, N=4).T == 12


def test_interpolate_midpoint():
    assert flow.interpolate([[0, 0, 0]], [[2, 0, 0]], 0.5).tolist() == [[1.0, 0.0, 0.0]]


def test_coupled_step_quarter_and_half():
    stack = VelocityStack([nn.constant_velocity_net([1.0, 0.0, 0.0])])
    x = np.random.default_rng(20).normal(size=(6, 3))
    full = flow.coupled_step(stack, x, 0, 4, 1.0)
    assert np.allclose(full - x, np.tile([0.25, 0.0, 0.0], (6, 1)), rtol=0, atol=1e-15)
    half = flow.coupled_step(stack, x, 0, 4, 0.5)
    assert np.allclose(half - x, (full - x) / 2, rtol=0, atol=1e-15)


def test_zero_module_leaves_state():
    stack = VelocityStack([nn.zero_net(nn.VELOCITY_SPECS)])
    x = np.random.default_rng(21).normal(size=(6, 3))
    assert np.array_equal(flow.coupled_step(stack, x, 0, 3, 0.7), x)


def test_single_step_with_zero_distance_net():
    stack = VelocityStack([nn.constant_velocity_net([1.0, 0.0, 0.0])])
    pts = np.random.default_rng(22).normal(size=(40, 3))
    patch = extract_patch(pts, 0, 40)
    out, traj = flow.filter_patch(stack, nn.zero_net(nn.DISTANCE_SPECS), patch, FilterConfig(K=1, N=1))
    assert np.allclose(out.points - patch.points, [[0.5, 0.0, 0.0]] * 40, rtol=0, atol=1e-15)
    assert len(traj.states) == 2 and traj.distances == [0.5]


def test_straightness_two_states_and_collinear():
    a, b, c = np.zeros((1, 3)), np.array([[1.0, 2.0, 0]]), np.array([[2.0, 4.0, 0]])
    assert flow.straightness([a, b]) == 1.0
    assert flow.straightness([a, b, c]) == 1.0


def test_distance_output_in_unit_interval():
    dm = nn.init_net(nn.DISTANCE_SPECS, np.random.default_rng(23))
    for seed in range(5):
        d = flow.distance_forward(dm, np.random.default_rng(seed).normal(size=(30, 3)) * 10)
        assert 0.0 < d < 1.0
