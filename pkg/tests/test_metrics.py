import numpy as np
import pytest

from flowdenoise import metrics
from flowdenoise.metrics import NoiseSpec, SurfaceSpec


def chamfer_oracle(a, b):
    def one_way(p, q):
        return sum(min(float(((x - y) ** 2).sum()) for y in q) for x in p) / len(p)
    return one_way(a, b) + one_way(b, a)


def cov_matches(draws, expected, tol=0.03):
    """Every entry within tol relative, zero entries within tol of the diagonal scale."""
    c = np.cov(draws, rowvar=False)
    scale = np.abs(np.diag(expected)).max()
    ref = np.where(expected != 0, np.abs(expected), scale)
    return np.all(np.abs(c - expected) <= tol * ref), c


def test_chamfer_identical():
    a = np.random.default_rng(0).normal(size=(30, 3))
    assert metrics.chamfer(a, a) == 0.0


def test_chamfer_two_points():
    assert metrics.chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2.0


@pytest.mark.parametrize("seed", range(5))
def test_chamfer_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(80, 3)), rng.normal(size=(120, 3))
    assert abs(metrics.chamfer(a, b) - chamfer_oracle(a, b)) <= 1e-12


def test_chamfer_symmetric_and_translation_invariant():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(55, 3))
    assert metrics.chamfer(a, b) == pytest.approx(metrics.chamfer(b, a), abs=1e-15)
    shift = np.array([10.0, -3.0, 2.0])
    assert metrics.chamfer(a, b, b) == pytest.approx(metrics.chamfer(a + shift, b + shift, b + shift), rel=1e-9)


def test_chamfer_reference_normalizes():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(50, 3))
    assert metrics.chamfer(3 * a, 3 * b, 3 * b) == pytest.approx(metrics.chamfer(a, b, b), rel=1e-12)


def test_chamfer_empty():
    with pytest.raises(ValueError):
        metrics.chamfer(np.zeros((0, 3)), [[0, 0, 0]])


def test_p2s_on_sphere_is_zero():
    d = np.random.default_rng(8).normal(size=(100, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert metrics.point_to_surface(d, SurfaceSpec("sphere")) <= 1e-30


def test_p2s_single_point():
    assert metrics.point_to_surface([[2, 0, 0]], SurfaceSpec("sphere")) == 1.0


def dense_oracle(points, dense):
    from scipy.spatial import cKDTree
    dist, _ = cKDTree(dense).query(points)
    return float((dist**2).mean())


def test_p2s_matches_dense_sampling_sphere():
    rng = np.random.default_rng(9)
    dense = rng.normal(size=(100_000, 3))
    dense /= np.linalg.norm(dense, axis=1, keepdims=True)
    pts = rng.normal(size=(200, 3)) * 0.6
    assert abs(metrics.point_to_surface(pts, SurfaceSpec("sphere")) - dense_oracle(pts, dense)) <= 1e-3


def test_p2s_matches_dense_sampling_torus():
    rng = np.random.default_rng(10)
    th, ph = rng.uniform(0, 2 * np.pi, (2, 100_000))
    ring = 1 + 0.4 * np.cos(th)
    dense = np.stack([ring * np.cos(ph), ring * np.sin(ph), 0.4 * np.sin(th)], 1)
    pts = dense[:200] + rng.normal(size=(200, 3)) * 0.1
    surf = SurfaceSpec("torus", major=1.0, minor=0.4)
    assert abs(metrics.point_to_surface(pts, surf) - dense_oracle(pts, dense)) <= 1e-3


def test_p2s_plane():
    surf = SurfaceSpec("plane", center=[0, 0, 1], normal=[0, 0, 2])
    assert metrics.point_to_surface([[5, 5, 3], [1, 2, 0]], surf) == pytest.approx(2.5)


def test_surface_parse():
    s = SurfaceSpec.parse("torus:0,0,1,2,0.5")
    assert s.kind == "torus" and s.major == 2 and s.minor == 0.5 and s.center.tolist() == [0, 0, 1]
    with pytest.raises(ValueError):
        SurfaceSpec.parse("sphere:1,2")


def test_noise_zero_scale():
    for kind in metrics.NOISE_KINDS:
        assert not metrics.gen_noise(NoiseSpec(kind, 0.0), 10, 1.0, np.random.default_rng(0)).any()


def test_gaussian_covariance():
    draws = metrics.gen_noise(NoiseSpec("gaussian", 0.02), 100_000, 5.0, np.random.default_rng(11))
    ok, c = cov_matches(draws, 0.1**2 * np.eye(3))
    assert ok, c


def test_aniso_covariance():
    draws = metrics.gen_noise(NoiseSpec("aniso_gaussian", 0.5), 100_000, 2.0, np.random.default_rng(12))
    expected = np.array([[1, -0.5, -0.25], [-0.5, 1, -0.25], [-0.25, -0.25, 1]])
    ok, c = cov_matches(draws, expected)
    assert ok, c


def test_aniso_factor_is_symmetric_root():
    f = metrics.ANISO_FACTOR
    assert np.allclose(f, f.T) and np.allclose(f @ f, metrics.ANISO_COV, atol=1e-14)


def test_laplace_covariance():
    # Laplace(0, b) has variance 2 b^2 per coordinate
    draws = metrics.gen_noise(NoiseSpec("laplace", 0.1), 100_000, 1.0, np.random.default_rng(13))
    ok, c = cov_matches(draws, 2 * 0.01 * np.eye(3))
    assert ok, c


def test_uniform_sphere_covariance_and_bound():
    # uniform in a radius-s ball: variance s^2 / 5 per coordinate
    draws = metrics.gen_noise(NoiseSpec("uniform_sphere", 0.3), 100_000, 1.0, np.random.default_rng(14))
    assert np.linalg.norm(draws, axis=1).max() <= 0.3
    ok, c = cov_matches(draws, 0.09 / 5 * np.eye(3))
    assert ok, c


def test_uniform_sphere_radial_law():
    # P(|x| <= s/2) = 1/8 for a uniform ball
    draws = metrics.gen_noise(NoiseSpec("uniform_sphere", 1.0), 100_000, 1.0, np.random.default_rng(15))
    assert abs((np.linalg.norm(draws, axis=1) <= 0.5).mean() - 0.125) < 0.005


@pytest.mark.parametrize("kind", metrics.NOISE_KINDS)
def test_noise_seed_deterministic(kind):
    a = metrics.gen_noise(NoiseSpec(kind, 0.01), 50, 1.0, np.random.default_rng(3))
    b = metrics.gen_noise(NoiseSpec(kind, 0.01), 50, 1.0, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_noise_spec_parse():
    assert NoiseSpec.parse("laplace:0.02") == NoiseSpec("laplace", 0.02)
    for bad in ("gaussian", "pink:0.1", "gaussian:-1"):
        with pytest.raises(ValueError):
            NoiseSpec.parse(bad)


def test_add_noise_uses_bounding_radius():
    pts = np.array([[-2.0, 0, 0], [2.0, 0, 0]])
    a = metrics.add_noise(pts, NoiseSpec("gaussian", 0.1), np.random.default_rng(4))
    b = metrics.gen_noise(NoiseSpec("gaussian", 0.1), 2, 2.0, np.random.default_rng(4))
    assert np.allclose(a - pts, b, rtol=0, atol=1e-15)
