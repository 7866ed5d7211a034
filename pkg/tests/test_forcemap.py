import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import dblquad

from accelmix.errors import DomainError, InsufficientData, ValidationError
from accelmix.forcemap import (
    BivariatePoints, GridSpec, build_force_map, global_bounds, inverse_logit, kde_density,
    load_force_maps, logit_transform, normal_scale_bandwidth, numeric_derivative,
    read_force_map_csv, save_force_maps, write_force_map_csv,
)
from accelmix.ingest import EpochSeries


def _series(f, dt=5.0, t=None):
    f = np.asarray(f, dtype=float)
    t = np.arange(len(f)) * dt if t is None else np.asarray(t, dtype=float)
    return EpochSeries("p", t, f, np.array(["moderate"] * len(f), dtype=object), dt)


@pytest.mark.parametrize("f, expected", [
    ([40, 40, 40], [(40, 0), (40, 0)]),
    ([0, 5, 10], [(5, 1), (10, 1)]),
    ([50, 60, 30], [(60, 2), (30, -6)]),
])
def test_derivative_examples(f, expected):
    np.testing.assert_array_equal(numeric_derivative(_series(f)).points, expected)


def test_derivative_needs_adjacent_pair():
    with pytest.raises(InsufficientData):
        numeric_derivative(_series([1, 2], t=[0, 20]))


def test_bandwidth_singular_gets_ridge():
    H = normal_scale_bandwidth(BivariatePoints([[0, 0], [2, 2]]))
    assert np.all(np.linalg.eigvalsh(H) > 0)
    np.testing.assert_allclose(H, 2 ** (-1 / 3) * (np.array([[2, 2], [2, 2]]) + 2e-8 * np.eye(2)))


def test_bandwidth_scalar_factor():
    # 8 points with unbiased sample covariance exactly I
    Z = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]] * 2, dtype=float)
    Z *= np.sqrt(7 / 8)
    np.testing.assert_allclose(np.cov(Z, rowvar=False), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(normal_scale_bandwidth(BivariatePoints(Z)), 0.5 * np.eye(2), atol=1e-12)


def test_bandwidth_matches_bruteforce(rng):
    P = rng.multivariate_normal([3, 0], [[4, 1], [1, 2]], size=100)
    m = P.mean(0)
    S = sum(np.outer(p - m, p - m) for p in P) / 99
    np.testing.assert_allclose(normal_scale_bandwidth(BivariatePoints(P)), 100 ** (-1 / 3) * S,
                               rtol=1e-12)


def test_kde_mode_value():
    assert kde_density(BivariatePoints([[1.0, 2.0]]), np.eye(2), [1.0, 2.0]) == pytest.approx(
        1 / (2 * np.pi), rel=1e-14)


def test_kde_decays_and_nonnegative(rng):
    pts = BivariatePoints(rng.normal(size=(5, 2)))
    assert kde_density(pts, np.eye(2), [1e3, -1e3]) == 0.0
    assert np.all(kde_density(pts, np.eye(2), rng.normal(size=(20, 2)) * 5) >= 0)


def test_kde_integrates_to_one(rng):
    pts = BivariatePoints(rng.normal(size=(5, 2)))
    A = rng.normal(size=(2, 2))
    H = A @ A.T + 0.3 * np.eye(2)
    val, _ = dblquad(lambda y, x: kde_density(pts, H, [x, y]), -15, 15, -15, 15,
                     epsabs=1e-6)
    assert 0.999 <= val <= 1.001


def test_near_delta_lands_in_cell():
    grid = GridSpec(0, 25, 0, 25)
    centre = grid.centers()[12, 12]
    fmap = build_force_map(BivariatePoints([centre]), grid, 1e-4 * np.eye(2))
    assert fmap.weights[12, 12] >= 0.99


def test_symmetric_cloud_gives_symmetric_map(rng):
    P = rng.normal(size=(40, 2)) * [5, 1] + [20, 0]
    P = np.vstack([P, P * [1, -1]])
    pts = BivariatePoints(P)
    fmap = build_force_map(pts, GridSpec(0, 40, -4, 4), normal_scale_bandwidth(pts))
    np.testing.assert_allclose(fmap.weights, fmap.weights[::-1], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(3, 60), st.floats(0.2, 3.0))
def test_normalisation_contract(seed, n, scale):
    r = np.random.default_rng(seed)
    pts = BivariatePoints(r.normal(size=(n, 2)) * scale + [10, 0])
    fmap = build_force_map(pts, GridSpec(0, 20, -5, 5), normal_scale_bandwidth(pts))
    assert abs(fmap.weights.sum() - 1) < 1e-12
    assert fmap.weights.min() >= 1e-10 / (1 + 625 * 1e-10)


def test_grid_too_small_warning(rng):
    pts = BivariatePoints(rng.normal(size=(50, 2)) * 10)
    fmap = build_force_map(pts, GridSpec(0, 1, 0, 1), normal_scale_bandwidth(pts))
    assert fmap.captured_mass < 0.95
    assert fmap.warnings and fmap.warnings[0].startswith("GridTooSmall")


def test_global_bounds_percentiles(rng):
    sets = [BivariatePoints(rng.normal(size=(100, 2)) + [50, 0]) for _ in range(3)]
    g = global_bounds(sets)
    pooled = np.vstack([s.points for s in sets])
    assert g.f_min == 0 and g.f_max == pytest.approx(np.percentile(pooled[:, 0], 99.5))
    assert g.d_min == -g.d_max


def test_grid_validation():
    with pytest.raises(ValidationError):
        GridSpec(1, 1, 0, 1)


def test_logit_examples():
    assert logit_transform(np.array([0.5]))[0] == 0.0
    assert logit_transform(np.array([0.7310585786300049]))[0] == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DomainError):
        logit_transform(np.array([0.0, 0.5]))


def test_logit_bijection(rng):
    w = rng.dirichlet(np.ones(625)).reshape(25, 25)
    np.testing.assert_allclose(inverse_logit(logit_transform(w)), w, rtol=1e-12, atol=0)


def test_persistence_round_trips(tmp_path, rng):
    grid = GridSpec(0, 100, -5, 5)
    maps = []
    for k in range(3):
        pts = BivariatePoints(rng.normal(size=(30, 2)) * [10, 1] + [50, 0], f"p{k}")
        maps.append(build_force_map(pts, grid, normal_scale_bandwidth(pts)))
    save_force_maps(maps, tmp_path / "m.npz")
    back = load_force_maps(tmp_path / "m.npz")
    assert [m.participant_id for m in back] == ["p0", "p1", "p2"]
    assert all(np.array_equal(a.weights, b.weights) for a, b in zip(maps, back))
    write_force_map_csv(maps[1], tmp_path / "m.csv")
    one = read_force_map_csv(tmp_path / "m.csv")
    assert one.grid == grid and np.array_equal(one.weights, maps[1].weights)
