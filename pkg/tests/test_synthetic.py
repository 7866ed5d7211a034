import numpy as np
import pytest

from accelmix.errors import ValidationError
from accelmix.ingest import EpochSeries
from accelmix.synthetic import (
    ActivityComponent, EXAMPLE_GRID, MatrixComponent, SyntheticCohortSpec, bump_logit_map,
    generate_synthetic, three_cluster_activity_spec, three_cluster_map_spec, write_cohort,
)


def test_identity_covariance_variance():
    comp = MatrixComponent(1000, np.zeros((4, 5)))
    X = np.asarray(generate_synthetic(SyntheticCohortSpec([comp], seed=2)).observations)
    np.testing.assert_allclose(X.var(axis=0), 1.0, rtol=0.15)
    assert abs(X.var(axis=0).mean() - 1.0) < 0.05


def test_generator_covariance_matches_model():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(3, 1)), rng.normal(size=(2, 1))
    comp = MatrixComponent(40000, np.zeros((3, 2)), A=A, B=B, U=np.ones(3), V=np.ones(2))
    X = np.asarray(generate_synthetic(SyntheticCohortSpec([comp], seed=1)).observations)
    emp = np.cov(X.transpose(0, 2, 1).reshape(len(X), -1), rowvar=False)
    theory = np.kron(np.eye(2) + B @ B.T, np.eye(3) + A @ A.T)
    np.testing.assert_allclose(emp, theory, atol=0.15 * theory.max())


def test_seed_determinism():
    a = generate_synthetic(three_cluster_map_spec(20, seed=5))
    b = generate_synthetic(three_cluster_map_spec(20, seed=5))
    assert np.array_equal(np.asarray(a.observations), np.asarray(b.observations))
    assert [r.time for r in a.records] == [r.time for r in b.records]


def test_no_censoring_all_events():
    co = generate_synthetic(three_cluster_map_spec(10, seed=1, censoring_rate=0.0))
    assert all(r.event for r in co.records)


def test_censoring_fraction():
    co = generate_synthetic(three_cluster_map_spec(400, seed=1, censoring_rate=0.3))
    assert abs(np.mean([not r.event for r in co.records]) - 0.3) < 0.04


def test_hazard_ordering_in_times():
    co = generate_synthetic(three_cluster_map_spec(400, seed=2, censoring_rate=0.0))
    t = np.array([r.time for r in co.records])
    means = [t[co.labels == g].mean() for g in (1, 2, 3)]
    assert means[0] < means[1] < means[2]


def test_bump_map_peak():
    M = bump_logit_map(EXAMPLE_GRID, 50.0, 10.0)
    i, j = np.unravel_index(np.argmax(M), M.shape)
    assert abs(EXAMPLE_GRID.f_centers[j] - 50) <= EXAMPLE_GRID.f_max / EXAMPLE_GRID.cols
    assert i == EXAMPLE_GRID.rows // 2


def test_activity_cohort_series():
    co = generate_synthetic(three_cluster_activity_spec(2, seed=0, n_epochs=300))
    assert len(co.observations) == 6 and isinstance(co.observations[0], EpochSeries)
    assert "moderate" in co.observations[0].counts()


def test_write_cohort(tmp_path):
    co = generate_synthetic(three_cluster_activity_spec(2, seed=0, n_epochs=100))
    paths = write_cohort(co, tmp_path)
    assert (tmp_path / "manifest.csv").read_text().count("\n") == 7
    assert set(paths) == {"manifest", "survival", "truth"}


def test_spec_validation():
    with pytest.raises(ValidationError):
        SyntheticCohortSpec([], seed=0).validate()
    with pytest.raises(ValidationError):
        SyntheticCohortSpec([ActivityComponent(1, 10, 2, hazard=0.0)]).validate()
    with pytest.raises(ValidationError):
        SyntheticCohortSpec([ActivityComponent(1, 10, 2)], censoring_rate=1.0).validate()
