import numpy as np
import pytest

from distdyn.cohort import (CohortConfig, fit_cohort, read_trajectories_csv, reference_sample,
                            write_trajectories_csv)
from distdyn.core import InputError
from distdyn.ingest import WindowSpec, synthetic_cohort, windowize
from distdyn.mmd_fit import FitConfig
from distdyn.ode_smooth import OdeConfig

FAST_FIT = FitConfig(K=3, outer_iterations=2, kmeans_restarts=2)
FAST_ODE = OdeConfig(hidden=(8,), epochs=30)


@pytest.fixture(scope="module")
def cohort():
    return windowize(synthetic_cohort(n_subjects=4, weeks=2, seed=0), WindowSpec(), "univariate")


def test_reference_sample(cohort):
    ref = reference_sample(cohort.datasets, "first", 20000)
    assert ref.shape[0] == sum(ds.snapshots[0].shape[0] for ds in cohort.datasets.values())
    small = reference_sample(cohort.datasets, "all", 100, seed=1)
    assert small.shape == (100, 1)
    with pytest.raises(InputError):
        reference_sample({}, "first")


@pytest.mark.parametrize("mode", ["pooled", "per-subject"])
def test_fit_and_round_trip(cohort, mode, tmp_path):
    fit = fit_cohort(cohort.datasets, cohort.arms, FAST_FIT, FAST_ODE,
                     CohortConfig(dictionary_mode=mode, inference_points=5))
    dicts = [m.dictionary.means for m in fit.models.values()]
    if mode == "pooled":
        assert all(np.array_equal(dicts[0], d) for d in dicts)
    arms = read_trajectories_csv(write_trajectories_csv(fit, tmp_path / "traj.csv"))
    live = fit.arm_trajectories()
    assert set(arms) == set(live)
    for a in arms:
        assert np.array_equal(arms[a].weights, live[a].weights)
        assert arms[a].subject_ids == live[a].subject_ids


def test_config_validation():
    with pytest.raises(InputError):
        CohortConfig(dictionary_mode="shared")
    with pytest.raises(InputError):
        CohortConfig(reference="last")


def test_mismatched_subjects(cohort):
    with pytest.raises(InputError):
        fit_cohort(cohort.datasets, {}, FAST_FIT, FAST_ODE)
