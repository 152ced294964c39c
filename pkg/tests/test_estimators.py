"""Estimator wrappers: params protocol, fit attributes, composition."""

import numpy as np
import pytest
from sklearn.base import clone

from hingeaxes.errors import ValidationError
from hingeaxes.estimators import PenalizedSubjectAxes, PopulationAxes, SubjectAxes
from hingeaxes.penalized import PriorSpec, fit_map
from hingeaxes.population import WaldTest
from hingeaxes.simulate import SimConfig, simulate_dataset, simulate_subject
from hingeaxes.subject import (
    _beta_array,
    default_angles,
    fit_subject,
    profile_loglik,
    residuals,
)

BETA0 = _beta_array(default_angles())


@pytest.fixture(scope="module")
def rotations():
    return simulate_subject(BETA0, 40, np.random.default_rng(33), 0.01)


@pytest.fixture(scope="module")
def study():
    config = SimConfig(
        n_subjects=8,
        n_frames=25,
        replicates=1,
        error_sd_deg=1.0,
        group_effects_deg={"s1": -6.0},
        seed=31,
    )
    subjects, groups, _ = simulate_dataset(config, np.random.default_rng(31))
    return subjects, groups


class TestSubjectAxes:
    def test_params_protocol(self):
        est = SubjectAxes(model="reduced", grid_search=True, tol=1e-8)
        params = est.get_params()
        assert params["model"] == "reduced"
        assert params["grid_search"] is True
        assert params["tol"] == 1e-8
        est.set_params(model="full")
        assert est.model == "full"
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert not hasattr(twin, "angles_")

    def test_fit_matches_library_call(self, rotations):
        est = SubjectAxes().fit(rotations)
        direct = fit_subject(rotations)
        assert est.angles_deg_ == pytest.approx(
            direct.angles.to_degrees(), abs=1e-12
        )
        assert est.kappa_ == pytest.approx(direct.kappa)
        assert est.converged_
        assert est.result_.n_frames == 40

    def test_transform_and_predict(self, rotations):
        est = SubjectAxes().fit(rotations)
        chords = est.transform(rotations)
        assert chords == pytest.approx(residuals(rotations, est.angles_))
        theta = est.predict(rotations)
        assert theta.shape == (40,)
        # offset angles scatter around the fitted gamma0
        assert np.mean(theta) == pytest.approx(est.angles_.gamma0, abs=0.01)

    def test_score_is_profile_loglik(self, rotations):
        est = SubjectAxes().fit(rotations)
        assert est.score(rotations) == pytest.approx(
            profile_loglik(rotations, est.angles_)
        )
        # the fitted angles should beat a perturbed copy on the same frames
        worse = SubjectAxes(init_deg=[20, 5, 30, 10, 5], max_iter=0)
        assert est.score(rotations) >= worse.fit(rotations).score(rotations)

    def test_reduced_model(self, rotations):
        est = SubjectAxes(model="reduced").fit(rotations)
        assert est.transform(rotations).shape == (40,)
        assert est.angles_deg_[4] != 0.0

    def test_bad_model_rejected_at_fit_time(self, rotations):
        est = SubjectAxes(model="euler")
        with pytest.raises(ValidationError, match="model"):
            est.fit(rotations)

    def test_unfitted_estimator_has_no_attributes(self, rotations):
        est = SubjectAxes()
        with pytest.raises(AttributeError):
            est.transform(rotations)


class TestPenalizedSubjectAxes:
    def test_fit_matches_library_call(self, rotations):
        est = PenalizedSubjectAxes().fit(rotations)
        direct = fit_map(rotations, PriorSpec.default(1.0))
        assert est.angles_deg_ == pytest.approx(
            direct.angles.to_degrees(), abs=1e-12
        )
        assert est.se_deg_.shape == (5,)
        assert est.converged_

    def test_tight_prior_pins_estimate(self, rotations):
        mean = [10.0, -4.0, 45.0, 20.0, 15.0]
        est = PenalizedSubjectAxes(
            prior_mean_deg=mean, prior_sd_deg=[1e-6] * 5
        ).fit(rotations)
        assert est.angles_deg_ == pytest.approx(mean, abs=1e-3)

    def test_clone_before_fit(self):
        est = PenalizedSubjectAxes(prior_sd_deg=[5, 5, 5, 5, 5])
        twin = clone(est)
        assert twin.get_params()["prior_sd_deg"] == [5, 5, 5, 5, 5]


class TestPopulationAxes:
    def test_one_sample_fit(self, study):
        subjects, _ = study
        est = PopulationAxes().fit(subjects)
        assert est.param_names_ == ("t1", "t2", "s1", "s2", "gamma0")
        assert est.fixed_deg_.shape == (5,)
        assert est.se_deg_.shape == (5,)
        assert est.sigma0_deg_.shape == (5,)
        assert 0.5 < est.residual_sd_deg_ < 2.0
        assert est.converged_

    def test_two_sample_with_groups_as_y(self, study):
        subjects, groups = study
        est = PopulationAxes(design="two-sample", contrasts=("s1",))
        est.fit(subjects, y=groups)
        assert est.param_names_[-1] == "d_s1"
        test = est.wald("d_s1")
        assert isinstance(test, WaldTest)
        assert np.isfinite(test.z)
        # eight subjects with a 9 degree between-subject sd: stay within 3 se
        assert abs(test.estimate - np.radians(-6.0)) < 3.0 * test.se

    def test_two_sample_requires_y(self, study):
        subjects, _ = study
        est = PopulationAxes(design="two-sample")
        with pytest.raises(ValidationError, match="groups"):
            est.fit(subjects)

    def test_params_protocol(self):
        est = PopulationAxes(algorithm="lme", max_outer=50)
        twin = clone(est)
        assert twin.get_params()["algorithm"] == "lme"
        assert twin.get_params()["max_outer"] == 50
