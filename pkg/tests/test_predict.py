import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from groupstat.model import PosteriorSample, prob_positive
from groupstat.numerics import KernelSpec
from groupstat.predict import (
    ModelFileError,
    TrainedModel,
    classify,
    load_model,
    predictive_grid,
    predictive_prob,
    predictive_probs,
    save_model,
)

GAUSS = KernelSpec("gaussian", sigma=0.8)
TRAIN_X = np.array([[0.0, 0.0], [1.0, 0.5], [-1.0, 1.5], [0.3, -0.7], [2.0, 2.0]])


def _random_model(seed=0, T=4, kernel=GAUSS):
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(T):
        g = rng.random(5) < 0.6
        samples.append(PosteriorSample(g, rng.normal(scale=2, size=int(g.sum()))))
    return TrainedModel(tuple(samples), TRAIN_X, kernel)


def test_empty_samples_give_half():
    s = PosteriorSample(np.zeros(5, bool), np.zeros(0))
    m = TrainedModel((s, s), TRAIN_X, GAUSS)
    np.testing.assert_array_equal(predictive_probs(m, np.random.default_rng(0).normal(size=(7, 2))), 0.5)


def test_single_sample_equals_prob_positive():
    m = _random_model(T=1)
    x = np.array([0.4, 0.1])
    assert predictive_prob(m, x) == pytest.approx(prob_positive(x, m.samples[0], TRAIN_X, GAUSS), rel=1e-14)


def test_three_samples_hand_mean():
    m = _random_model(seed=2, T=3)
    x = np.array([-0.2, 0.9])
    ref = np.mean([prob_positive(x, s, TRAIN_X, GAUSS) for s in m.samples])
    assert predictive_prob(m, x) == pytest.approx(ref, rel=1e-13)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        predictive_probs(_random_model(), np.zeros((2, 3)))


def test_model_validation():
    with pytest.raises(ValueError):
        TrainedModel((), TRAIN_X, GAUSS)
    with pytest.raises(ValueError):
        TrainedModel((PosteriorSample(np.ones(3, bool), np.ones(3)),), TRAIN_X, GAUSS)


@given(st.integers(0, 1000), st.permutations(range(5)))
@settings(max_examples=30, deadline=None)
def test_in_unit_interval_and_permutation_invariant(seed, perm):
    m = _random_model(seed=seed, T=5)
    X = np.random.default_rng(seed).normal(scale=2, size=(6, 2))
    p = predictive_probs(m, X)
    assert np.all((p >= 0) & (p <= 1))
    shuffled = TrainedModel(tuple(m.samples[i] for i in perm), TRAIN_X, GAUSS)
    np.testing.assert_allclose(predictive_probs(shuffled, X), p, rtol=1e-12)


def test_increasing_latent_increases_prob():
    x = TRAIN_X[1]
    g = np.array([0, 1, 0, 0, 0], bool)
    probs = [predictive_prob(TrainedModel((PosteriorSample(g, np.array([b])),), TRAIN_X, GAUSS), x)
             for b in np.linspace(-3, 3, 13)]
    assert np.all(np.diff(probs) > 0)


class TestGrid:
    def test_single_cell_is_center(self):
        m = _random_model()
        grid = predictive_grid(m, [(-1.0, 3.0), (0.0, 2.0)], (1, 1))
        assert grid.shape == (1, 1)
        assert grid[0, 0] == pytest.approx(predictive_prob(m, [1.0, 1.0]), rel=1e-14)

    def test_orientation_and_range(self):
        m = _random_model(seed=5)
        grid = predictive_grid(m, [(0.0, 4.0), (0.0, 2.0)], (4, 2))
        assert grid.shape == (2, 4)
        assert np.all((grid >= 0) & (grid <= 1))
        # row i follows the second feature, column j the first
        assert grid[1, 2] == pytest.approx(predictive_prob(m, [2.5, 1.5]), rel=1e-14)

    def test_refinement_reproduces_coinciding_centers(self):
        # cell centers of a 3x finer raster include every coarse center
        m = _random_model(seed=7)
        bounds = [(-2.0, 2.0), (-1.0, 3.0)]
        coarse = predictive_grid(m, bounds, (4, 5))
        fine = predictive_grid(m, bounds, (12, 15))
        np.testing.assert_allclose(fine[1::3, 1::3], coarse, rtol=1e-13, atol=0)

    def test_needs_two_dimensions(self):
        X = np.zeros((2, 3))
        m = TrainedModel((PosteriorSample(np.zeros(2, bool), np.zeros(0)),), X, GAUSS)
        with pytest.raises(ValueError, match="2-D"):
            predictive_grid(m, [(0, 1), (0, 1)], (2, 2))

    @pytest.mark.parametrize("bounds,res", [([(1, 0), (0, 1)], (2, 2)), ([(0, 1), (0, 1)], (0, 2))])
    def test_bad_arguments(self, bounds, res):
        with pytest.raises(ValueError):
            predictive_grid(_random_model(), bounds, res)


class TestClassify:
    def test_threshold_is_inclusive(self):
        s = PosteriorSample(np.zeros(5, bool), np.zeros(0))
        m = TrainedModel((s,), TRAIN_X, GAUSS)
        np.testing.assert_array_equal(classify(m, TRAIN_X, 0.5), 1)

    def test_below_threshold(self):
        # f chosen so that Phi(f) = 0.49 at the training point itself
        g = np.array([1, 0, 0, 0, 0], bool)
        m = TrainedModel((PosteriorSample(g, np.array([stats.norm.ppf(0.49)])),), TRAIN_X, GAUSS)
        assert classify(m, TRAIN_X[:1])[0] == 0

    def test_sign_flip_complements_labels(self):
        m = _random_model(seed=3, T=6)
        neg = TrainedModel(tuple(PosteriorSample(s.gamma, -s.beta) for s in m.samples), TRAIN_X, GAUSS)
        X = np.random.default_rng(1).normal(scale=2, size=(50, 2))
        p = predictive_probs(m, X)
        keep = p != 0.5
        np.testing.assert_array_equal(classify(neg, X)[keep], 1 - classify(m, X)[keep])

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.2])
    def test_threshold_range(self, t):
        with pytest.raises(ValueError):
            classify(_random_model(), TRAIN_X, t)


class TestModelFile:
    def test_round_trip_bit_identical(self, tmp_path):
        m = _random_model(seed=4, T=6, kernel=KernelSpec("sigmoidal", kappa=0.3, theta=-0.1))
        m = TrainedModel(m.samples, m.training_X / 3.0, m.kernel, (0, 0, 0, 1, 1, 1))
        path = tmp_path / "model.jsonl"
        save_model(m, path, extra={"note": "x"})
        back = load_model(path)
        assert back.samples == m.samples
        assert back.chains == m.chains
        assert back.kernel == m.kernel
        np.testing.assert_array_equal(back.training_X, m.training_X)
        X = np.random.default_rng(0).normal(size=(20, 2))
        np.testing.assert_array_equal(predictive_probs(back, X), predictive_probs(m, X))

    def test_header_and_records(self, tmp_path):
        path = tmp_path / "model.jsonl"
        save_model(_random_model(T=2), path)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        assert header["format"] == "groupstat-model" and header["schema_version"] == 1
        assert header["n_samples"] == 2 == len(lines) - 1
        rec = json.loads(lines[1])
        assert set(rec) == {"chain", "gamma", "beta"}
        assert len(rec["gamma"]) == len(rec["beta"])

    def test_wrong_schema(self, tmp_path):
        path = tmp_path / "model.jsonl"
        save_model(_random_model(T=1), path)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["schema_version"] = 99
        path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
        with pytest.raises(ModelFileError, match="schema"):
            load_model(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "model.jsonl"
        save_model(_random_model(T=3), path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ModelFileError, match="announces"):
            load_model(path)

    def test_bad_record(self, tmp_path):
        path = tmp_path / "model.jsonl"
        save_model(_random_model(T=1), path)
        lines = path.read_text().splitlines()
        path.write_text(lines[0] + "\n{\"gamma\": [0, 1], \"beta\": [1.0]}\n")
        with pytest.raises(ModelFileError, match=":2:"):
            load_model(path)

    def test_empty_and_foreign(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text("")
        with pytest.raises(ModelFileError):
            load_model(p)
        p.write_text('{"format": "other"}\n')
        with pytest.raises(ModelFileError):
            load_model(p)
