import numpy as np
import pandas as pd
import pytest

from src.exceptions import DatasetError, ShapeError
from src.models.predictors import PredictorModel, interaction_features, own_features
from src.schemas.decomp import DecompConfig, DecompEvalReport, DecompRow, PredictorKind, PredictorTrainConfig
from src.services.decomposability import (
    DECOMP_COLUMNS,
    OraclePredictor,
    SceneSet,
    build_training_set,
    evaluate_generalization,
    prediction_errors,
    run_decomposability,
    scenes_from_rollout,
    simulate_crowd,
    train_predictor,
    write_decomp_csv,
)

TINY_TRAIN = PredictorTrainConfig(hidden=8, iterations=30, batch_size=16, learning_rate=3e-3)


@pytest.fixture(scope="module")
def two_body_rollout():
    return simulate_crowd(density=2, steps=10, seed=5)


def test_rollout_shapes(two_body_rollout):
    assert two_body_rollout.states.shape == (11, 2, 4)
    assert len(two_body_rollout.crowds) == 11


def test_scene_and_pair_counts(two_body_rollout):
    scenes = scenes_from_rollout(two_body_rollout, k=3)
    assert len(scenes) == 10 - 3
    assert scenes.pair_count(PredictorKind.CSM) == 2 * (10 - 3)
    assert scenes.pair_count(PredictorKind.ICSM) == 2 * (10 - 3)
    assert scenes.pair_count(PredictorKind.COSM) == 10 - 3
    assert scenes.windows.shape == (7, 2, 3, 4)


def test_windows_are_oldest_first_and_targets_follow(two_body_rollout):
    scenes = scenes_from_rollout(two_body_rollout, k=3)
    states = two_body_rollout.states
    np.testing.assert_array_equal(scenes.windows[0, :, 0], states[1])
    np.testing.assert_array_equal(scenes.windows[0, :, -1], states[3])
    np.testing.assert_array_equal(scenes.targets[0], states[4])


def test_short_rollout_yields_no_scenes():
    scenes = scenes_from_rollout(simulate_crowd(density=2, steps=3, seed=1), k=5)
    assert len(scenes) == 0
    with pytest.raises(DatasetError):
        SceneSet.concat([scenes])


def test_oracle_has_zero_error(two_body_rollout):
    scenes = scenes_from_rollout(two_body_rollout, k=3)
    l2, maxnorm = prediction_errors(OraclePredictor(), scenes)
    assert l2.shape == (14,)
    np.testing.assert_allclose(l2, 0.0, atol=1e-12)
    np.testing.assert_allclose(maxnorm, 0.0, atol=1e-12)


def test_own_features_are_relative_to_latest_position():
    windows = np.arange(2 * 1 * 3 * 4, dtype=float).reshape(2, 1, 3, 4)
    feats = own_features(windows)
    np.testing.assert_array_equal(feats[:, :, -1, :2], 0.0)
    np.testing.assert_array_equal(feats[..., 2:], windows[..., 2:])


def test_interaction_features_pick_nearest_neighbor():
    states = np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.5, 0.0], [5.0, 0.0, 0.0, 0.0]])
    windows = np.repeat(states[None, :, None, :], 2, axis=2)
    feats = interaction_features(windows)
    assert feats.shape == (1, 3, 2, 4)
    np.testing.assert_allclose(feats[0, 0, 0], [1.0, 0.0, 0.5, 0.0])
    np.testing.assert_allclose(feats[0, 2, 0], [-4.0, 0.0, 0.5, 0.0])
    assert np.all(interaction_features(windows[:, :1]) == 0.0)


@pytest.mark.parametrize("kind", list(PredictorKind))
def test_untrained_predictors_output_absolute_states(kind, two_body_rollout):
    scenes = scenes_from_rollout(two_body_rollout, k=3)
    model = PredictorModel.initialize(kind, 3, hidden=8, seed=0)
    predicted = model.predict(scenes.windows)
    assert predicted.shape == scenes.targets.shape
    assert np.all(np.isfinite(predicted))
    with pytest.raises(ShapeError):
        model.features(scenes.windows[:, :, :2])


def test_cosm_prediction_is_permutation_equivariant(two_body_rollout):
    scenes = scenes_from_rollout(two_body_rollout, k=3)
    model = PredictorModel.initialize(PredictorKind.COSM, 3, hidden=8, seed=2)
    forward = model.predict(scenes.windows)
    swapped = model.predict(scenes.windows[:, ::-1])
    np.testing.assert_allclose(swapped[:, ::-1], forward, atol=1e-12)


def test_training_needs_two_scenes(two_body_rollout):
    scenes = scenes_from_rollout(two_body_rollout, k=3).take(np.array([0]))
    with pytest.raises(DatasetError):
        train_predictor(PredictorKind.CSM, scenes, TINY_TRAIN)


@pytest.mark.parametrize("kind", list(PredictorKind))
def test_training_returns_curve_and_held_out_error(kind):
    data = build_training_set(density=3, n_rollouts=2, k=3, steps=15, seed=0)
    trained = train_predictor(kind, data, TINY_TRAIN)
    assert len(trained.curve) == TINY_TRAIN.iterations
    assert np.isfinite(trained.held_out_l2) and trained.held_out_l2 >= 0
    assert trained.model.kind is kind


def test_threaded_training_set_matches_sequential():
    seq = build_training_set(density=3, n_rollouts=3, k=2, steps=8, seed=1, threads=1)
    par = build_training_set(density=3, n_rollouts=3, k=2, steps=8, seed=1, threads=3)
    np.testing.assert_array_equal(seq.windows, par.windows)
    np.testing.assert_array_equal(seq.targets, par.targets)


def test_generalization_report_rows():
    cfg = DecompConfig(history_length=3, rollout_steps=12, eval_episodes=1)
    report = evaluate_generalization({PredictorKind.CSM: OraclePredictor()}, [2, 4], 1, cfg)
    assert [r.density for r in report.rows] == [2, 4]
    assert report.error(PredictorKind.CSM, 4) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(KeyError):
        report.error(PredictorKind.COSM, 2)


@pytest.mark.slow
def test_full_sweep_trains_every_kind_once_per_seed():
    cfg = DecompConfig(train_density=6, densities=[6, 24], history_length=3, n_rollouts=6, rollout_steps=40,
                       eval_episodes=2, train=PredictorTrainConfig(hidden=16, iterations=600, batch_size=64,
                                                                   learning_rate=3e-3))
    report, trained = run_decomposability(cfg, threads=2)
    assert len(report.rows) == 3 * 2
    assert set(trained) == {(k, 0) for k in PredictorKind}
    for kind in PredictorKind:
        assert 0.0 < report.error(kind, 6) < 1.0
        assert report.error(kind, 24) > 0.0


def test_decomp_csv_columns(tmp_path):
    report = DecompEvalReport(densities=[6], rows=[
        DecompRow(kind=PredictorKind.ICSM, density=6, mean_l2=0.1, mean_maxnorm=0.08, eps95=0.2)])
    path = write_decomp_csv(report, tmp_path / "decomp.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == DECOMP_COLUMNS
    assert frame.loc[0, "kind"] == "icsm"
