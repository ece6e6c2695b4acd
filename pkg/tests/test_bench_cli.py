import numpy as np
import pandas as pd
import pytest

from src.config import load_experiment_config
from src.exceptions import ConfigError, ContainerError
from src.main import build_parser, main
from src.schemas.bench import BENCHMARK_COLUMNS, BenchmarkRow, BenchmarkTable
from src.schemas.dynamics import DynamicsKind
from src.schemas.sim import BASE_HALF_EXTENT
from src.services.bench_service import (
    BenchService,
    ModelStore,
    barrier_grid,
    read_benchmark_csv,
    replay_axis,
    write_benchmark_csv,
)
from src.services.container import save_model
from src.services.simulation import RecordedTrajectory

BENCH_CONFIG = """
scenario.ego_dynamics_kind = single_integrator
scenario.max_steps = 15
bench.methods = spfm, goal-seeker
bench.densities = 3
bench.episodes = 2
bench.seeds = 0
spfm.samples = 16
replay.grid_pitch = 1.0
replay.frames = 0, 2
"""


@pytest.fixture
def bench_config(write_config):
    return write_config(BENCH_CONFIG)


def test_parser_requires_config():
    with pytest.raises(SystemExit) as err:
        build_parser().parse_args(["bench"])
    assert err.value.code == 2


def test_parser_reads_common_flags():
    args = build_parser().parse_args(["bench", "--config", "a.cfg", "--threads", "3", "--seed-offset", "7",
                                      "--models", "m"])
    assert (args.command, args.config, args.threads, args.seed_offset, args.models) == ("bench", "a.cfg", 3, 7, "m")
    args = build_parser().parse_args(["replay", "--config", "a.cfg", "t.csv", "m.sncb"])
    assert (args.trajectory, args.model) == ("t.csv", "m.sncb")


def test_invalid_config_exits_with_two(write_config, tmp_path):
    path = write_config("bench.episodes = 0")
    assert main(["bench", "--config", str(path), "--out", str(tmp_path / "out")]) == 2


def test_missing_config_exits_with_two(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == 2


def test_missing_models_exit_with_four(write_config, tmp_path):
    path = write_config("scenario.ego_dynamics_kind = single_integrator\nbench.methods = sncbf\n")
    code = main(["bench", "--config", str(path), "--out", str(tmp_path / "out"), "--models", str(tmp_path / "none")])
    assert code == 4


def test_bench_writes_table_figure_and_trajectories(bench_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["bench", "--config", str(bench_config), "--out", str(out)]) == 0
    table = read_benchmark_csv(out / "benchmark.csv")
    assert [(r.method, r.obstacles, r.seed) for r in table.rows] == [("spfm", 3, 0), ("goal-seeker", 3, 0)]
    assert all(r.episodes == 2 for r in table.rows)
    assert list(pd.read_csv(out / "benchmark.csv").columns) == list(BENCHMARK_COLUMNS)
    assert (out / "collision_rate.svg").read_text().endswith("</svg>\n")
    assert (out / "trajectories" / "spfm_3_0.csv").exists()
    assert "collision rate" in capsys.readouterr().out


def test_threaded_bench_matches_sequential(bench_config, tmp_path):
    cfg = load_experiment_config(bench_config)
    seq = BenchService(cfg, tmp_path / "seq", threads=1).bench()
    par = BenchService(cfg, tmp_path / "par", threads=2).bench()
    assert seq == par


def test_seed_offset_shifts_rows(bench_config, tmp_path):
    table = BenchService(load_experiment_config(bench_config), tmp_path, seed_offset=5).bench()
    assert {r.seed for r in table.rows} == {5}


def test_smpc_needs_learned_dynamics_unless_configured_otherwise(write_config, tmp_path):
    store = ModelStore(tmp_path / "none")
    learned = BenchService(load_experiment_config(write_config("scenario.ego_dynamics_kind = single_integrator\n")),
                           tmp_path)
    with pytest.raises(ContainerError):
        learned.build_controller("smpc", store)
    assert learned.build_controller("smpc-true", store).name == "smpc-true"

    path = write_config("scenario.ego_dynamics_kind = single_integrator\nsmpc.use_true_dynamics = true\n", "true.cfg")
    analytic = BenchService(load_experiment_config(path), tmp_path).build_controller("smpc", store)
    assert analytic.name == "smpc-true"


def test_cells_share_the_configured_arena(bench_config, tmp_path):
    service = BenchService(load_experiment_config(bench_config), tmp_path)
    sparse, dense = service.cell_scenario(6), service.cell_scenario(600)
    assert (sparse.obstacle_count, dense.obstacle_count) == (6, 600)
    assert sparse.arena_half_extent == dense.arena_half_extent == BASE_HALF_EXTENT


def test_episode_seeds_are_distinct_across_cells():
    a = BenchService.episode_seeds(0, 6, 3)
    b = BenchService.episode_seeds(0, 24, 3)
    c = BenchService.episode_seeds(1, 6, 3)
    assert len(set(a) | set(b) | set(c)) == 9


def test_replay_renders_each_frame(bench_config, tmp_path, si_model):
    out = tmp_path / "out"
    assert main(["bench", "--config", str(bench_config), "--out", str(out)]) == 0
    model = save_model(tmp_path / "sncbf.sncb", si_model)
    trajectory = out / "trajectories" / "spfm_3_0.csv"
    assert main(["replay", "--config", str(bench_config), "--out", str(out), str(trajectory), str(model)]) == 0
    frames = sorted(p.name for p in (out / "replay").glob("*.svg"))
    assert frames == ["spfm_3_0_0000.svg", "spfm_3_0_0002.svg"]


def test_replay_rejects_a_model_for_another_kind(bench_config, tmp_path, dubins_model):
    out = tmp_path / "out"
    assert main(["bench", "--config", str(bench_config), "--out", str(out)]) == 0
    model = save_model(tmp_path / "dubins.sncb", dubins_model)
    trajectory = out / "trajectories" / "spfm_3_0.csv"
    assert main(["replay", "--config", str(bench_config), "--out", str(out), str(trajectory), str(model)]) == 2


def test_replay_missing_trajectory_exits_with_four(bench_config, tmp_path, si_model):
    model = save_model(tmp_path / "sncbf.sncb", si_model)
    args = ["replay", "--config", str(bench_config), "--out", str(tmp_path), str(tmp_path / "absent.csv"), str(model)]
    assert main(args) == 4


def test_replay_axis_spans_the_arena():
    axis = replay_axis(2.0, 0.5)
    np.testing.assert_allclose(axis, [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0])


def recorded(n_obs: int, steps: int = 4) -> RecordedTrajectory:
    ego = np.zeros((steps, 2))
    positions = np.tile([[1.5, 0.0]], (steps, n_obs, 1))
    return RecordedTrajectory(DynamicsKind.SINGLE_INTEGRATOR, ego, positions, np.zeros((steps, n_obs, 2)))


def test_barrier_grid_without_obstacles_is_all_safe(si_model):
    xs, ys, grid = barrier_grid(recorded(0), si_model, 1, 2.0, 1.0, 100, 0.5, 5.0, 0.1)
    assert grid.shape == (len(ys), len(xs)) == (5, 5)
    assert np.all(grid == 1.0)


def test_barrier_grid_values_are_normalized(si_model):
    _, _, grid = barrier_grid(recorded(2), si_model, 2, 2.0, 1.0, 100, 0.5, 5.0, 0.1)
    assert np.all((grid >= 0.0) & (grid <= 1.0))


def test_barrier_grid_cell_cap(si_model):
    with pytest.raises(ConfigError, match="max_cells"):
        barrier_grid(recorded(1), si_model, 0, 2.0, 0.1, 100, 0.5, 5.0, 0.1)


def test_benchmark_csv_roundtrip(tmp_path):
    table = BenchmarkTable(rows=[BenchmarkRow(dynamics="dubins", method="sncbf", obstacles=6, seed=0, episodes=4,
                                              collision_rate=0.25, mean_steps=80.5, frozen_fraction=0.0)])
    assert read_benchmark_csv(write_benchmark_csv(table, tmp_path / "b.csv")) == table
    assert table.rate("sncbf", 6) == pytest.approx(0.25)
    with pytest.raises(KeyError):
        table.rate("spfm", 6)


@pytest.mark.slow
def test_train_then_bench_learned_methods(write_config, tmp_path):
    path = write_config(
        """
        scenario.ego_dynamics_kind = single_integrator
        scenario.obstacle_count = 20
        scenario.max_steps = 40
        train.arch.history_length = 3
        train.arch.lstm_hidden = 8
        train.arch.ego_hidden = 8, 8
        train.arch.head_hidden = 16, 16
        train.nonseq_arch.obstacle_hidden = 8, 8
        train.nonseq_arch.ego_hidden = 8, 8
        train.nonseq_arch.head_hidden = 16, 16
        train.ensemble_size = 2
        train.seeds = 0, 1
        train.collection.n_trajectories = 4
        train.collection.history_length = 3
        train.dynamics.hidden = 16, 16
        train.dynamics.iterations = 50
        train.dynamics.random_transitions = 500
        train.initial.iterations = 40
        train.initial.batch_size = 32
        train.refine.max_rounds = 1
        train.refine.max_seeds = 20
        train.refine.samples_per_seed = 2
        train.refine.iterations_per_round = 10
        bench.methods = sncbf, sncbf-ensemble, nonseq-cbf, smpc
        bench.densities = 3
        bench.episodes = 1
        bench.seeds = 0
        bench.trace = true
        smpc.horizon = 2
        smpc.samples_per_step = 2
        inference.candidates = 16
        """
    )
    out = tmp_path / "run"
    assert main(["train", "--config", str(path), "--out", str(out)]) == 0
    assert (out / "models" / "sncbf_member1.sncb").exists()
    assert (out / "loss_member0.csv").exists()
    assert main(["bench", "--config", str(path), "--out", str(out)]) == 0
    assert len(read_benchmark_csv(out / "benchmark.csv").rows) == 4
