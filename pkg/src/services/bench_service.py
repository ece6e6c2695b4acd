"""
Experiment pipelines behind the CLI: training, benchmark sweeps, the
decomposability study and replay figures.
"""
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..config import load_experiment_config, settings
from ..exceptions import ConfigError, ContainerError, StageError, WorkbenchError
from ..models.barrier import BarrierModel, NonSeqBarrierModel
from ..models.learned_dynamics import LearnedDynamics
from ..schemas.bench import BENCHMARK_COLUMNS, BenchmarkRow, BenchmarkTable, ExperimentConfig
from ..schemas.dynamics import ControlBounds
from ..schemas.sim import EpisodeOutcome, Scenario
from ..telemetry import telemetry
from ..telemetry_decorators import log_method_call, time_operation, trace_method
from .baselines import GoalSeekerController, GpfmController, SmpcController, SpfmController, spfm_policy
from .container import AnyModel, load_model, save_model
from .decomposability import run_decomposability, write_decomp_csv
from .ego_dynamics import DynamicsTrainConfig, TransitionSet, TrueDynamics, fit_dynamics, generate_transitions
from .inference import (
    Ensemble,
    NonSeqCbfController,
    SncbfController,
    SncbfEnsembleController,
    aggregate_rows,
    write_trace_csv,
)
from .plotting import collision_rate_svg, decomposition_svg, replay_frame_svg, write_svg
from .relative_states import trajectory_relative_states, window_at
from .simulation import (
    FLOAT_FORMAT,
    Controller,
    EpisodeResult,
    RecordedTrajectory,
    read_trajectory_csv,
    run_episodes,
    write_trajectory_csv,
)
from .sncbf_training import (
    demonstration_scenarios,
    joint_dataset,
    label_demonstrations,
    refine_boundary,
    run_demonstrations,
    train_initial,
)

logger = logging.getLogger(__name__)

DYNAMICS_FILE = "dynamics.sncb"
NONSEQ_FILE = "nonseq-cbf.sncb"
MEMBER_SEED_STRIDE = 1_000
BENCH_SEED_STRIDE = 1_000_003
REPLAY_CHUNK = 4096


def member_file(index: int) -> str:
    return f"sncbf_member{index}.sncb"


def episode_transitions(episodes: Sequence[EpisodeResult]) -> Optional[TransitionSet]:
    parts = [
        TransitionSet(r.kind, r.ego_states[:r.steps_taken], r.controls, r.ego_states[1:r.steps_taken + 1])
        for r in episodes if r.steps_taken
    ]
    if not parts:
        return None
    merged = parts[0]
    for part in parts[1:]:
        merged = merged.concat(part)
    return merged


def loss_curve_frame(curves: Sequence[Tuple[str, Sequence[float]]]) -> pd.DataFrame:
    rows = [{"phase": phase, "iteration": i, "loss": v} for phase, curve in curves for i, v in enumerate(curve)]
    return pd.DataFrame(rows, columns=["phase", "iteration", "loss"])


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


@dataclass
class TrainArtifacts:
    dynamics: Path
    members: List[Path] = field(default_factory=list)
    nonseq: Optional[Path] = None
    curves: List[Path] = field(default_factory=list)
    summaries: List[str] = field(default_factory=list)


class ModelStore:
    """Lazily loaded model containers from one directory"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self._cache: Dict[str, AnyModel] = {}

    def _load(self, name: str, method: str) -> AnyModel:
        if name not in self._cache:
            path = self.directory / name
            if not path.exists():
                raise ContainerError(f"method {method!r} needs {path}, which does not exist; run 'train' first")
            self._cache[name] = load_model(path)
        return self._cache[name]

    def dynamics(self, method: str) -> LearnedDynamics:
        return self._load(DYNAMICS_FILE, method)

    def barrier(self, method: str) -> BarrierModel:
        return self._load(member_file(0), method)

    def members(self, method: str) -> List[BarrierModel]:
        paths = sorted(self.directory.glob("sncbf_member*.sncb"),
                       key=lambda p: int(p.stem[len("sncbf_member"):]))
        if len(paths) < 2:
            raise ContainerError(f"method {method!r} needs at least two sncbf_member*.sncb files "
                                 f"in {self.directory}, found {len(paths)}")
        return [self._load(p.name, method) for p in paths]

    def nonseq(self, method: str) -> NonSeqBarrierModel:
        return self._load(NONSEQ_FILE, method)


class BenchService:
    def __init__(self, cfg: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None,
                 threads: Optional[int] = None, seed_offset: int = 0):
        self.cfg = cfg
        self.out_dir = Path(out_dir or cfg.output_dir or settings.OUTPUT_DIR)
        self.threads = threads or settings.DEFAULT_THREADS
        self.seed_offset = seed_offset

    @property
    def scenario(self) -> Scenario:
        return self.cfg.scenario

    @property
    def kind(self):
        return self.scenario.ego_dynamics_kind

    @property
    def bounds(self) -> ControlBounds:
        return ControlBounds.default_for(self.kind)

    def true_dynamics(self) -> TrueDynamics:
        return TrueDynamics(self.kind, self.scenario.dt, self.scenario.dynamics)

    def _stage(self, name: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (StageError, ConfigError, ContainerError):
            raise
        except (WorkbenchError, ValueError) as e:
            raise StageError(name, str(e)) from e

    # -- train ------------------------------------------------------------------

    @trace_method("cmd_train")
    @time_operation("cmd_train")
    def train(self) -> TrainArtifacts:
        cfg, train = self.cfg, self.cfg.train
        model_dir = self.out_dir / "models"
        collection = train.collection.model_copy(update={"seed": train.collection.seed + self.seed_offset})

        nominal = SpfmController(self.kind, self.true_dynamics(), self.bounds, cfg.potential,
                                 cfg.spfm.model_copy(update={"samples": collection.nominal_samples}))
        episodes = self._stage("collect_demonstrations", run_demonstrations, self.scenario, nominal,
                               collection, self.threads)
        scenarios = demonstration_scenarios(self.scenario, collection.n_trajectories, collection.seed)
        data = self._stage("collect_demonstrations", label_demonstrations, episodes, scenarios, collection)
        if len(data.unsafe) == 0:
            raise StageError("collect_demonstrations", f"no unsafe samples in {len(episodes)} demonstrations; "
                                                       f"raise obstacle density or the trajectory count")
        summaries = [f"demonstrations: {len(episodes)} trajectories, "
                     f"{len(data.safe)} safe / {len(data.unsafe)} unsafe / {len(data.pairs)} pairs"]

        transitions = episode_transitions(episodes)
        if train.dynamics.random_transitions:
            extra = generate_transitions(self.kind, train.dynamics.random_transitions,
                                         seed=collection.seed + 1, dt=self.scenario.dt,
                                         params=self.scenario.dynamics)
            transitions = extra if transitions is None else transitions.concat(extra)
        if transitions is None:
            raise StageError("fit_dynamics", "no transitions: demonstrations took no steps and "
                                             "random_transitions = 0")
        fit_cfg = DynamicsTrainConfig(hidden=train.dynamics.hidden, iterations=train.dynamics.iterations,
                                      batch_size=train.dynamics.batch_size,
                                      learning_rate=train.dynamics.learning_rate,
                                      min_transitions=min(len(transitions), DynamicsTrainConfig().min_transitions),
                                      seed=collection.seed)
        learned, rmse = self._stage("fit_dynamics", fit_dynamics, transitions, fit_cfg)
        artifacts = TrainArtifacts(dynamics=save_model(model_dir / DYNAMICS_FILE, learned))
        summaries.append(f"fit_dynamics: {len(transitions)} transitions, held-out RMSE "
                         f"{np.array2string(rmse, precision=4)}")

        policy = spfm_policy(learned, self.bounds, cfg.potential, collection.nominal_samples, self.scenario.dt)
        base_seed = train.seeds[0] + self.seed_offset
        for i in range(train.ensemble_size):
            seed = train.seeds[i] + self.seed_offset if i < len(train.seeds) else base_seed + MEMBER_SEED_STRIDE * i
            model = BarrierModel.initialize(self.kind, train.arch, seed=seed, dt=self.scenario.dt)
            initial_cfg = train.initial.model_copy(update={"seed": seed})
            model, initial_curve = self._stage("train_initial", train_initial, model, data, initial_cfg)
            refined = self._stage("refine_boundary", refine_boundary, model, data, learned, policy,
                                  cfg=train.refine.model_copy(update={"seed": seed}), train_cfg=initial_cfg,
                                  collision_radius=self.scenario.collision_radius, bounds=self.bounds)
            artifacts.members.append(save_model(model_dir / member_file(i), refined.model))
            artifacts.curves.append(_write_csv(loss_curve_frame([("initial", initial_curve),
                                                                 ("refine", refined.curve)]),
                                               self.out_dir / f"loss_member{i}.csv"))
            rounds = pd.DataFrame([vars(r) for r in refined.rounds])
            _write_csv(rounds, self.out_dir / f"refine_rounds_member{i}.csv")
            summaries.append(
                f"member {i} (seed {seed}): initial loss "
                f"{initial_curve[-1] if initial_curve else float('nan'):.5f}, {len(refined.rounds)} refinement "
                f"rounds, final loss {refined.curve[-1] if refined.curve else float('nan'):.5f}")

        if train.train_nonseq:
            goals = [s.ego_goal for s in scenarios]
            joint = self._stage("train_nonseq", joint_dataset, episodes, collection,
                                self.scenario.collision_radius, self.scenario.dt, goals)
            nonseq = NonSeqBarrierModel.initialize(self.kind, train.nonseq_arch, seed=base_seed,
                                                   dt=self.scenario.dt)
            nonseq, curve = self._stage("train_nonseq", train_initial, nonseq, joint,
                                        train.initial.model_copy(update={"seed": base_seed}))
            artifacts.nonseq = save_model(model_dir / NONSEQ_FILE, nonseq)
            artifacts.curves.append(_write_csv(loss_curve_frame([("initial", curve)]),
                                               self.out_dir / "loss_nonseq.csv"))
            summaries.append(f"nonseq-cbf: {len(joint.safe)} safe / {len(joint.unsafe)} unsafe sets")

        telemetry.write_metrics(self.out_dir)
        artifacts.summaries = summaries
        return artifacts

    # -- bench ------------------------------------------------------------------

    def build_controller(self, method: str, store: ModelStore, trace: bool = False) -> Controller:
        cfg = self.cfg
        nominal = GoalSeekerController(self.kind, self.bounds, cfg.gpfm, self.scenario.dynamics)
        if method == "sncbf":
            return SncbfController(store.barrier(method), store.dynamics(method), self.bounds,
                                   cfg.inference, cfg.aggregation, nominal, trace)
        if method == "sncbf-ensemble":
            ensemble = Ensemble.from_config(store.members(method), cfg.ensemble)
            return SncbfEnsembleController(ensemble, store.dynamics(method), self.bounds,
                                           cfg.inference, cfg.aggregation, nominal, trace)
        if method == "nonseq-cbf":
            return NonSeqCbfController(store.nonseq(method), store.dynamics(method), self.bounds,
                                       cfg.inference, cfg.aggregation, nominal, trace)
        if method == "spfm":
            return SpfmController(self.kind, self.true_dynamics(), self.bounds, cfg.potential, cfg.spfm)
        if method == "gpfm":
            return GpfmController(self.kind, self.bounds, cfg.potential, cfg.gpfm, self.scenario.dynamics)
        if method in ("smpc", "smpc-true"):
            # smpc plans with the learned model unless the config asks for the analytic one
            analytic = method == "smpc-true" or cfg.smpc.use_true_dynamics
            stepper = self.true_dynamics() if analytic else store.dynamics(method)
            return SmpcController(self.kind, stepper, self.bounds, cfg.potential, cfg.smpc)
        if method == "goal-seeker":
            return nominal
        raise ConfigError(f"unregistered method {method!r}")

    def cell_scenario(self, density: int) -> Scenario:
        return self.scenario.model_copy(update={"obstacle_count": density})

    @staticmethod
    def episode_seeds(seed: int, density: int, episodes: int) -> List[int]:
        return [seed * BENCH_SEED_STRIDE + density * 10_007 + e for e in range(episodes)]

    def run_cell(self, method: str, controller: Controller, density: int, seed: int) -> BenchmarkRow:
        bench = self.cfg.bench
        scenario = self.cell_scenario(density)
        results = run_episodes(scenario, controller, self.episode_seeds(seed, density, bench.episodes))
        tag = f"{method}_{density}_{seed}"
        write_trajectory_csv(results[0], self.out_dir / "trajectories" / f"{tag}.csv")
        if results[0].traces:
            write_trace_csv(results[0].traces, self.out_dir / "traces" / f"{tag}.csv")
        failed = sum(1 for r in results if r.failed)
        frozen = sum(1 for r in results if r.outcome is EpisodeOutcome.FROZEN)
        logger.info(f"bench: {method} at {density} obstacles, seed {seed}: {failed}/{len(results)} failed")
        return BenchmarkRow(dynamics=self.kind.value, method=method, obstacles=density, seed=seed,
                            episodes=len(results), collision_rate=failed / len(results),
                            mean_steps=float(np.mean([r.steps_taken for r in results])),
                            frozen_fraction=frozen / len(results))

    @trace_method("cmd_bench")
    @time_operation("cmd_bench")
    def bench(self, models_dir: Optional[Union[str, Path]] = None) -> BenchmarkTable:
        bench = self.cfg.bench
        store = ModelStore(models_dir or self.out_dir / "models")
        controllers = {m: self.build_controller(m, store, bench.trace) for m in bench.methods}
        cells = [(m, d, s + self.seed_offset) for m in bench.methods for d in bench.densities for s in bench.seeds]

        rows: Dict[int, BenchmarkRow] = {}
        if self.threads <= 1 or len(cells) <= 1:
            for i, (m, d, s) in enumerate(cells):
                rows[i] = self.run_cell(m, controllers[m], d, s)
        else:
            with ThreadPoolExecutor(max_workers=min(self.threads, len(cells))) as executor:
                future_to_index = {
                    executor.submit(self.run_cell, m, controllers[m], d, s): i
                    for i, (m, d, s) in enumerate(cells)
                }
                for future in as_completed(future_to_index):
                    rows[future_to_index[future]] = future.result()

        table = BenchmarkTable(rows=[rows[i] for i in range(len(cells))])
        write_benchmark_csv(table, self.out_dir / "benchmark.csv")
        write_svg(collision_rate_svg(table, self.kind.value), self.out_dir / "collision_rate.svg")
        telemetry.write_metrics(self.out_dir)
        return table

    # -- decomp -----------------------------------------------------------------

    @trace_method("cmd_decomp")
    def decomp(self):
        decomp = self.cfg.decomp.model_copy(update={"seeds": [s + self.seed_offset for s in self.cfg.decomp.seeds]})
        report, _ = self._stage("decomposability", run_decomposability, decomp, self.scenario.orca,
                                self.scenario.dt, self.threads)
        write_decomp_csv(report, self.out_dir / "decomp.csv")
        write_svg(decomposition_svg(report), self.out_dir / "decomp.svg")
        telemetry.write_metrics(self.out_dir)
        return report

    # -- replay -----------------------------------------------------------------

    def replay_grid(self, trajectory: RecordedTrajectory, model: Union[BarrierModel, NonSeqBarrierModel],
                    frame: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        replay = self.cfg.replay
        return barrier_grid(trajectory, model, frame, self.scenario.arena_half_extent, replay.grid_pitch,
                            replay.max_cells, self.cfg.aggregation.clip, self.cfg.inference.sensing_range,
                            self.scenario.dt)

    @trace_method("cmd_replay")
    def replay(self, trajectory_path: Union[str, Path], model_path: Union[str, Path]) -> List[Path]:
        trajectory = read_trajectory_csv(trajectory_path)
        model = load_model(model_path)
        if not isinstance(model, (BarrierModel, NonSeqBarrierModel)):
            raise ContainerError(f"{model_path} holds no barrier model")
        if model.kind != trajectory.kind:
            raise ConfigError(f"model drives {model.kind.value}, trajectory records {trajectory.kind.value}")
        written = []
        for frame in self.cfg.replay.frames:
            if not 0 <= frame < len(trajectory.ego_states):
                raise ConfigError(f"replay frame {frame} outside the {len(trajectory.ego_states)} recorded steps")
            xs, ys, grid = self.replay_grid(trajectory, model, frame)
            svg = replay_frame_svg(xs, ys, grid, self.cfg.replay.levels, trajectory.obstacle_positions[frame],
                                   self.scenario.pedestrian.radius, trajectory.ego_states[:frame + 1],
                                   self.scenario.ego_goal, title=f"{Path(trajectory_path).stem} step {frame}")
            written.append(write_svg(svg, self.out_dir / "replay" / f"{Path(trajectory_path).stem}_{frame:04d}.svg"))
        return written


def replay_axis(half_extent: float, pitch: float) -> np.ndarray:
    n = int(np.floor(2 * half_extent / pitch + 1e-9)) + 1
    return -half_extent + pitch * np.arange(n)


def barrier_grid(trajectory: RecordedTrajectory, model: Union[BarrierModel, NonSeqBarrierModel], frame: int,
                 half_extent: float, pitch: float, max_cells: int, clip: float, sensing_range: float,
                 dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Aggregated barrier value with the ego moved to every grid point. The
    ego's non-positional state components and its velocity keep their
    recorded values at ``frame``; obstacle windows shift with the ego.
    """
    xs = replay_axis(half_extent, pitch)
    ys = replay_axis(half_extent, pitch)
    cells = len(xs) * len(ys)
    if cells > max_cells:
        min_pitch = 2 * half_extent / (np.sqrt(max_cells) - 1)
        raise ConfigError(f"replay grid of {cells} cells exceeds max_cells={max_cells}; "
                          f"use replay.grid_pitch >= {min_pitch:.3f} or raise replay.max_cells")
    gx, gy = np.meshgrid(xs, ys)
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    ego_pos = trajectory.ego_states[:, :2]
    rel = trajectory_relative_states(ego_pos, trajectory.obstacle_positions, trajectory.obstacle_velocities, dt)
    m = rel.shape[1]
    if m == 0:
        return xs, ys, np.ones((len(ys), len(xs)))

    state = trajectory.ego_states[frame]
    aggregated = np.empty(cells)
    if isinstance(model, BarrierModel):
        windows = window_at(rel, frame, model.history_length)                # (m, k, 4)
        for start in range(0, cells, REPLAY_CHUNK):
            shift = ego_pos[frame] - points[start:start + REPLAY_CHUNK]      # (c, 2)
            c = len(shift)
            w = np.repeat(windows[None], c, axis=0)
            w[..., :2] += shift[:, None, None, :]
            values = model.values(np.repeat(state[None, :], c * m, axis=0),
                                  w.reshape(c * m, *windows.shape[1:])).reshape(c, m)
            far = np.linalg.norm(w[:, :, -1, :2], axis=-1) > sensing_range
            values[far] = clip
            aggregated[start:start + c] = aggregate_rows(values, clip)
    else:
        current = rel[frame]
        for start in range(0, cells, REPLAY_CHUNK):
            shift = ego_pos[frame] - points[start:start + REPLAY_CHUNK]
            c = len(shift)
            sets = np.repeat(current[None], c, axis=0)
            sets[..., :2] += shift[:, None, :]
            values = model.values(np.repeat(state[None, :], c, axis=0), sets)
            aggregated[start:start + c] = np.maximum(np.minimum(values, clip), 0.0) / clip
    return xs, ys, aggregated.reshape(len(ys), len(xs))


def benchmark_frame(table: BenchmarkTable) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump(mode="json") for r in table.rows], columns=list(BENCHMARK_COLUMNS))


def write_benchmark_csv(table: BenchmarkTable, path: Union[str, Path]) -> Path:
    return _write_csv(benchmark_frame(table), Path(path))


def read_benchmark_csv(path: Union[str, Path]) -> BenchmarkTable:
    frame = pd.read_csv(path)
    return BenchmarkTable(rows=[BenchmarkRow(**row) for row in frame.to_dict(orient="records")])


# -- command entry points ---------------------------------------------------------


def _service(config_path, out_dir=None, threads=None, seed_offset=0) -> BenchService:
    return BenchService(load_experiment_config(config_path), out_dir, threads, seed_offset)


@log_method_call(include_result=False)
def cmd_train(config_path, out_dir=None, threads=None, seed_offset=0) -> TrainArtifacts:
    return _service(config_path, out_dir, threads, seed_offset).train()


@log_method_call(include_result=False)
def cmd_bench(config_path, models_dir=None, out_dir=None, threads=None, seed_offset=0) -> BenchmarkTable:
    return _service(config_path, out_dir, threads, seed_offset).bench(models_dir)


@log_method_call(include_result=False)
def cmd_decomp(config_path, out_dir=None, threads=None, seed_offset=0):
    return _service(config_path, out_dir, threads, seed_offset).decomp()


@log_method_call(include_result=False)
def cmd_replay(config_path, trajectory_path, model_path, out_dir=None) -> List[Path]:
    return _service(config_path, out_dir).replay(trajectory_path, model_path)
