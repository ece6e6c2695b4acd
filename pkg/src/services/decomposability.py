"""
How well do per-obstacle sequential models generalize to denser crowds?

Predictors are trained on ORCA rollouts at a sparse density and scored on
fresh rollouts at denser ones by their one-step position error.
"""
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from ..exceptions import DatasetError, TrainingDivergedError
from ..ml.optim import AdamHyper, AdamState, optimizer_step
from ..models.predictors import STATE_WIDTH, PredictorModel
from ..schemas.decomp import DecompConfig, DecompEvalReport, DecompRow, PredictorKind, PredictorTrainConfig
from ..schemas.sim import BASE_HALF_EXTENT, OrcaParams, Scenario
from ..telemetry import telemetry
from ..telemetry_decorators import log_method_call, time_operation, trace_method
from .orca import Crowd, orca_step
from .simulation import FLOAT_FORMAT, resample_goals, spawn_scenario

logger = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 500_000


class Predictor(Protocol):
    name: str

    def predict_scenes(self, windows: np.ndarray, crowds: Sequence[Crowd]) -> np.ndarray:
        ...


@dataclass(frozen=True)
class CrowdRollout:
    """Obstacle-only ORCA rollout; ``states[t]`` is (m, 4) and ``crowds[t]`` the full snapshot"""

    states: np.ndarray
    crowds: Tuple[Crowd, ...]


@dataclass(frozen=True)
class SceneSet:
    """
    Supervised scenes: ``windows`` (S, m, k, 4) of absolute obstacle states,
    ``targets`` (S, m, 4) the simulator's next states and ``crowds`` the
    snapshot each window ends on.
    """

    windows: np.ndarray
    targets: np.ndarray
    crowds: Tuple[Crowd, ...] = field(default=(), repr=False)

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def obstacle_count(self) -> int:
        return self.windows.shape[1]

    def pair_count(self, kind: PredictorKind) -> int:
        """cosm pairs bundle a whole scene; the per-obstacle kinds get one pair per obstacle"""
        return len(self) if kind is PredictorKind.COSM else len(self) * self.obstacle_count

    def take(self, index: np.ndarray) -> "SceneSet":
        crowds = tuple(self.crowds[i] for i in index) if self.crowds else ()
        return SceneSet(self.windows[index], self.targets[index], crowds)

    @classmethod
    def concat(cls, parts: Sequence["SceneSet"]) -> "SceneSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise DatasetError("no scenes to concatenate")
        return cls(np.concatenate([p.windows for p in parts]), np.concatenate([p.targets for p in parts]),
                   tuple(c for p in parts for c in p.crowds))


def rollout_seed(seed: int, density: int, index: int) -> int:
    return (seed * 1_000 + density) * 10_000 + index


def simulate_crowd(density: int, steps: int, seed: int, orca: OrcaParams = OrcaParams(),
                   dt: float = 0.1) -> CrowdRollout:
    """ORCA rollout of ``steps`` steps with no ego in the scene; arrived pedestrians get new goals"""
    scenario = Scenario(obstacle_count=density, arena_half_extent=BASE_HALF_EXTENT,
                        seed=seed, dt=dt, orca=orca)
    crowd = spawn_scenario(scenario).crowd
    goal_rng = np.random.default_rng([seed, 11])
    crowds = [crowd]
    for _ in range(steps):
        crowd = resample_goals(orca_step(crowd, dt, orca), goal_rng, scenario.arena_half_extent)
        crowds.append(crowd)
    states = np.stack([np.concatenate([c.positions, c.velocities], axis=1) for c in crowds])
    return CrowdRollout(states, tuple(crowds))


def scenes_from_rollout(rollout: CrowdRollout, k: int) -> SceneSet:
    """Windows ending at every step t with k <= t < T, each paired with step t + 1"""
    states = rollout.states
    steps = len(states) - 1
    ends = np.arange(k, steps)
    m = states.shape[1]
    if len(ends) == 0:
        return SceneSet(np.zeros((0, m, k, STATE_WIDTH)), np.zeros((0, m, STATE_WIDTH)))
    idx = ends[:, None] + np.arange(-k + 1, 1)[None, :]
    windows = np.transpose(states[idx], (0, 2, 1, 3))
    return SceneSet(windows, states[ends + 1], tuple(rollout.crowds[t] for t in ends))


def _rollout_scenes(density: int, n_rollouts: int, k: int, steps: int, seed: int,
                    orca: OrcaParams, dt: float, threads: int) -> SceneSet:
    seeds = [rollout_seed(seed, density, i) for i in range(n_rollouts)]

    def one(s: int) -> SceneSet:
        return scenes_from_rollout(simulate_crowd(density, steps, s, orca, dt), k)

    if threads <= 1 or n_rollouts <= 1:
        return SceneSet.concat([one(s) for s in seeds])
    results: Dict[int, SceneSet] = {}
    with ThreadPoolExecutor(max_workers=min(threads, n_rollouts)) as executor:
        future_to_index = {executor.submit(one, s): i for i, s in enumerate(seeds)}
        for future in as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return SceneSet.concat([results[i] for i in range(n_rollouts)])


@time_operation("build_training_set")
def build_training_set(density: int, n_rollouts: int, k: int, steps: int = 60, seed: int = 0,
                       orca: OrcaParams = OrcaParams(), dt: float = 0.1, threads: int = 1) -> SceneSet:
    scenes = _rollout_scenes(density, n_rollouts, k, steps, seed, orca, dt, threads)
    logger.info(f"build_training_set: {len(scenes)} scenes of {density} obstacles from {n_rollouts} rollouts")
    return scenes


@dataclass(frozen=True)
class TrainedPredictor:
    model: PredictorModel
    held_out_l2: float
    curve: List[float]


@trace_method("train_predictor")
@log_method_call(include_result=False)
def train_predictor(kind: PredictorKind, data: SceneSet, cfg: PredictorTrainConfig = PredictorTrainConfig(),
                    history_length: Optional[int] = None) -> TrainedPredictor:
    """
    Minimize the MSE of the normalized next-state increment with minibatch
    Adam; the held-out error is the mean L2 next-position error on a
    scene-level split.
    """
    if len(data) < 2:
        raise DatasetError(f"need at least two scenes to train {kind.value}, got {len(data)}")
    k = history_length or data.windows.shape[2]
    train_idx, val_idx = train_test_split(np.arange(len(data)), test_size=cfg.validation_fraction,
                                          random_state=cfg.seed)
    train, val = data.take(np.sort(train_idx)), data.take(np.sort(val_idx))

    increments = (train.targets - train.windows[:, :, -1, :]).reshape(-1, STATE_WIDTH)
    scaler = StandardScaler().fit(increments)
    model = PredictorModel.initialize(kind, k, cfg.hidden, cfg.seed, scaler.mean_.copy(), scaler.scale_.copy())
    features = model.features(train.windows)
    targets = scaler.transform(increments)
    if kind is not PredictorKind.COSM:
        per_row = targets
    else:
        per_row = targets.reshape(len(train), train.obstacle_count, STATE_WIDTH)

    rng = np.random.default_rng([cfg.seed, 3])
    hyper = AdamHyper(learning_rate=cfg.learning_rate)
    state = AdamState()
    params = model.params.copy()
    curve: List[float] = []
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(features), size=min(cfg.batch_size, len(features)))
        params.zero_grad()
        pred = model.forward(params, features[idx])
        loss = (pred - per_row[idx].reshape(-1, STATE_WIDTH)).square().mean()
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(f"train_predictor[{kind.value}]", it, value)
        loss.backward()
        params, state = optimizer_step(params, params.grads(), state, hyper)
        curve.append(value)
        if (it + 1) % cfg.log_every == 0:
            logger.info(f"train_predictor[{kind.value}] iteration {it + 1}/{cfg.iterations} loss={value:.3e}")
    telemetry.record_training_iterations(f"predictor_{kind.value}", cfg.iterations)

    trained = model.with_params(params)
    l2, _ = prediction_errors(trained, val)
    held_out = float(np.mean(l2))
    logger.info(f"train_predictor[{kind.value}] held-out mean L2 {held_out:.4f} m")
    return TrainedPredictor(trained, held_out, curve)


class OraclePredictor:
    """Re-simulates the crowd snapshot; exact wherever the windows came from the same simulator"""

    name = "oracle"

    def __init__(self, orca: OrcaParams = OrcaParams(), dt: float = 0.1):
        self.orca = orca
        self.dt = dt

    def predict_scenes(self, windows: np.ndarray, crowds: Sequence[Crowd]) -> np.ndarray:
        if len(crowds) != len(windows):
            raise ValueError(f"oracle needs one crowd snapshot per scene, got {len(crowds)} for {len(windows)}")
        out = []
        for crowd in crowds:
            nxt = orca_step(crowd, self.dt, self.orca)
            out.append(np.concatenate([nxt.positions, nxt.velocities], axis=1))
        return np.stack(out) if out else np.zeros((0, windows.shape[1], STATE_WIDTH))


def prediction_errors(predictor: Predictor, scenes: SceneSet) -> Tuple[np.ndarray, np.ndarray]:
    """Per-obstacle next-position errors (L2 and max-norm), flattened over scenes"""
    predicted = predictor.predict_scenes(scenes.windows, scenes.crowds)
    diff = (predicted[..., :2] - scenes.targets[..., :2]).reshape(-1, 2)
    return np.linalg.norm(diff, axis=1), np.max(np.abs(diff), axis=1)


@trace_method("evaluate_generalization")
@time_operation("evaluate_generalization")
def evaluate_generalization(models: Mapping[PredictorKind, Predictor], densities: Sequence[int],
                            episodes: int, cfg: DecompConfig = DecompConfig(), seed: int = 0,
                            orca: OrcaParams = OrcaParams(), dt: float = 0.1, threads: int = 1) -> DecompEvalReport:
    """Score every predictor on the same fresh rollouts at each density"""
    rows: List[DecompRow] = []
    for density in densities:
        scenes = _rollout_scenes(density, episodes, cfg.history_length, cfg.rollout_steps,
                                 seed + EVAL_SEED_OFFSET, orca, dt, threads)
        for kind, predictor in models.items():
            l2, maxnorm = prediction_errors(predictor, scenes)
            row = DecompRow(kind=kind, density=density, seed=seed,
                            mean_l2=float(np.mean(l2)), mean_maxnorm=float(np.mean(maxnorm)),
                            eps95=float(np.quantile(maxnorm, cfg.quantile)))
            logger.info(f"evaluate_generalization: {kind.value} at {density} obstacles "
                        f"L2={row.mean_l2:.4f} max={row.mean_maxnorm:.4f} eps={row.eps95:.4f}")
            rows.append(row)
    return DecompEvalReport(densities=list(densities), rows=rows)


@trace_method("run_decomposability")
def run_decomposability(cfg: DecompConfig, orca: OrcaParams = OrcaParams(), dt: float = 0.1,
                        threads: int = 1, kinds: Sequence[PredictorKind] = tuple(PredictorKind)
                        ) -> Tuple[DecompEvalReport, Dict[Tuple[PredictorKind, int], TrainedPredictor]]:
    """Train every kind at the sparse density and evaluate on the density sweep, once per seed"""
    rows: List[DecompRow] = []
    trained: Dict[Tuple[PredictorKind, int], TrainedPredictor] = {}
    for seed in cfg.seeds:
        data = build_training_set(cfg.train_density, cfg.n_rollouts, cfg.history_length,
                                  cfg.rollout_steps, seed, orca, dt, threads)
        train_cfg = cfg.train.model_copy(update={"seed": cfg.train.seed + seed})
        models = {}
        for kind in kinds:
            trained[(kind, seed)] = train_predictor(kind, data, train_cfg)
            models[kind] = trained[(kind, seed)].model
        report = evaluate_generalization(models, cfg.densities, cfg.eval_episodes, cfg, seed, orca, dt, threads)
        rows.extend(report.rows)
    return DecompEvalReport(densities=list(cfg.densities), rows=rows), trained


DECOMP_COLUMNS = ["kind", "density", "seed", "mean_l2", "mean_maxnorm", "eps95"]


def decomp_frame(report: DecompEvalReport) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump(mode="json") for r in report.rows], columns=DECOMP_COLUMNS)


def write_decomp_csv(report: DecompEvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    decomp_frame(report).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path
