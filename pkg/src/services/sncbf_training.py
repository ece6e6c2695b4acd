"""
Two-phase training of the barrier models.

Phase one fits B on demonstration samples with the hinge loss

    L = mean_safe  phi(-B)  +  mean_unsafe  phi(B)  +  mean_pairs  phi(-dB/dt - kappa*B)

where phi(z) = max(gamma + z, 0) and dB/dt is the finite difference over a
consecutive pair. Phase two re-labels samples near the learned boundary by
unrolling the learned ego dynamics and retrains on the augmented dataset.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..exceptions import DatasetError, TrainingDivergedError
from ..ml.diffcomp import ParamBundle, Tensor, hinge
from ..ml.optim import AdamHyper, AdamState, optimizer_step
from ..models.barrier import BarrierModel, NonSeqBarrierModel
from ..schemas.barrier import (
    RELATIVE_STATE_WIDTH,
    CollectionConfig,
    ObstacleHistory,
    RefineConfig,
    TrainConfig,
)
from ..schemas.dynamics import Control, ControlBounds, DynamicsKind, EgoState
from ..schemas.inference import ControllerDecision
from ..schemas.sim import Scenario
from ..telemetry import telemetry
from ..telemetry_decorators import log_method_call, time_operation, trace_method
from .ego_dynamics import Stepper, sample_control_array
from .relative_states import (
    advance_windows,
    ego_velocities,
    trajectory_relative_states,
    window_at,
)
from .simulation import Controller, EpisodeResult, Observation, run_episodes

logger = logging.getLogger(__name__)

AnyBarrier = Union[BarrierModel, NonSeqBarrierModel]


# -- datasets -------------------------------------------------------------------


@dataclass(frozen=True)
class SampleSet:
    """
    Rows of (ego state, obstacle window, ego goal, ego planar velocity).
    ``h`` is (n, k, 4) for the sequential model and (n, m, 4) padded sets
    for the pooled model. ``obs_next`` is the recorded world position and
    velocity of the window's obstacle one step later, (n, 4), NaN where the
    recording has no next step.
    """

    x: np.ndarray
    h: np.ndarray
    goal: np.ndarray
    ego_vel: np.ndarray
    obs_next: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.obs_next is None:
            object.__setattr__(self, "obs_next", np.full((len(self.x), RELATIVE_STATE_WIDTH), np.nan))

    def __len__(self) -> int:
        return len(self.x)

    @property
    def has_successor(self) -> np.ndarray:
        return ~np.isnan(self.obs_next).any(axis=1)

    @classmethod
    def empty(cls, state_width: int, window: int) -> "SampleSet":
        return cls(np.zeros((0, state_width)), np.zeros((0, window, RELATIVE_STATE_WIDTH)),
                   np.zeros((0, 2)), np.zeros((0, 2)))

    def take(self, idx) -> "SampleSet":
        return SampleSet(self.x[idx], self.h[idx], self.goal[idx], self.ego_vel[idx], self.obs_next[idx])

    def concat(self, other: "SampleSet") -> "SampleSet":
        return SampleSet(*(np.concatenate([a, b]) for a, b in
                           zip((self.x, self.h, self.goal, self.ego_vel, self.obs_next),
                               (other.x, other.h, other.goal, other.ego_vel, other.obs_next))))

    def keys(self) -> List[bytes]:
        """Exact-equality keys of each (x, h) row"""
        return [self.x[i].tobytes() + self.h[i].tobytes() for i in range(len(self))]

    def items(self, kind: DynamicsKind) -> Iterator[Tuple[EgoState, ObstacleHistory]]:
        for i in range(len(self)):
            yield EgoState.from_array(kind, self.x[i]), ObstacleHistory.from_array(self.h[i])


@dataclass(frozen=True)
class PairSet:
    x: np.ndarray
    h: np.ndarray
    x_next: np.ndarray
    h_next: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def empty(cls, state_width: int, window: int) -> "PairSet":
        return cls(np.zeros((0, state_width)), np.zeros((0, window, RELATIVE_STATE_WIDTH)),
                   np.zeros((0, state_width)), np.zeros((0, window, RELATIVE_STATE_WIDTH)))

    def take(self, idx) -> "PairSet":
        return PairSet(self.x[idx], self.h[idx], self.x_next[idx], self.h_next[idx])

    def concat(self, other: "PairSet") -> "PairSet":
        return PairSet(*(np.concatenate([a, b]) for a, b in
                         zip((self.x, self.h, self.x_next, self.h_next),
                             (other.x, other.h, other.x_next, other.h_next))))


@dataclass(frozen=True)
class LabeledDataset:
    """Safe set D_s, unsafe set D_u and consecutive pairs D"""

    kind: DynamicsKind
    safe: SampleSet
    unsafe: SampleSet
    pairs: PairSet

    @property
    def counts(self) -> Dict[str, int]:
        return {"safe": len(self.safe), "unsafe": len(self.unsafe), "pairs": len(self.pairs)}

    def validate(self):
        empty = [name for name, n in self.counts.items() if n == 0]
        if empty:
            raise DatasetError(f"dataset has no {', '.join(empty)} samples ({self.counts}); "
                               f"raise obstacle density or the trajectory count")

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        return LabeledDataset(self.kind, self.safe.concat(other.safe), self.unsafe.concat(other.unsafe),
                              self.pairs.concat(other.pairs))

    def disjoint(self) -> "LabeledDataset":
        """Drop safe rows that also occur, exactly, among the unsafe rows"""
        unsafe_keys = set(self.unsafe.keys())
        if not unsafe_keys:
            return self
        keep = np.array([k not in unsafe_keys for k in self.safe.keys()], dtype=bool)
        if keep.all():
            return self
        return replace(self, safe=self.safe.take(keep))


def merge_datasets(parts: Sequence[LabeledDataset]) -> LabeledDataset:
    if not parts:
        raise DatasetError("no demonstrations to merge")
    merged = parts[0]
    for part in parts[1:]:
        merged = merged.concat(part)
    return merged.disjoint()


def _pad_sets(sets: List[np.ndarray], width: int) -> np.ndarray:
    """Stack variable-size obstacle sets by cycling their members up to ``width``"""
    out = np.empty((len(sets), width, RELATIVE_STATE_WIDTH))
    for i, s in enumerate(sets):
        out[i] = s[np.arange(width) % len(s)]
    return out


def label_episode(result: EpisodeResult, cfg: CollectionConfig, collision_radius: float, dt: float,
                  goal: Sequence[float]) -> LabeledDataset:
    """
    Per step and per obstacle within sensing range: unsafe when in collision,
    safe when no collision with that obstacle happens within the labelling
    horizon, otherwise left out. Safe samples with a recorded successor also
    form a pair with the next step's window for the same obstacle, and every
    sample keeps that obstacle's recorded next world state.
    """
    k = cfg.history_length
    ego_pos = result.ego_states[:, :2]
    rel = trajectory_relative_states(ego_pos, result.obstacle_positions, result.obstacle_velocities, dt)
    dist = np.linalg.norm(rel[:, :, :2], axis=-1) if rel.size else np.zeros((len(ego_pos), 0))
    colliding = dist < collision_radius
    last = len(ego_pos) - 1
    ego_vel = ego_velocities(ego_pos, dt)
    goal = np.asarray(goal, dtype=np.float64)

    safe_rows, unsafe_rows, pair_rows = [], [], []
    for t in range(last + 1):
        in_range = np.flatnonzero(dist[t] <= cfg.sensing_range)
        if len(in_range) == 0:
            continue
        windows = window_at(rel, t, k)
        next_windows = window_at(rel, t + 1, k) if t < last else None
        horizon = colliding[t + 1:min(t + cfg.label_horizon, last) + 1]
        for j in in_range:
            if colliding[t, j]:
                unsafe_rows.append((t, j, windows[j]))
            elif not horizon[:, j].any():
                safe_rows.append((t, j, windows[j]))
                if t < last:
                    pair_rows.append((t, j, windows[j], next_windows[j]))

    d = result.ego_states.shape[1]
    m = result.obstacle_positions.shape[1]
    obs_next = np.full((last + 1, m, RELATIVE_STATE_WIDTH), np.nan)
    obs_next[:last, :, :2] = result.obstacle_positions[1:]
    obs_next[:last, :, 2:] = result.obstacle_velocities[1:]

    def sample_set(rows) -> SampleSet:
        if not rows:
            return SampleSet.empty(d, k)
        ts = np.array([r[0] for r in rows])
        js = np.array([r[1] for r in rows])
        return SampleSet(result.ego_states[ts], np.stack([r[2] for r in rows]),
                         np.repeat(goal[None, :], len(rows), axis=0), ego_vel[ts], obs_next[ts, js])

    if pair_rows:
        ts = np.array([r[0] for r in pair_rows])
        pairs = PairSet(result.ego_states[ts], np.stack([r[2] for r in pair_rows]),
                        result.ego_states[ts + 1], np.stack([r[3] for r in pair_rows]))
    else:
        pairs = PairSet.empty(d, k)
    return LabeledDataset(result.kind, sample_set(safe_rows), sample_set(unsafe_rows), pairs)


def label_episode_joint(result: EpisodeResult, cfg: CollectionConfig, collision_radius: float,
                        dt: float, goal: Sequence[float]) -> Tuple[List, List, List]:
    """
    Set-level labels for the pooled model: every in-range obstacle's current
    relative state forms one set, unsafe if any member collides, safe if
    none collides within the horizon. Sets are returned unpadded.
    """
    ego_pos = result.ego_states[:, :2]
    rel = trajectory_relative_states(ego_pos, result.obstacle_positions, result.obstacle_velocities, dt)
    dist = np.linalg.norm(rel[:, :, :2], axis=-1) if rel.size else np.zeros((len(ego_pos), 0))
    colliding = dist < collision_radius
    last = len(ego_pos) - 1
    ego_vel = ego_velocities(ego_pos, dt)

    safe, unsafe, pairs = [], [], []
    for t in range(last + 1):
        members = np.flatnonzero(dist[t] <= cfg.sensing_range)
        if len(members) == 0:
            continue
        if colliding[t, members].any():
            unsafe.append((result.ego_states[t], rel[t, members], goal, ego_vel[t]))
            continue
        horizon = colliding[t + 1:min(t + cfg.label_horizon, last) + 1][:, members]
        if horizon.any():
            continue
        safe.append((result.ego_states[t], rel[t, members], goal, ego_vel[t]))
        if t < last:
            pairs.append((result.ego_states[t], rel[t, members], result.ego_states[t + 1], rel[t + 1, members]))
    return safe, unsafe, pairs


def joint_dataset(episodes: Sequence[EpisodeResult], cfg: CollectionConfig, collision_radius: float,
                  dt: float, goals: Sequence[Sequence[float]]) -> LabeledDataset:
    safe, unsafe, pairs = [], [], []
    for result, goal in zip(episodes, goals):
        s, u, p = label_episode_joint(result, cfg, collision_radius, dt, goal)
        safe += s
        unsafe += u
        pairs += p
    if not episodes:
        raise DatasetError("no demonstrations to label")
    kind = episodes[0].kind
    d = episodes[0].ego_states.shape[1]
    width = max([len(r[1]) for r in safe + unsafe] + [len(r[1]) for r in pairs] + [1])

    def sample_set(rows) -> SampleSet:
        if not rows:
            return SampleSet.empty(d, width)
        return SampleSet(np.stack([r[0] for r in rows]), _pad_sets([r[1] for r in rows], width),
                         np.stack([np.asarray(r[2], dtype=np.float64) for r in rows]),
                         np.stack([r[3] for r in rows]))

    pair_set = PairSet.empty(d, width) if not pairs else PairSet(
        np.stack([r[0] for r in pairs]), _pad_sets([r[1] for r in pairs], width),
        np.stack([r[2] for r in pairs]), _pad_sets([r[3] for r in pairs], width))
    return LabeledDataset(kind, sample_set(safe), sample_set(unsafe), pair_set).disjoint()


# -- demonstrations -------------------------------------------------------------


class EpsilonRandomController:
    """Wraps a nominal controller; with probability epsilon a uniform random control is applied"""

    def __init__(self, base: Controller, bounds: ControlBounds, epsilon: float, salt: int = 3):
        self.base = base
        self.bounds = bounds
        self.epsilon = epsilon
        self.salt = salt
        self.kind = base.kind
        self.name = f"{base.name}-eps"

    def decide(self, obs: Observation) -> ControllerDecision:
        rng = obs.rng(self.salt)
        if rng.random() < self.epsilon:
            u = sample_control_array(self.bounds, 1, rng)[0]
            return ControllerDecision(chosen=Control.from_array(obs.ego.kind, u),
                                      candidates_evaluated=1, feasible_count=1)
        return self.base.decide(obs)


def demonstration_seeds(n_trajectories: int, seed: int) -> List[int]:
    return [seed * 1_000_003 + i for i in range(n_trajectories)]


def demonstration_scenarios(cfg: Scenario, n_trajectories: int, seed: int) -> List[Scenario]:
    return [cfg.with_seed(s) for s in demonstration_seeds(n_trajectories, seed)]


@trace_method("run_demonstrations")
@time_operation("run_demonstrations")
def run_demonstrations(cfg: Scenario, nominal: Controller, collection: CollectionConfig,
                       threads: int = 1) -> List[EpisodeResult]:
    if collection.n_trajectories == 0:
        raise DatasetError("n_trajectories = 0 yields an empty dataset")
    controller = nominal
    if collection.epsilon_random > 0:
        controller = EpsilonRandomController(nominal, ControlBounds.default_for(cfg.ego_dynamics_kind),
                                             collection.epsilon_random)
    seeds = demonstration_seeds(collection.n_trajectories, collection.seed)
    return run_episodes(cfg, controller, seeds, threads=threads, history_window=collection.history_length,
                        stop_on_collision=collection.stop_on_collision)


def label_demonstrations(episodes: Sequence[EpisodeResult], scenarios: Sequence[Scenario],
                         collection: CollectionConfig) -> LabeledDataset:
    parts = [label_episode(r, collection, s.collision_radius, s.dt, s.ego_goal)
             for r, s in zip(episodes, scenarios)]
    data = merge_datasets(parts)
    logger.info(f"label_demonstrations: {len(episodes)} trajectories -> {data.counts}")
    return data


@log_method_call(include_result=False)
def collect_demonstrations(cfg: Scenario, nominal: Controller, n_trajectories: int,
                           collection: CollectionConfig = CollectionConfig(), threads: int = 1) -> LabeledDataset:
    """Roll out the nominal controller and label every in-range (x, h); fails without unsafe samples"""
    collection = collection.model_copy(update={"n_trajectories": n_trajectories})
    episodes = run_demonstrations(cfg, nominal, collection, threads)
    scenarios = demonstration_scenarios(cfg, n_trajectories, collection.seed)
    data = label_demonstrations(episodes, scenarios, collection)
    if len(data.unsafe) == 0:
        raise DatasetError(f"no unsafe samples in {n_trajectories} demonstrations; "
                           f"raise obstacle density or the trajectory count")
    return data


# -- loss -------------------------------------------------------------------------


@dataclass(frozen=True)
class LossResult:
    value: float
    terms: Tuple[float, float, float]
    grads: ParamBundle


def loss_tensor(model: AnyBarrier, params, batch: LabeledDataset) -> Tuple[Tensor, Tuple[Tensor, Tensor, Tensor]]:
    """The three hinge terms on one batch; a single forward pass covers every subset"""
    batch.validate()
    ns, nu, npairs = len(batch.safe), len(batch.unsafe), len(batch.pairs)
    x = np.concatenate([batch.safe.x, batch.unsafe.x, batch.pairs.x, batch.pairs.x_next])
    h = np.concatenate([batch.safe.h, batch.unsafe.h, batch.pairs.h, batch.pairs.h_next])
    b = model.forward(params, x, h)

    b_safe = b[:ns]
    b_unsafe = b[ns:ns + nu]
    b_now = b[ns + nu:ns + nu + npairs]
    b_next = b[ns + nu + npairs:]
    b_dot = (b_next - b_now) * (1.0 / model.dt)

    term_safe = hinge(-b_safe, model.gamma).mean()
    term_unsafe = hinge(b_unsafe, model.gamma).mean()
    term_pairs = hinge(-b_dot - b_now * model.kappa, model.gamma).mean()
    return term_safe + term_unsafe + term_pairs, (term_safe, term_unsafe, term_pairs)


def loss(model: AnyBarrier, batch: LabeledDataset) -> LossResult:
    params = model.params.copy()
    total, terms = loss_tensor(model, params, batch)
    total.backward()
    return LossResult(total.item(), tuple(t.item() for t in terms), params.grads())


def sample_batch(data: LabeledDataset, batch_size: int, rng: np.random.Generator) -> LabeledDataset:
    def pick(n: int) -> np.ndarray:
        return rng.choice(n, size=min(batch_size, n), replace=False) if n > batch_size else np.arange(n)

    return LabeledDataset(data.kind, data.safe.take(pick(len(data.safe))),
                          data.unsafe.take(pick(len(data.unsafe))), data.pairs.take(pick(len(data.pairs))))


def invariance_violation_rate(model: AnyBarrier, pairs: PairSet) -> float:
    """Fraction of pairs with a positive third loss term, gamma - dB/dt - kappa*B > 0"""
    if len(pairs) == 0:
        return 0.0
    b_now = model.values(pairs.x, pairs.h)
    b_next = model.values(pairs.x_next, pairs.h_next)
    b_dot = (b_next - b_now) / model.dt
    return float(np.mean(model.gamma - b_dot - model.kappa * b_now > 0))


@trace_method("train_barrier")
@time_operation("train_barrier")
def optimize(model: AnyBarrier, data: LabeledDataset, iterations: int, cfg: TrainConfig,
             phase: str, seed: int) -> Tuple[AnyBarrier, List[float]]:
    """Minibatch Adam on the barrier loss; the curve has one entry per iteration"""
    if iterations == 0:
        return model, []
    data.validate()
    rng = np.random.default_rng([seed, cfg.seed])
    hyper = AdamHyper(learning_rate=cfg.learning_rate)
    state = AdamState()
    params = model.params.copy()
    curve: List[float] = []
    for it in range(iterations):
        batch = sample_batch(data, cfg.batch_size, rng)
        params.zero_grad()
        total, _ = loss_tensor(model, params, batch)
        value = total.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(phase, it, value)
        total.backward()
        params, state = optimizer_step(params, params.grads(), state, hyper)
        curve.append(value)
        if (it + 1) % cfg.log_every == 0:
            logger.info(f"{phase}: iteration {it + 1}/{iterations} loss={value:.5f}")
    telemetry.record_training_iterations(phase, iterations)
    return model.with_params(params), curve


@log_method_call(include_result=False)
def train_initial(model: AnyBarrier, data: LabeledDataset,
                  cfg: TrainConfig = TrainConfig()) -> Tuple[AnyBarrier, List[float]]:
    model = replace(model, gamma=cfg.gamma, kappa=cfg.kappa) if cfg.iterations else model
    trained, curve = optimize(model, data, cfg.iterations, cfg, "initial", seed=0)
    if curve:
        logger.info(f"train_initial: final loss {curve[-1]:.5f}, invariance violations "
                    f"{invariance_violation_rate(trained, data.pairs):.3%}")
    return trained, curve


# -- boundary refinement ----------------------------------------------------------

# (states, windows, goals, ego velocities, rng) -> controls
NominalPolicy = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.random.Generator], np.ndarray]


def unroll(stepper: Stepper, x: np.ndarray, h: np.ndarray, controls: np.ndarray, obs_next: np.ndarray,
           dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Successor (x', h', ego velocity'): the ego steps under ``controls`` and
    each window appends its obstacle's recorded next world state, taken
    relative to the stepped ego.
    """
    x_next = stepper.step(x, controls)
    ego_vel_next = (x_next[:, :2] - x[:, :2]) / dt
    rel_next = np.concatenate([obs_next[:, :2] - x_next[:, :2], obs_next[:, 2:] - ego_vel_next], axis=1)
    return x_next, advance_windows(h, rel_next), ego_vel_next


def in_collision(h: np.ndarray, collision_radius: float) -> np.ndarray:
    return np.linalg.norm(h[:, -1, :2], axis=-1) < collision_radius


@dataclass
class RefinementRound:
    boundary_samples: int
    added_safe: int
    added_unsafe: int
    removed_safe: int
    final_loss: float
    violation_rate: float


@dataclass
class RefinementResult:
    data: LabeledDataset
    model: BarrierModel
    curve: List[float] = field(default_factory=list)
    rounds: List[RefinementRound] = field(default_factory=list)


def sample_boundary_states(model: BarrierModel, safe: SampleSet, cfg: RefineConfig,
                           rng: np.random.Generator) -> Tuple[SampleSet, np.ndarray]:
    """
    Seeds are safe samples with a recorded successor and 0 <= B < theta,
    drawn from a random subset of at most ``max_seeds``; each seed adds up
    to ``samples_per_seed`` copies with Gaussian ego-position jitter that
    stay within theta of the boundary.
    Returns the samples and, per sample, its index in ``safe`` (-1 for jitter).
    """
    eligible = np.flatnonzero(safe.has_successor)
    if len(eligible) == 0:
        return safe.take(eligible), eligible
    pool = rng.choice(eligible, size=min(cfg.max_seeds, len(eligible)), replace=False)
    pool.sort()
    values = model.values(safe.x[pool], safe.h[pool])
    seed_idx = pool[(values >= 0) & (values < cfg.theta)]
    seeds = safe.take(seed_idx)
    if len(seeds) == 0 or cfg.samples_per_seed == 0:
        return seeds, seed_idx

    reps = cfg.samples_per_seed
    jitter = rng.normal(scale=cfg.jitter_sigma, size=(len(seeds) * reps, 2))
    x = np.repeat(seeds.x, reps, axis=0)
    h = np.repeat(seeds.h, reps, axis=0)
    x[:, :2] += jitter
    h[:, :, :2] -= jitter[:, None, :]
    jittered = SampleSet(x, h, np.repeat(seeds.goal, reps, axis=0), np.repeat(seeds.ego_vel, reps, axis=0),
                         np.repeat(seeds.obs_next, reps, axis=0))
    near = np.abs(model.values(jittered.x, jittered.h)) < cfg.theta
    jittered = jittered.take(near)
    return seeds.concat(jittered), np.concatenate([seed_idx, np.full(len(jittered), -1)])


def _successor_controls(model: BarrierModel, stepper: Stepper, boundary: SampleSet, bounds: ControlBounds,
                        cfg: RefineConfig, rng: np.random.Generator) -> np.ndarray:
    """The random control of the algorithm, or the best of n sampled controls by successor B"""
    n = len(boundary)
    if cfg.successor_rule == "random":
        return sample_control_array(bounds, n, rng)
    width = len(bounds.lower)
    candidates = sample_control_array(bounds, n * cfg.best_of_n, rng)
    x_next, h_next, _ = unroll(stepper, np.repeat(boundary.x, cfg.best_of_n, axis=0),
                               np.repeat(boundary.h, cfg.best_of_n, axis=0), candidates,
                               np.repeat(boundary.obs_next, cfg.best_of_n, axis=0), model.dt)
    values = model.values(x_next, h_next).reshape(n, cfg.best_of_n)
    best = np.argmax(values, axis=1)
    return candidates.reshape(n, cfg.best_of_n, width)[np.arange(n), best]


def relabel_boundary(model: BarrierModel, data: LabeledDataset, boundary: SampleSet, safe_index: np.ndarray,
                     stepper: Stepper, nominal: NominalPolicy, bounds: ControlBounds, collision_radius: float,
                     cfg: RefineConfig, rng: np.random.Generator) -> Tuple[LabeledDataset, Dict[str, int]]:
    """
    One labelling pass over the boundary samples:
    nominal successor unsafe (or the sample itself) -> both to D_u and the
    sample leaves D_s; otherwise the sample joins D_s (with its nominal pair
    in D) and a second control is unrolled, whose unsafe successor joins D_u.
    """
    if len(boundary) == 0:
        return data, {"added_safe": 0, "added_unsafe": 0, "removed_safe": 0}
    if not boundary.has_successor.all():
        raise DatasetError(f"{int((~boundary.has_successor).sum())} boundary samples have no recorded successor")

    u_nominal = nominal(boundary.x, boundary.h, boundary.goal, boundary.ego_vel, rng)
    x1, h1, v1 = unroll(stepper, boundary.x, boundary.h, u_nominal, boundary.obs_next, model.dt)
    violated = in_collision(boundary.h, collision_radius) | in_collision(h1, collision_radius)

    bad = boundary.take(violated)
    bad_next = SampleSet(x1[violated], h1[violated], boundary.goal[violated], v1[violated])
    good_mask = ~violated
    good = boundary.take(good_mask)

    u_second = _successor_controls(model, stepper, good, bounds, cfg, rng) if len(good) else np.zeros((0, len(bounds.lower)))
    if len(good):
        x2, h2, v2 = unroll(stepper, good.x, good.h, u_second, good.obs_next, model.dt)
        second_bad = in_collision(h2, collision_radius)
        second = SampleSet(x2[second_bad], h2[second_bad], good.goal[second_bad], v2[second_bad])
    else:
        second = SampleSet.empty(boundary.x.shape[1], boundary.h.shape[1])

    remove = np.zeros(len(data.safe), dtype=bool)
    remove[safe_index[violated & (safe_index >= 0)]] = True
    fresh_good = good.take(safe_index[good_mask] < 0)

    safe = data.safe.take(~remove).concat(fresh_good)
    unsafe = data.unsafe.concat(bad).concat(bad_next).concat(second)
    pairs = data.pairs.concat(PairSet(good.x, good.h, x1[good_mask], h1[good_mask]))
    updated = LabeledDataset(data.kind, safe, unsafe, pairs).disjoint()
    stats = {
        "added_safe": len(fresh_good),
        "added_unsafe": len(bad) + len(bad_next) + len(second),
        "removed_safe": int(remove.sum()),
    }
    return updated, stats


@trace_method("refine_boundary")
@log_method_call(include_result=False)
def refine_boundary(model: BarrierModel, data: LabeledDataset, learned_dyn: Stepper, nominal: NominalPolicy,
                    theta: Optional[float] = None, cfg: RefineConfig = RefineConfig(),
                    train_cfg: TrainConfig = TrainConfig(), collision_radius: float = 0.5,
                    bounds: Optional[ControlBounds] = None) -> RefinementResult:
    """
    Boundary refinement rounds: sample near-boundary states, relabel them by
    unrolling ``learned_dyn``, retrain, and stop once the relative change of
    the round loss falls below ``cfg.tolerance`` or after ``cfg.max_rounds``.
    """
    if theta is not None:
        cfg = cfg.model_copy(update={"theta": theta})
    bounds = bounds or ControlBounds.default_for(model.kind)
    rng = np.random.default_rng([cfg.seed, 17])
    result = RefinementResult(data=data, model=model)
    previous: Optional[float] = None

    for round_no in range(cfg.max_rounds):
        boundary, safe_index = sample_boundary_states(result.model, result.data.safe, cfg, rng)
        if len(boundary) == 0:
            logger.info(f"refine_boundary: round {round_no + 1} found no boundary samples; no-op round")
            result.rounds.append(RefinementRound(0, 0, 0, 0, previous or 0.0,
                                                 invariance_violation_rate(result.model, result.data.pairs)))
            break
        updated, stats = relabel_boundary(result.model, result.data, boundary, safe_index, learned_dyn, nominal,
                                          bounds, collision_radius, cfg, rng)
        trained, curve = optimize(result.model, updated, cfg.iterations_per_round, train_cfg,
                                  "refine", seed=round_no + 1)
        round_loss = float(np.mean(curve[-50:])) if curve else 0.0
        rate = invariance_violation_rate(trained, updated.pairs)
        result.rounds.append(RefinementRound(len(boundary), stats["added_safe"], stats["added_unsafe"],
                                             stats["removed_safe"], round_loss, rate))
        result.data, result.model = updated, trained
        result.curve.extend(curve)
        logger.info(f"refine_boundary: round {round_no + 1}: {len(boundary)} boundary samples, "
                    f"+{stats['added_safe']} safe, +{stats['added_unsafe']} unsafe, "
                    f"-{stats['removed_safe']} safe; loss {round_loss:.5f}; violations {rate:.3%}")
        if previous is not None and abs(previous - round_loss) <= cfg.tolerance * max(abs(previous), 1e-12):
            break
        previous = round_loss
    return result
