"""
Per-obstacle relative-state features and their windows.

A relative state is (obstacle position - ego position, obstacle velocity -
ego planar velocity); the ego velocity is its last displacement over dt and
zero on the first step of an episode. Windows are oldest first; windows that
reach back before the episode start repeat the first observed state.
"""
import numpy as np

from ..schemas.barrier import RELATIVE_STATE_WIDTH, ObstacleHistory, RelativeState


def ego_velocities(ego_positions: np.ndarray, dt: float) -> np.ndarray:
    """Displacement velocity per recorded step, zero at step 0"""
    vel = np.zeros_like(ego_positions, dtype=np.float64)
    vel[1:] = np.diff(ego_positions, axis=0) / dt
    return vel


def relative_states(ego_position: np.ndarray, ego_velocity: np.ndarray,
                    obstacle_positions: np.ndarray, obstacle_velocities: np.ndarray) -> np.ndarray:
    """(m, 4) relative states of every obstacle against one ego"""
    out = np.empty((len(obstacle_positions), RELATIVE_STATE_WIDTH))
    out[:, :2] = obstacle_positions - ego_position
    out[:, 2:] = obstacle_velocities - ego_velocity
    return out


def trajectory_relative_states(ego_positions: np.ndarray, obstacle_positions: np.ndarray,
                               obstacle_velocities: np.ndarray, dt: float) -> np.ndarray:
    """(T+1, m, 4) relative states over a recorded trajectory"""
    ego_vel = ego_velocities(ego_positions, dt)
    out = np.empty((*obstacle_positions.shape[:2], RELATIVE_STATE_WIDTH))
    out[:, :, :2] = obstacle_positions - ego_positions[:, None, :]
    out[:, :, 2:] = obstacle_velocities - ego_vel[:, None, :]
    return out


def window_at(rel: np.ndarray, t: int, k: int) -> np.ndarray:
    """(m, k, 4) windows ending at step ``t`` of a (T+1, m, 4) trajectory"""
    idx = np.clip(np.arange(t - k + 1, t + 1), 0, None)
    return np.transpose(rel[idx], (1, 0, 2))


def observation_windows(ego_positions: np.ndarray, obstacle_positions: np.ndarray,
                        obstacle_velocities: np.ndarray, step: int, dt: float, k: int) -> np.ndarray:
    """
    (m, k, 4) windows from the windows an Observation carries.

    ``ego_positions`` may hold one extra older row so the oldest window step
    has a velocity; when the window starts at the episode start the velocity
    there is zero.
    """
    vel = np.diff(ego_positions, axis=0) / dt
    if len(ego_positions) == step + 1:
        vel = np.vstack([np.zeros((1, 2)), vel])
    o = len(obstacle_positions)
    ego_pos = ego_positions[-o:]
    ego_vel = vel[-o:]
    rel = np.empty((o, obstacle_positions.shape[1], RELATIVE_STATE_WIDTH))
    rel[:, :, :2] = obstacle_positions - ego_pos[:, None, :]
    rel[:, :, 2:] = obstacle_velocities - ego_vel[:, None, :]
    return window_at(rel, o - 1, k)


def advance_windows(windows: np.ndarray, latest: np.ndarray) -> np.ndarray:
    """Drop the oldest step of each window and append ``latest``; works for any leading batch shape"""
    return np.concatenate([windows[..., 1:, :], latest[..., None, :]], axis=-2)


def advance_history(h: ObstacleHistory, observed: RelativeState) -> ObstacleHistory:
    return ObstacleHistory(steps=(*h.steps[1:], observed))


def predicted_successor_states(ego_now: np.ndarray, ego_next: np.ndarray, obstacle_positions: np.ndarray,
                               obstacle_velocities: np.ndarray, dt: float) -> np.ndarray:
    """
    Relative states one step ahead: obstacles move at constant velocity and
    the ego lands at its predicted successor. ``ego_now`` / ``ego_next`` are
    (n, 2) candidate positions, obstacles (..., m, 2); returns (n, m, 4).
    """
    ego_vel_next = (ego_next - ego_now) / dt
    obs_next = obstacle_positions + obstacle_velocities * dt
    out = np.empty((len(ego_next), obstacle_positions.shape[-2], RELATIVE_STATE_WIDTH))
    out[:, :, :2] = obs_next - ego_next[:, None, :]
    out[:, :, 2:] = obstacle_velocities - ego_vel_next[:, None, :]
    return out
