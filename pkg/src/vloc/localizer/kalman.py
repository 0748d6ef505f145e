"""18-state constant-acceleration Kalman filter over position and Euler angles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import Pose, euler_to_matrix, matrix_to_euler

STATE_DIM = 18
MEAS_IDX = np.array([0, 1, 2, 9, 10, 11])
PITCH_LIMIT = math.pi / 2 - 1e-3


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass
class PoseMeasurement:
    x: float
    y: float
    z: float
    roll: float
    pitch: float
    yaw: float
    frame_id: int = -1
    inlier_count: int = 0
    mean_error: float = 0.0   # mean inlier reprojection error (px)

    def __post_init__(self):
        self.roll, self.pitch, self.yaw = (wrap_angle(a) for a in (self.roll, self.pitch, self.yaw))

    @classmethod
    def from_pose(cls, pose: Pose, frame_id: int = -1, inlier_count: int = 0, mean_error: float = 0.0):
        roll, pitch, yaw = matrix_to_euler(pose.R.T)
        return cls(*pose.center.tolist(), roll, pitch, yaw, frame_id, inlier_count, mean_error)

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def pose(self) -> Pose:
        return Pose.from_center(self.position, euler_to_matrix(self.roll, self.pitch, self.yaw))


@dataclass(frozen=True)
class KalmanConfig:
    q_pos: float = 4.0          # acceleration-increment variance, translation
    q_ang: float = 1.0          # same for angles
    gate_sigma: float = 4.0
    k_pos: float = 0.05         # measurement std per px of mean reprojection error (m/px)
    k_ang: float = 0.01         # rad/px
    error_floor: float = 0.5    # px
    init_sigma_pos: float = 5.0
    init_sigma_ang: float = 0.5
    init_sigma_vel: float = 2.0
    init_sigma_acc: float = 2.0
    init_sigma_rate: float = 1.0
    init_sigma_ang_acc: float = 1.0


@dataclass(frozen=True)
class KalmanState:
    state: np.ndarray
    covariance: np.ndarray
    last_timestamp: float

    @property
    def position(self) -> np.ndarray:
        return self.state[0:3].copy()

    @property
    def angles(self) -> np.ndarray:
        return self.state[9:12].copy()

    def pose(self) -> Pose:
        return Pose.from_center(self.position, euler_to_matrix(*self.angles))


def kalman_init(z: PoseMeasurement, timestamp: float, config: KalmanConfig = KalmanConfig()) -> KalmanState:
    x = np.zeros(STATE_DIM)
    x[MEAS_IDX] = z.vector
    sig = np.empty(STATE_DIM)
    sig[0:3], sig[3:6], sig[6:9] = config.init_sigma_pos, config.init_sigma_vel, config.init_sigma_acc
    sig[9:12], sig[12:15], sig[15:18] = config.init_sigma_ang, config.init_sigma_rate, config.init_sigma_ang_acc
    return KalmanState(x, np.diag(sig ** 2), float(timestamp))


def transition(dt: float) -> np.ndarray:
    blk = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    F = np.eye(STATE_DIM)
    for base in (0, 9):
        for i in range(3):
            idx = [base + i, base + 3 + i, base + 6 + i]
            F[np.ix_(idx, idx)] = blk
    return F


def process_noise(dt: float, q_pos: float, q_ang: float) -> np.ndarray:
    """Piecewise-constant acceleration noise, one rank-one block per axis."""
    g = np.array([0.5 * dt * dt, dt, 1.0])
    blk = np.outer(g, g)
    Q = np.zeros((STATE_DIM, STATE_DIM))
    for base, q in ((0, q_pos), (9, q_ang)):
        for i in range(3):
            idx = [base + i, base + 3 + i, base + 6 + i]
            Q[np.ix_(idx, idx)] = q * blk
    return Q


def _sym(P):
    return 0.5 * (P + P.T)


def kalman_predict(state: KalmanState, dt: float, q_pos: float = KalmanConfig.q_pos,
                   q_ang: float = KalmanConfig.q_ang) -> KalmanState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    F = transition(dt)
    x = F @ state.state
    x[9:12] = wrap_angle(x[9:12])
    x[10] = np.clip(x[10], -PITCH_LIMIT, PITCH_LIMIT)
    P = _sym(F @ state.covariance @ F.T + process_noise(dt, q_pos, q_ang))
    return KalmanState(x, P, state.last_timestamp + dt)


def measurement_noise(mean_error_px: float, config: KalmanConfig = KalmanConfig()) -> np.ndarray:
    """Diagonal R scaled by the mean inlier reprojection error."""
    e = max(float(mean_error_px), config.error_floor)
    sig = np.array([config.k_pos] * 3 + [config.k_ang] * 3) * e
    return np.diag(sig ** 2)


def innovation(state: KalmanState, z: PoseMeasurement) -> np.ndarray:
    r = z.vector - state.state[MEAS_IDX]
    r[3:] = wrap_angle(r[3:])
    return r


def kalman_update(state: KalmanState, z: PoseMeasurement, R: np.ndarray,
                  gate_sigma: float | None = 4.0) -> tuple[KalmanState, bool]:
    """Gate each pose component at ``gate_sigma`` std devs, then a linear update.

    A rejected measurement returns the input state object untouched.
    """
    P = state.covariance
    r = innovation(state, z)
    S = P[np.ix_(MEAS_IDX, MEAS_IDX)] + R
    if gate_sigma is not None and np.any(np.abs(r) > gate_sigma * np.sqrt(np.diag(S))):
        return state, False
    PHt = P[:, MEAS_IDX]
    K = np.linalg.solve(S, PHt.T).T
    x = state.state + K @ r
    x[9:12] = wrap_angle(x[9:12])
    x[10] = np.clip(x[10], -PITCH_LIMIT, PITCH_LIMIT)
    IKH = np.eye(STATE_DIM)
    IKH[:, MEAS_IDX] -= K
    P = _sym(IKH @ P @ IKH.T + K @ R @ K.T)
    return KalmanState(x, P, state.last_timestamp), True
