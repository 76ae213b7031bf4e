"""Markov-chain mobility: trajectory sampling, k-step distributions,
average trajectories, and conditional distance moments.

Transition matrices are stored ROW-stochastic: ``probs[j, i]`` is the
probability of moving to waypoint ``i`` given the vehicle currently sits
at waypoint ``j`` (each row sums to one). All operations are pure given
an explicit random generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class Route:
    """Ordered waypoints of one vehicle's predetermined route (meters)."""

    waypoints: np.ndarray      # (W, 2)
    start_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "waypoints",
                           np.asarray(self.waypoints, dtype=float).reshape(-1, 2))

    @property
    def n_waypoints(self) -> int:
        return self.waypoints.shape[0]


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic waypoint transition matrix of one vehicle."""

    probs: np.ndarray          # (W, W), probs[j, i] = P[next = i | current = j]

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    def validate(self) -> list[str]:
        """Return human-readable violations (empty when well formed)."""
        issues = []
        p = self.probs
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            return [f"transition matrix must be square, got shape {p.shape}"]
        if np.any(p < -1e-15) or np.any(p > 1 + 1e-15):
            issues.append("transition probabilities must lie in [0, 1]")
        sums = p.sum(axis=1)
        bad = np.where(np.abs(sums - 1.0) > ROW_SUM_TOL)[0]
        for j in bad:
            issues.append(f"row {j} sums to {sums[j]:.12g}")
        return issues


def sample_trajectory(route: Route, matrix: TransitionMatrix, start: int,
                      horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Sample a length-``horizon`` waypoint-index path starting at ``start``."""
    if not 0 <= start < route.n_waypoints:
        raise ValueError(f"start index {start} outside route of size {route.n_waypoints}")
    cdf = np.cumsum(matrix.probs, axis=1)
    path = np.empty(horizon, dtype=np.int64)
    path[0] = start
    u = rng.random(horizon - 1) if horizon > 1 else ()
    cur = start
    for t in range(1, horizon):
        cur = int(np.searchsorted(cdf[cur], u[t - 1], side="right"))
        cur = min(cur, route.n_waypoints - 1)
        path[t] = cur
    return path


def sample_trajectories(route: Route, matrix: TransitionMatrix, start: int,
                        horizon: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``n`` independent paths at once; returns an (n, horizon) array."""
    cdf = np.cumsum(matrix.probs, axis=1)
    paths = np.empty((n, horizon), dtype=np.int64)
    paths[:, 0] = start
    for t in range(1, horizon):
        u = rng.random(n)
        rows = cdf[paths[:, t - 1]]
        nxt = (u[:, None] >= rows).sum(axis=1)
        paths[:, t] = np.minimum(nxt, route.n_waypoints - 1)
    return paths


def k_step_distribution(matrix: TransitionMatrix, start: int, k: int) -> np.ndarray:
    """Distribution over waypoints after ``k`` steps from ``start``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    dist = np.zeros(matrix.n_states)
    dist[start] = 1.0
    for _ in range(k):
        dist = dist @ matrix.probs
    return dist


def step_distributions(matrix: TransitionMatrix, start: int, k_max: int) -> np.ndarray:
    """Distributions for all step counts 0..k_max as a (k_max + 1, W) array.

    One incremental pass; row k is the k-step distribution from ``start``.
    """
    out = np.zeros((k_max + 1, matrix.n_states))
    out[0, start] = 1.0
    for k in range(1, k_max + 1):
        out[k] = out[k - 1] @ matrix.probs
    return out


def average_trajectory(route: Route, matrix: TransitionMatrix, start: int,
                       t0: int, horizon: int) -> np.ndarray:
    """Expected coordinates for slots t0..horizon given waypoint ``start`` at t0.

    Returns an (horizon - t0 + 1, 2) array; the first row is the start
    coordinate exactly. Expected positions may lie off-road; they feed
    only path-loss evaluation.
    """
    if t0 > horizon:
        raise ValueError("t0 must not exceed the horizon")
    dists = step_distributions(matrix, start, horizon - t0)
    return dists @ route.waypoints


def conditional_distance_moment(route: Route, matrix: TransitionMatrix, start: int,
                                k: int, bs_pos, gamma: float) -> float:
    """E[||l_{t+k} - l_bs||^gamma | l_t = waypoint ``start``]."""
    dist_k = k_step_distribution(matrix, start, k)
    d = np.linalg.norm(route.waypoints - np.asarray(bs_pos, dtype=float), axis=1)
    return float(dist_k @ d ** gamma)


def distance_moment_profile(route: Route, matrix: TransitionMatrix, start: int,
                            k_max: int, bs_positions: np.ndarray,
                            gamma: float) -> np.ndarray:
    """Moments E[||l_{t+k} - l_m||^gamma | l_t] for k = 0..k_max, all BSs.

    Returns a (k_max + 1, M) array computed from one distribution sweep.
    """
    dists = step_distributions(matrix, start, k_max)
    bs = np.asarray(bs_positions, dtype=float)
    d = np.linalg.norm(route.waypoints[:, None, :] - bs[None, :, :], axis=2)
    return dists @ d ** gamma
