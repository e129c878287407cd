"""Navigation metrics: NE, SR, OSR, SPL and their split-level means."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import path_length

DEFAULT_SUCCESS_DISTANCE = 1.0


@dataclass
class EpisodeResult:
    scene: object
    path: list            # executed node walk, start first
    goal: int
    stopped: bool         # False when the horizon ran out
    shortest_length: float = None

    def __post_init__(self):
        for a, b in zip(self.path, self.path[1:]):
            if b not in self.scene.neighbors[a]:
                raise ValueError(f"executed path step {a}->{b} is not an edge")
        if self.shortest_length is None:
            self.shortest_length = float(self.scene.geodesic[self.path[0], self.goal])

    @property
    def stop_node(self):
        return self.path[-1]

    @property
    def executed_length(self):
        return path_length(self.scene, self.path)


@dataclass
class MetricsSummary:
    sr: float
    spl: float
    ne: float
    osr: float
    n_episodes: int

    def as_dict(self):
        return {"sr": self.sr, "spl": self.spl, "ne": self.ne, "osr": self.osr, "n_episodes": self.n_episodes}


def navigation_error(result):
    return float(result.scene.geodesic[result.stop_node, result.goal])


def _check_threshold(d_th):
    if not d_th > 0:
        raise ValueError(f"success distance must be positive, got {d_th}")


def success(result, d_th=DEFAULT_SUCCESS_DISTANCE):
    """Inclusive threshold; an episode that never chose stop is a failure."""
    _check_threshold(d_th)
    return int(result.stopped and navigation_error(result) <= d_th)


def oracle_success(result, d_th=DEFAULT_SUCCESS_DISTANCE):
    _check_threshold(d_th)
    d = result.scene.geodesic[result.path, result.goal]
    return int(d.min() <= d_th)


def spl(result, d_th=DEFAULT_SUCCESS_DISTANCE):
    s = success(result, d_th)
    best = result.shortest_length
    taken = result.executed_length
    if max(best, taken) == 0.0:
        return float(s)
    return s * best / max(taken, best)


def aggregate(results, d_th=DEFAULT_SUCCESS_DISTANCE):
    if not results:
        raise ValueError("cannot aggregate an empty split")
    sr = np.mean([success(r, d_th) for r in results])
    sp = np.mean([spl(r, d_th) for r in results])
    ne = np.mean([navigation_error(r) for r in results])
    osr = np.mean([oracle_success(r, d_th) for r in results])
    return MetricsSummary(float(sr), float(sp), float(ne), float(osr), len(results))
