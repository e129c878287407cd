"""Independent reference implementations used as test oracles."""
import math

import numpy as np


def bellman_ford(scene, source):
    """Single-source distances by edge relaxation; no priority queue."""
    n = scene.n_nodes
    dist = [math.inf] * n
    dist[source] = 0.0
    for _ in range(n - 1):
        changed = False
        for u, v in scene.edges:
            w = math.dist(scene.positions[u], scene.positions[v])
            for a, b in ((u, v), (v, u)):
                if dist[a] + w < dist[b]:
                    dist[b] = dist[a] + w
                    changed = True
        if not changed:
            break
    return np.array(dist)


def episode_metrics(scene, path, goal, stopped, d_th):
    """Scalar-loop SR / SPL / NE / OSR for one walk."""
    ne = bellman_ford(scene, path[-1])[goal]
    from_goal = bellman_ford(scene, goal)
    sr = 1.0 if (stopped and ne <= d_th) else 0.0
    osr = 1.0 if min(from_goal[n] for n in path) <= d_th else 0.0
    shortest = from_goal[path[0]]
    walked = sum(math.dist(scene.positions[a], scene.positions[b]) for a, b in zip(path, path[1:]))
    spl = sr if max(walked, shortest) == 0 else sr * shortest / max(walked, shortest)
    return {"sr": sr, "spl": spl, "ne": ne, "osr": osr}
