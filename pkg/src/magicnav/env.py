"""Procedural graph navigation world with synthetic panoramas and instructions.

A scene is a connected random geometric graph in the plane.  Each node carries
a landmark id, unique within its scene.  An agent standing at a node with a
heading sees ``V`` horizontal view slots; each slot holds the landmark
embedding of the neighbour assigned to it (or a fixed wall vector) next to the
embedding of the node's own landmark.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

N_SLOTS = 12
SLOT_WIDTH = 2 * math.pi / N_SLOTS
LANDMARK_DIM = 16
_LANDMARK_TABLE_SEED = 0x5EED


class GenerationError(RuntimeError):
    pass


class InstructionError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


# ---------------------------------------------------------------- vocabulary

@dataclass(frozen=True)
class Vocabulary:
    n_landmarks: int = 48
    n_directions: int = N_SLOTS

    PAD = 0
    BEGIN = 1
    END = 2
    STOP_HINT = 3
    N_SPECIAL = 4

    @property
    def size(self):
        return self.N_SPECIAL + self.n_directions + self.n_landmarks

    def direction(self, bucket):
        return self.N_SPECIAL + bucket

    def landmark(self, lm):
        return self.N_SPECIAL + self.n_directions + lm

    def is_direction(self, tok):
        return self.N_SPECIAL <= tok < self.N_SPECIAL + self.n_directions

    def is_landmark(self, tok):
        return self.N_SPECIAL + self.n_directions <= tok < self.size

    def landmark_of(self, tok):
        return tok - self.N_SPECIAL - self.n_directions

    def bucket_of(self, tok):
        return tok - self.N_SPECIAL


def landmark_embeddings(n_landmarks, dim=LANDMARK_DIM):
    """Fixed unit-norm landmark appearance vectors shared by every scene."""
    rng = np.random.default_rng(_LANDMARK_TABLE_SEED)
    table = rng.normal(size=(n_landmarks, dim))
    return table / np.linalg.norm(table, axis=1, keepdims=True)


def wrap_angle(a):
    return a % (2 * math.pi)


def direction_bucket(rel_angle):
    return int(round(wrap_angle(rel_angle) / SLOT_WIDTH)) % N_SLOTS


def orientation(theta, phi=0.0):
    return np.array([math.sin(theta), math.cos(theta), math.sin(phi), math.cos(phi)])


# ------------------------------------------------------------------- scenes

@dataclass(eq=False)
class SceneGraph:
    scene_id: str
    positions: np.ndarray
    landmarks: np.ndarray
    edges: list
    n_landmarks: int
    neighbors: list = field(init=False)
    edge_length: dict = field(init=False)
    geodesic: np.ndarray = field(init=False)

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.landmarks = np.asarray(self.landmarks, dtype=np.int64)
        self.edges = sorted((min(u, v), max(u, v)) for u, v in self.edges)
        nbrs = [[] for _ in range(n)]
        self.edge_length = {}
        for u, v in self.edges:
            d = float(np.linalg.norm(self.positions[u] - self.positions[v]))
            self.edge_length[(u, v)] = self.edge_length[(v, u)] = d
            nbrs[u].append(v)
            nbrs[v].append(u)
        self.neighbors = [sorted(x) for x in nbrs]
        self.geodesic = np.stack([_dijkstra(self, s)[0] for s in range(n)])
        self.positions.flags.writeable = False
        self.landmarks.flags.writeable = False
        self.geodesic.flags.writeable = False
        self._landmark_node = {int(lm): i for i, lm in enumerate(self.landmarks)}

    @property
    def n_nodes(self):
        return len(self.positions)

    def node_with_landmark(self, lm):
        return self._landmark_node.get(int(lm))

    def heading_to(self, u, v):
        d = self.positions[v] - self.positions[u]
        return wrap_angle(math.atan2(d[1], d[0]))

    def is_connected(self):
        return bool(np.isfinite(self.geodesic).all())

    def to_dict(self):
        return {
            "scene_id": self.scene_id,
            "n_landmarks": self.n_landmarks,
            "positions": self.positions.tolist(),
            "landmarks": self.landmarks.tolist(),
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["scene_id"], np.array(d["positions"], dtype=np.float64), np.array(d["landmarks"]),
                   [tuple(e) for e in d["edges"]], int(d["n_landmarks"]))


def _dijkstra(scene, source):
    n = len(scene.positions)
    dist = np.full(n, np.inf)
    prev = np.full(n, -1, dtype=np.int64)
    dist[source] = 0.0
    heap = [(0.0, source)]
    done = np.zeros(n, dtype=bool)
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v in scene.neighbors[u]:
            nd = d + scene.edge_length[(u, v)]
            if nd < dist[v] - 1e-12 or (abs(nd - dist[v]) <= 1e-12 and u < prev[v]):
                dist[v] = nd
                prev[v] = u
                heapq.heappush(heap, (nd, v))
    return dist, prev


def _components(n, edges):
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        parent[find(u)] = find(v)
    return [find(i) for i in range(n)]


def generate_scene(seed, n_nodes=30, area_side=12.0, connect_radius=3.5, n_landmarks=48,
                   min_separation=1.2, max_degree=N_SLOTS, max_retries=50, scene_id=None):
    """Seeded random geometric graph, made connected by nearest-pair bridging."""
    if n_nodes < 2:
        raise GenerationError(f"n_nodes must be >= 2, got {n_nodes}")
    if n_landmarks < n_nodes:
        raise GenerationError(f"need n_landmarks >= n_nodes for unique landmarks ({n_landmarks} < {n_nodes})")
    rng = np.random.default_rng(seed)
    reasons = []
    for attempt in range(max_retries):
        pts = []
        tries = 0
        while len(pts) < n_nodes and tries < 200 * n_nodes:
            tries += 1
            p = rng.uniform(0.0, area_side, size=2)
            if all(np.hypot(*(p - q)) >= min_separation for q in pts):
                pts.append(p)
        if len(pts) < n_nodes:
            reasons.append(f"attempt {attempt}: placed only {len(pts)} of {n_nodes} points")
            continue
        pos = np.array(pts)
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        edges = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes) if dist[i, j] <= connect_radius]
        if n_nodes == 2:
            edges = [(0, 1)]
        comp = _components(n_nodes, edges)
        while len(set(comp)) > 1:
            cross = np.array(comp)[:, None] != np.array(comp)[None, :]
            d = np.where(cross, dist, np.inf)
            i, j = np.unravel_index(np.argmin(d), d.shape)
            edges.append((min(i, j), max(i, j)))
            comp = _components(n_nodes, edges)
        degree = np.zeros(n_nodes, dtype=int)
        for u, v in edges:
            degree[u] += 1
            degree[v] += 1
        if degree.max() > max_degree:
            reasons.append(f"attempt {attempt}: max degree {degree.max()} > {max_degree}")
            continue
        landmarks = rng.permutation(n_landmarks)[:n_nodes]
        scene = SceneGraph(scene_id if scene_id is not None else f"scene-{seed}", pos, landmarks,
                           [(int(u), int(v)) for u, v in edges], n_landmarks)
        if scene.is_connected():
            return scene
        reasons.append(f"attempt {attempt}: graph disconnected after bridging")
    raise GenerationError("could not generate a valid scene: " + "; ".join(reasons[-5:]))


def shortest_path(scene, u, v):
    """Return (node sequence, geodesic length) of the Dijkstra-optimal path."""
    if u == v:
        return [u], 0.0
    dist, prev = _dijkstra(scene, u)
    path = [v]
    while path[-1] != u:
        path.append(int(prev[path[-1]]))
    path.reverse()
    return path, float(dist[v])


def path_length(scene, path):
    return float(sum(scene.edge_length[(a, b)] for a, b in zip(path, path[1:])))


# -------------------------------------------------------------- instructions

def synthesize_instruction(scene, path, vocab, start_heading=0.0, max_backtracks=0):
    """Per hop emit (direction bucket, next landmark); then the goal landmark and END."""
    for a, b in zip(path, path[1:]):
        if b not in scene.neighbors[a]:
            raise InstructionError(f"path step {a}->{b} is not an edge of {scene.scene_id}")
    backtracks = sum(1 for i in range(len(path) - 2) if path[i] == path[i + 2])
    if backtracks > max_backtracks:
        raise InstructionError(f"path has {backtracks} immediate back-and-forth moves (limit {max_backtracks})")
    tokens = []
    heading = start_heading
    for a, b in zip(path, path[1:]):
        hop = scene.heading_to(a, b)
        tokens.append(vocab.direction(direction_bucket(hop - heading)))
        tokens.append(vocab.landmark(int(scene.landmarks[b])))
        heading = hop
    if len(path) > 1:
        tokens.append(vocab.landmark(int(scene.landmarks[path[-1]])))
    tokens.append(vocab.END)
    return tokens


def decode_instruction(scene, start, tokens, vocab, start_heading=0.0):
    """Greedy inverse of :func:`synthesize_instruction` given the start node."""
    path = [start]
    heading = start_heading
    i = 0
    while tokens[i] != vocab.END:
        tok = tokens[i]
        if vocab.is_direction(tok):
            lm = vocab.landmark_of(tokens[i + 1])
            bucket = vocab.bucket_of(tok)
            cur = path[-1]
            options = [n for n in scene.neighbors[cur] if scene.landmarks[n] == lm
                       and direction_bucket(scene.heading_to(cur, n) - heading) == bucket]
            if len(options) != 1:
                raise InstructionError(f"cannot decode hop at token {i}")
            heading = scene.heading_to(cur, options[0])
            path.append(options[0])
            i += 2
        elif vocab.is_landmark(tok):
            if scene.landmarks[path[-1]] != vocab.landmark_of(tok):
                raise InstructionError(f"goal landmark at token {i} does not match the reached node")
            i += 1
        else:
            raise InstructionError(f"unexpected token {tok} at {i}")
    return path


# ---------------------------------------------------------------- panoramas

@dataclass
class Panorama:
    features: np.ndarray       # (V, d_obs)
    orientations: np.ndarray   # (V, 4) slot-centre orientation relative to heading
    candidates: list           # [(neighbor, slot, orientation toward neighbor)]

    @property
    def slot_of(self):
        return {n: s for n, s, _ in self.candidates}


def assign_slots(scene, node, heading):
    """Give every neighbour a distinct view slot, nearest neighbours first."""
    order = sorted(scene.neighbors[node], key=lambda n: (scene.edge_length[(node, n)], n))
    if len(order) > N_SLOTS:
        raise GenerationError(f"node {node} has degree {len(order)} > {N_SLOTS}")
    free = set(range(N_SLOTS))
    out = []
    for n in order:
        rel = wrap_angle(scene.heading_to(node, n) - heading)

        def gap(s):
            d = abs(rel - s * SLOT_WIDTH) % (2 * math.pi)
            return min(d, 2 * math.pi - d)

        s = min(sorted(free), key=gap)
        free.remove(s)
        out.append((n, s, rel))
    return out


def observe(scene, node, heading, rng=None, sigma=0.1, table=None):
    """Panorama at ``node`` facing ``heading``; noise is drawn from ``rng`` if given."""
    if table is None:
        table = landmark_embeddings(scene.n_landmarks)
    dim = table.shape[1]
    own = table[scene.landmarks[node]]
    feats = np.zeros((N_SLOTS, 2 * dim))
    feats[:, dim:] = own
    cands = []
    for n, s, rel in assign_slots(scene, node, heading):
        feats[s, :dim] = table[scene.landmarks[n]]
        cands.append((n, s, orientation(rel)))
    if rng is not None and sigma > 0:
        feats = feats + rng.normal(0.0, sigma, size=feats.shape)
    orients = np.stack([orientation(k * SLOT_WIDTH) for k in range(N_SLOTS)])
    cands.sort(key=lambda c: c[1])
    return Panorama(feats, orients, cands)


# ---------------------------------------------------------------- episodes

@dataclass
class Episode:
    scene_id: str
    start: int
    goal: int
    path: list
    tokens: list
    positions: list
    heading: float = 0.0

    def to_dict(self):
        return {"scene_id": self.scene_id, "start": self.start, "goal": self.goal, "path": list(self.path),
                "tokens": list(self.tokens), "positions": list(self.positions), "heading": self.heading}

    @classmethod
    def from_dict(cls, d):
        return cls(d["scene_id"], int(d["start"]), int(d["goal"]), [int(x) for x in d["path"]],
                   [int(x) for x in d["tokens"]], [int(x) for x in d["positions"]], float(d.get("heading", 0.0)))


def sample_episode(scene, seed, min_hops=1, max_hops=5, vocab=None, max_tries=2000):
    if min_hops < 1:
        raise SamplingError(f"min_hops must be >= 1, got {min_hops}")
    vocab = vocab or Vocabulary(scene.n_landmarks)
    rng = np.random.default_rng(seed)
    n = scene.n_nodes
    for _ in range(max_tries):
        u, v = (int(x) for x in rng.choice(n, size=2, replace=False))
        path, _ = shortest_path(scene, u, v)
        if min_hops <= len(path) - 1 <= max_hops:
            tokens = synthesize_instruction(scene, path, vocab)
            return Episode(scene.scene_id, u, v, path, tokens, list(range(len(tokens))))
    raise SamplingError(f"no start/goal pair with {min_hops}..{max_hops} hops in {scene.scene_id} "
                        f"after {max_tries} tries")


# ---------------------------------------------------------- serialization

FORMAT_VERSION = 1


def dump_split(scene_list, episodes_by_scene, path=None):
    """Serialize scenes with their episodes; one JSON document per scene, in a list."""
    docs = []
    for scene in scene_list:
        docs.append({"version": FORMAT_VERSION, "scene": scene.to_dict(),
                     "episodes": [e.to_dict() for e in episodes_by_scene.get(scene.scene_id, [])]})
    text = json.dumps(docs, sort_keys=True, separators=(",", ":"))
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def load_split(path_or_text):
    if isinstance(path_or_text, str) and path_or_text.lstrip().startswith("["):
        docs = json.loads(path_or_text)
    else:
        with open(path_or_text) as fh:
            docs = json.load(fh)
    scenes, episodes = [], {}
    for doc in docs:
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported scene file version {doc.get('version')!r}")
        scene = SceneGraph.from_dict(doc["scene"])
        scenes.append(scene)
        episodes[scene.scene_id] = [Episode.from_dict(e) for e in doc["episodes"]]
    return scenes, episodes
