"""Lockstep batched rollouts of one driving model with optional mirrored models.

Every model in a rollout sees the same observations and scores the same
action layout, so teacher/student action sets line up by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .env import N_SLOTS, observe, landmark_embeddings, shortest_path
from .metrics import EpisodeResult
from .model import MapMemory, orientation_to
from .tensor import ContractError

DEFAULT_HORIZON = 15


@dataclass
class NavState:
    scene: object
    episode: object
    current: int
    heading: float
    rng: np.random.Generator | None = None
    step_nodes: list = field(default_factory=list)
    visited: set = field(default_factory=set)
    observed: dict = field(default_factory=dict)
    path: list = field(default_factory=list)
    done: bool = False
    stopped: bool = False

    @classmethod
    def start(cls, scene, episode, rng=None):
        return cls(scene, episode, episode.start, episode.heading, rng, path=[episode.start])

    @property
    def t(self):
        return len(self.step_nodes)

    @property
    def frontier(self):
        return sorted(set(self.observed) - self.visited)

    def oracle_next(self):
        if self.current == self.episode.goal:
            return None
        path, _ = shortest_path(self.scene, self.current, self.episode.goal)
        return path[1]

    def result(self):
        return EpisodeResult(self.scene, list(self.path), self.episode.goal, self.stopped)


@dataclass
class Layout:
    token_index: np.ndarray    # (B, G) into [CLS, node feats, slot feats, MEM]
    token_mask: np.ndarray     # (B, G)
    orientations: np.ndarray   # (B, G, 4)
    visited: np.ndarray        # (B, G) float flag
    action_token: np.ndarray   # (B, A) global token of each action
    action_mask: np.ndarray    # (B, A)
    local_mask: np.ndarray     # (B, A) actions the local branch scores
    action_nodes: list         # per episode: None for stop, node id otherwise


def observe_batch(states, sigma, table):
    feats, orients, cands = [], [], []
    for s in states:
        pano = observe(s.scene, s.current, s.heading, rng=s.rng, sigma=sigma, table=table)
        feats.append(pano.features)
        orients.append(pano.orientations)
        cands.append(pano.candidates)
    return np.stack(feats), np.stack(orients), cands


def register_step(states, cands):
    """Record the current node as visited and its neighbours as observed."""
    for s, cs in zip(states, cands):
        t = s.t
        s.step_nodes.append(s.current)
        s.visited.add(s.current)
        for n, slot, _ in cs:
            s.observed[n] = (t, slot)


def build_layout(states, cands):
    b = len(states)
    t = states[0].t  # steps recorded so far, identical across a lockstep batch
    V = N_SLOTS
    frontiers = [s.frontier for s in states]
    G = 2 + t + max(len(f) for f in frontiers)
    cand_nodes = [{n for n, _, _ in cs} for cs in cands]
    extras = [[n for n in f if n not in cn] for f, cn in zip(frontiers, cand_nodes)]
    A = 1 + V + max(len(e) for e in extras)
    token_index = np.zeros((b, G), np.int64)
    token_mask = np.zeros((b, G), bool)
    orients = np.zeros((b, G, 4))
    visited = np.zeros((b, G))
    action_token = np.zeros((b, A), np.int64)
    action_mask = np.zeros((b, A), bool)
    local_mask = np.zeros((b, A), bool)
    action_nodes = []
    mem_index = 1 + t + t * V
    for i, s in enumerate(states):
        pos = {}
        token_index[i, 0] = 0
        for k, node in enumerate(s.step_nodes):
            token_index[i, 1 + k] = 1 + k
            orients[i, 1 + k] = orientation_to(s.scene, s.current, s.heading, node)
            visited[i, 1 + k] = 1.0
            pos[node] = 1 + k  # later visits overwrite earlier ones
        for r, node in enumerate(frontiers[i]):
            step, slot = s.observed[node]
            token_index[i, 1 + t + r] = 1 + t + step * V + slot
            orients[i, 1 + t + r] = orientation_to(s.scene, s.current, s.heading, node)
            pos[node] = 1 + t + r
        g = 2 + t + len(frontiers[i])
        token_index[i, g - 1] = mem_index
        token_mask[i, :g] = True
        nodes = [None] * A
        action_mask[i, 0] = local_mask[i, 0] = True
        for n, slot, _ in cands[i]:
            nodes[1 + slot] = n
            action_token[i, 1 + slot] = pos[n]
            action_mask[i, 1 + slot] = local_mask[i, 1 + slot] = True
        for j, n in enumerate(extras[i]):
            nodes[1 + V + j] = n
            action_token[i, 1 + V + j] = pos[n]
            action_mask[i, 1 + V + j] = True
        action_nodes.append(nodes)
    return Layout(token_index, token_mask, orients, visited, action_token, action_mask, local_mask, action_nodes)


def oracle_labels(states, layout):
    labels = np.zeros(len(states), np.int64)
    for i, s in enumerate(states):
        nxt = s.oracle_next()
        if nxt is not None:
            labels[i] = layout.action_nodes[i].index(nxt)
    return labels


def execute(state, node, horizon):
    """Apply one decision: ``None`` stops, otherwise travel to ``node``."""
    if state.done:
        raise ContractError("step called on a finished episode")
    if node is None:
        state.done = state.stopped = True
        return
    if node in state.scene.neighbors[state.current]:
        hops = [state.current, node]
    else:
        hops, _ = shortest_path(state.scene, state.current, node)
    state.path.extend(hops[1:])
    state.heading = state.scene.heading_to(hops[-2], hops[-1])
    state.current = node
    if state.t >= horizon:
        state.done = True


@dataclass
class StepRecord:
    t: int
    episode_index: np.ndarray   # positions in the original batch
    labels: np.ndarray
    knowledge: list             # MetaKnowledge per model
    extras: list
    actions: np.ndarray
    layout: Layout


def pad_tokens(episodes):
    L = max(len(e.tokens) for e in episodes)
    toks = np.zeros((len(episodes), L), np.int64)
    mask = np.zeros((len(episodes), L), bool)
    for i, e in enumerate(episodes):
        toks[i, : len(e.tokens)] = e.tokens
        mask[i, : len(e.tokens)] = True
    return toks, mask


def rollout(models, scenes, episodes, driver=0, horizon=DEFAULT_HORIZON, sigma=0.1, obs_seeds=None,
            rng=None, oracle_prob=0.0):
    """Generator over :class:`StepRecord` for a lockstep batch.

    ``driver`` is the index of the model whose argmax is executed, or
    ``"oracle"`` (follow the shortest path), or ``"random"`` (uniform over
    legal actions, drawn from ``rng``).  Returns the final :class:`NavState`
    list as the generator's return value.  With a model driver and
    ``oracle_prob > 0`` each episode independently takes the oracle action
    with that probability at every step (mixed forcing, draws from ``rng``).
    """
    table = landmark_embeddings(scenes[0].n_landmarks)
    states = []
    for i, (sc, ep) in enumerate(zip(scenes, episodes)):
        orng = None if obs_seeds is None else np.random.default_rng(obs_seeds[i])
        states.append(NavState.start(sc, ep, orng))
    toks, tmask = pad_tokens(episodes)
    texts = [m.encode_text(toks, tmask) for m in models]
    memories = [MapMemory() for _ in models]
    active = np.arange(len(states))
    while len(active):
        live = [states[i] for i in active]
        feats, orients, cands = observe_batch(live, sigma, table)
        cmask = np.zeros((len(live), N_SLOTS), bool)
        for i, cs in enumerate(cands):
            for _, slot, _ in cs:
                cmask[i, slot] = True
        t = live[0].t
        register_step(live, cands)
        layout = build_layout(live, cands)
        labels = oracle_labels(live, layout)
        knowledge, extras = [], []
        for m, text, mem in zip(models, texts, memories):
            mk, ex = m.forward_step(feats, orients, cmask, text, mem, lambda: layout)
            knowledge.append(mk)
            extras.append(ex)
        for mk in knowledge[1:]:
            if mk.logits.shape != knowledge[0].logits.shape:
                raise ContractError("mirrored models scored different action sets")
        if driver == "oracle":
            actions = labels.copy()
        elif driver == "random":
            actions = np.array([rng.choice(np.flatnonzero(row)) for row in layout.action_mask])
        else:
            logits = knowledge[driver].logits.data
            actions = np.argmax(np.where(layout.action_mask, logits, -np.inf), axis=1)
            if oracle_prob > 0.0:
                actions = np.where(rng.random(len(actions)) < oracle_prob, labels, actions)
        yield StepRecord(t, active.copy(), labels, knowledge, extras, actions, layout)
        for i, s in enumerate(live):
            execute(s, layout.action_nodes[i][actions[i]], horizon)
        keep = np.array([i for i, s in enumerate(live) if not s.done], np.int64)
        if len(keep) < len(live):
            for k in range(len(models)):
                texts[k] = texts[k].select(keep)
                memories[k].select(keep)
        active = active[keep]
    return states


def run_episodes(models, scenes, episodes, **kwargs):
    """Drive a rollout to completion and return (records, final states)."""
    gen = rollout(models, scenes, episodes, **kwargs)
    records = []
    while True:
        try:
            records.append(next(gen))
        except StopIteration as stop:
            return records, stop.value


def evaluate(model, scenes, episodes, horizon=DEFAULT_HORIZON, sigma=0.1, obs_seeds=None, batch_size=256,
             driver=0, rng=None):
    """Greedy inference; returns one EpisodeResult per episode."""
    results = []
    for lo in range(0, len(episodes), batch_size):
        sl = slice(lo, lo + batch_size)
        seeds = None if obs_seeds is None else obs_seeds[sl]
        models = [model] if model is not None else []
        _, states = T.no_grad_value(run_episodes, models, scenes[sl], episodes[sl], driver=driver,
                                    horizon=horizon, sigma=sigma, obs_seeds=seeds, rng=rng)
        results.extend(s.result() for s in states)
    return results
