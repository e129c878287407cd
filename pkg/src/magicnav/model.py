"""Five-ability navigation agent: visual, textual, local match, global map, decision.

All forward functions are batched over episodes.  Variable-length parts
(instruction padding, map size, action sets) are carried as boolean masks.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import CrossLayer, EncoderLayer, Head, LayerNorm, Linear, Module, SelfAttentionStack, param
from .tensor import ContractError, Tensor

ABILITIES = ("v", "t", "l", "g", "b")


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    text_layers: int = 2
    pano_layers: int = 1
    cross_layers: int = 2
    heads: int = 4
    vocab_size: int = 64
    obs_dim: int = 32
    max_len: int = 32
    ffn_mult: int = 4

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ContractError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if min(self.text_layers, self.pano_layers, self.cross_layers) < 1:
            raise ContractError("every layer count must be >= 1")

    def to_dict(self):
        return asdict(self)


SIZE_LADDER = {"L": 64, "B": 32, "M": 24, "S": 16}


def ladder_config(size, **overrides):
    return ModelConfig(hidden=SIZE_LADDER[size], **overrides)


def param_count(h, l, D):
    """Closed-form parameter count of an ``l``-layer self-attention stack plus a
    ``D x h`` embedding table."""
    if min(h, l, D) < 1:
        raise ContractError("param_count arguments must be >= 1")
    return (12 * h * h + 13 * h) * l + D * h


def flops_count(b, s, h, l, D):
    """Closed-form forward FLOPs for batch ``b`` and sequence length ``s``."""
    if min(b, s, h, l, D) < 1:
        raise ContractError("flops_count arguments must be >= 1")
    return (24 * b * s * h * h + 4 * b * s * s * h) * l + 2 * b * s * h * D


def bare_stack(h, l, D, heads=4, seed=0):
    """The module the closed-form count describes, built for real."""
    rng = np.random.default_rng(seed)
    return SelfAttentionStack(rng, D, h, l, heads if h % heads == 0 else 1)


@dataclass
class MetaKnowledge:
    """Final-layer outputs of each ability for one step of a batch.

    ``attn[i]``: (B, H, Q, K) attention probabilities; ``attn_mask[i]``: boolean
    (B, 1, Q, K) of entries that take part in transfer; ``feat[i]``: (B, h)
    pooled features.  ``logits`` is the fused behaviour score over the unified
    action set, ``action_mask`` its legal entries.
    """

    attn: dict = field(default_factory=dict)
    attn_mask: dict = field(default_factory=dict)
    feat: dict = field(default_factory=dict)
    logits: Tensor | None = None
    action_mask: np.ndarray | None = None

    def __len__(self):
        return len([a for a in ABILITIES[:4] if a in self.feat]) + (self.logits is not None)


def masked_mean(x, mask):
    """Mean of ``x`` (B, S, h) over positions where ``mask`` (B, S) is True."""
    m = np.asarray(mask, dtype=np.float64)
    w = m / np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    return T.sum_(T.mul(x, w[:, :, None]), axis=1)


@dataclass
class TextEncoding:
    features: Tensor          # (B, L, h)
    mask: np.ndarray          # (B, L)
    attn: Tensor
    pooled: Tensor

    def select(self, idx):
        return TextEncoding(self.features[idx], self.mask[idx], self.attn[idx], self.pooled[idx])


class AgentModel(Module):
    def __init__(self, config: ModelConfig, seed=0):
        self._config = config
        c = config
        h = c.hidden
        rng = np.random.default_rng(seed)
        # textual interpretation
        self.tok_embed = param(rng, (c.vocab_size, h), std=0.1)
        self.pos_embed = param(rng, (c.max_len, h), std=0.1)
        self.text_norm = LayerNorm(h)
        self.text_layers = [EncoderLayer(rng, h, c.heads, c.ffn_mult) for _ in range(c.text_layers)]
        # visual perception
        self.obs_proj = Linear(rng, c.obs_dim, h)
        self.obs_orient = Linear(rng, 4, h)
        self.pano_layers = [EncoderLayer(rng, h, c.heads, c.ffn_mult) for _ in range(c.pano_layers)]
        # local panoramic matching
        self.local_cls = param(rng, (h,), std=0.1)
        self.local_mem = param(rng, (h,), std=0.1)
        self.local_proj = Linear(rng, h, h)
        self.local_orient = Linear(rng, 4, h)
        self.local_layers = [CrossLayer(rng, h, c.heads, c.ffn_mult) for _ in range(c.cross_layers)]
        # global topological location
        self.gaa_query = param(rng, (h,), std=0.1)
        self.visited_embed = param(rng, (h,), std=0.1)
        self.global_cls = param(rng, (h,), std=0.1)
        self.global_mem = param(rng, (h,), std=0.1)
        self.global_proj = Linear(rng, h, h)
        self.global_orient = Linear(rng, 4, h)
        self.global_layers = [CrossLayer(rng, h, c.heads, c.ffn_mult) for _ in range(c.cross_layers)]
        # behaviour decision
        self.local_head = Head(rng, h)
        self.global_head = Head(rng, h)
        self.fusion = Linear(rng, h, 1)

    @property
    def config(self):
        return self._config

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, arrays):
        params = dict(self.named_parameters())
        if set(params) != set(arrays):
            missing = sorted(set(params) ^ set(arrays))
            raise ContractError(f"state mismatch on {missing[:5]}")
        for name, p in params.items():
            if p.shape != arrays[name].shape:
                raise ContractError(f"shape mismatch for {name}: {p.shape} vs {arrays[name].shape}")
            p.data[...] = arrays[name]

    def last_layer_params(self):
        """Output-projection weights of each ability's final layer (for GradAdjust)."""
        return {
            "v": self.pano_layers[-1].ffn.outer.weight,
            "t": self.text_layers[-1].ffn.outer.weight,
            "l": self.local_layers[-1].ffn.outer.weight,
            "g": self.global_layers[-1].ffn.outer.weight,
            "b": self.fusion.weight,
        }

    # -------------------------------------------------------------- abilities

    def encode_text(self, tokens, mask=None):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        b, L = tokens.shape
        mask = np.ones((b, L), bool) if mask is None else np.asarray(mask, bool)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ContractError(f"token id outside vocabulary [0, {self.config.vocab_size})")
        if L > self.config.max_len:
            raise ContractError(f"instruction length {L} exceeds max_len {self.config.max_len}")
        x = T.add(T.embed_lookup(self.tok_embed, tokens), self.pos_embed[np.arange(L)])
        x = self.text_norm(x)
        attn = None
        for layer in self.text_layers:
            x, attn = layer(x, mask)
        return TextEncoding(x, mask, attn, masked_mean(x, mask))

    def encode_visual(self, features, orientations):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 2:
            features, orientations = features[None], np.asarray(orientations)[None]
        if features.shape[-1] != self.config.obs_dim:
            raise ContractError(f"observation dim {features.shape[-1]} != config obs_dim {self.config.obs_dim}")
        x = T.add(self.obs_proj(features), self.obs_orient(orientations))
        attn = None
        for layer in self.pano_layers:
            x, attn = layer(x)
        return x, attn

    def local_match(self, f_v, orientations, text: TextEncoding, candidate_mask):
        """Returns (LC_c, raw local scores (B, 1+V), masked local scores, cross-attention)."""
        b, v, h = f_v.shape
        cls = T.broadcast_to(T.reshape(self.local_cls, (1, 1, h)), (b, 1, h))
        mem = T.broadcast_to(T.reshape(self.local_mem, (1, 1, h)), (b, 1, h))
        seq = T.concat([cls, f_v, mem], axis=1)
        gam = np.zeros((b, v + 2, 4))
        gam[:, 1:v + 1] = orientations
        x = T.add(self.local_proj(seq), self.local_orient(gam))
        qmask = np.ones((b, v + 2), bool)
        attn = None
        for layer in self.local_layers:
            x, attn = layer(x, text.features, text.mask, qmask)
        scores = self.local_head(x[:, : v + 1])
        legal = np.concatenate([np.ones((b, 1), bool), np.asarray(candidate_mask, bool)], axis=1)
        return x, scores, T.masked_fill(scores, ~legal, -np.inf), attn

    def aggregate(self, f_v):
        """Attention pooling of the V slot features into one map-node feature."""
        b, v, h = f_v.shape
        w = T.softmax(T.reshape(T.matmul(f_v, T.reshape(self.gaa_query, (h, 1))), (b, 1, v)), axis=-1)
        return T.matmul(w, f_v)  # (B, 1, h)

    def global_locate(self, memory, layout, text: TextEncoding):
        """Cross-attend the topological map to the instruction.

        ``memory`` holds the per-step map tensors; ``layout`` the gather indices,
        masks and orientations of the map token sequence.
        """
        b = layout.token_index.shape[0]
        h = self.config.hidden
        cls = T.broadcast_to(T.reshape(self.global_cls, (1, 1, h)), (b, 1, h))
        mem = T.broadcast_to(T.reshape(self.global_mem, (1, 1, h)), (b, 1, h))
        source = T.concat([cls] + memory.node_feats + memory.slot_feats + [mem], axis=1)
        tokens = T.gather(source, layout.token_index)
        x = T.add(self.global_proj(tokens), self.global_orient(layout.orientations))
        x = T.add(x, T.mul(layout.visited[:, :, None], self.visited_embed))
        attn = None
        for layer in self.global_layers:
            x, attn = layer(x, text.features, text.mask, layout.token_mask)
        return x, self.global_head(x), attn

    def decide(self, local_scores, global_scores, gc_cls, layout):
        """Fuse local and global scores over the unified action set.

        Returns (fused logits with illegal entries at -inf, fusion weight w).
        """
        b, a = layout.action_mask.shape
        w = T.sigmoid(self.fusion(gc_cls))  # (B, 1)
        bg = T.gather(T.reshape(global_scores, (b, -1, 1)), layout.action_token)
        bg = T.reshape(bg, (b, a))
        pad = a - local_scores.shape[1]
        bl = local_scores if pad == 0 else T.concat([local_scores, np.zeros((b, pad))], axis=1)
        diff = T.mul(T.sub(bl, bg), layout.local_mask.astype(np.float64))
        fused = T.add(bg, T.mul(w, diff))
        return T.masked_fill(fused, ~layout.action_mask, -np.inf), w

    def forward_step(self, obs_feats, obs_orients, candidate_mask, text, memory, layout_fn):
        """One navigation step for a batch.

        ``layout_fn`` is called after this step's map node has been appended to
        ``memory`` and must return the map/action layout for the step.
        """
        f_v, attn_v = self.encode_visual(obs_feats, obs_orients)
        memory.append(self.aggregate(f_v), f_v)
        layout = layout_fn()
        lc, bl_raw, bl, attn_l = self.local_match(f_v, obs_orients, text, candidate_mask)
        gc, bg_tok, attn_g = self.global_locate(memory, layout, text)
        logits, w = self.decide(bl_raw, bg_tok, gc[:, 0], layout)
        b, v = f_v.shape[0], f_v.shape[1]
        mk = MetaKnowledge()
        mk.attn["v"], mk.feat["v"] = attn_v, T.mean(f_v, axis=1)
        mk.attn_mask["v"] = np.ones((b, 1, v, v), bool)
        tm = text.mask
        mk.attn["t"], mk.feat["t"] = text.attn, text.pooled
        mk.attn_mask["t"] = (tm[:, :, None] & tm[:, None, :])[:, None]
        mk.attn["l"], mk.feat["l"] = attn_l, T.mean(lc, axis=1)
        mk.attn_mask["l"] = np.broadcast_to(tm[:, None, None, :], (b, 1, v + 2, tm.shape[1]))
        qm = layout.token_mask
        mk.attn["g"], mk.feat["g"] = attn_g, masked_mean(gc, qm)
        mk.attn_mask["g"] = (qm[:, :, None] & tm[:, None, :])[:, None]
        mk.logits, mk.action_mask = logits, layout.action_mask
        extras = {"local": bl, "global_tokens": bg_tok, "w": w, "layout": layout}
        return mk, extras


class MapMemory:
    """Per-model store of aggregated node features and raw slot features."""

    def __init__(self):
        self.node_feats: list[Tensor] = []   # each (B, 1, h)
        self.slot_feats: list[Tensor] = []   # each (B, V, h)

    def append(self, node_feat, slot_feat):
        self.node_feats.append(node_feat)
        self.slot_feats.append(slot_feat)

    def select(self, idx):
        self.node_feats = [x[idx] for x in self.node_feats]
        self.slot_feats = [x[idx] for x in self.slot_feats]

    def __len__(self):
        return len(self.node_feats)


def orientation_to(scene, node, heading, other):
    if other == node:
        return np.array([0.0, 1.0, 0.0, 1.0])
    rel = scene.heading_to(node, other) - heading
    return np.array([math.sin(rel), math.cos(rel), 0.0, 1.0])
