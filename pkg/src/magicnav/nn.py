"""Transformer building blocks on top of the tape engine."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container; parameters are enumerated in attribute order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def param(rng, shape, std=None, fill=None):
    if fill is not None:
        data = np.full(shape, float(fill))
    else:
        if std is None:
            fan_in, fan_out = shape[0], shape[-1]
            std = math.sqrt(2.0 / (fan_in + fan_out))
        data = rng.normal(0.0, std, size=shape)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.weight = param(rng, (d_in, d_out))
        self.bias = param(rng, (d_out,), fill=0.0) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product attention; returns (output, attention probabilities).

    ``key_mask`` is a (B, Sk) boolean array of attendable keys.
    """

    def __init__(self, rng, d, heads):
        if d % heads:
            raise T.ContractError(f"hidden size {d} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(rng, d, d)
        self.key = Linear(rng, d, d)
        self.value = Linear(rng, d, d)
        self.out = Linear(rng, d, d)

    def _split(self, x):
        b, s, d = x.shape
        return T.transpose(T.reshape(x, (b, s, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, xq, xkv, key_mask=None):
        b, sq, d = xq.shape
        q = self._split(self.query(xq))
        k = self._split(self.key(xkv))
        v = self._split(self.value(xkv))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // self.heads))
        mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, None, :]
        attn = T.softmax(scores, axis=-1, mask=mask)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, sq, d))
        return self.out(ctx), attn


class FeedForward(Module):
    def __init__(self, rng, d, mult=4):
        self.inner = Linear(rng, d, mult * d)
        self.outer = Linear(rng, mult * d, d)

    def __call__(self, x):
        return self.outer(T.relu(self.inner(x)))


class EncoderLayer(Module):
    """Post-norm self-attention block: 4 projections, a 4x FFN, two norms."""

    def __init__(self, rng, d, heads, mult=4):
        self.attn = MultiHeadAttention(rng, d, heads)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, mult)
        self.norm2 = LayerNorm(d)

    def __call__(self, x, key_mask=None):
        a, probs = self.attn(x, x, key_mask)
        x = self.norm1(T.add(x, a))
        x = self.norm2(T.add(x, self.ffn(x)))
        return x, probs


class CrossLayer(Module):
    """Cross-modal block: queries attend to a context sequence, then to each
    other, then a feed-forward; returns the cross-attention map."""

    def __init__(self, rng, d, heads, mult=4):
        self.cross = MultiHeadAttention(rng, d, heads)
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(rng, d, mult)
        self.norm3 = LayerNorm(d)

    def __call__(self, x, context, context_mask, query_mask):
        a, probs = self.cross(x, context, context_mask)
        x = self.norm1(T.add(x, a))
        s, _ = self.self_attn(x, x, query_mask)
        x = self.norm2(T.add(x, s))
        x = self.norm3(T.add(x, self.ffn(x)))
        return x, probs


class Head(Module):
    """Two linear layers with relu and layer norm in between, scalar output."""

    def __init__(self, rng, d):
        self.hidden = Linear(rng, d, d)
        self.norm = LayerNorm(d)
        self.score = Linear(rng, d, 1)

    def __call__(self, x):
        y = self.score(self.norm(T.relu(self.hidden(x))))
        return T.reshape(y, y.shape[:-1])


class SelfAttentionStack(Module):
    """Token + position embeddings feeding ``layers`` encoder blocks.

    This is exactly the module whose size the closed-form parameter count
    models (no embedding norm, no position table counted separately)."""

    def __init__(self, rng, vocab, d, layers, heads, max_len=64, with_positions=False):
        self.embed = param(rng, (vocab, d), std=0.02)
        if with_positions:
            self.positions = param(rng, (max_len, d), std=0.02)
        self.layers = [EncoderLayer(rng, d, heads) for _ in range(layers)]
