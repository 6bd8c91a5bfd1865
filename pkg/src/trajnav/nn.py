"""Transformer building blocks, AdamW and checkpoint I/O on top of :mod:`trajnav.tensor`."""
from __future__ import annotations

import hashlib
import io
import json

import numpy as np

from . import tensor as T
from .tensor import Tensor

SUBSTRATE_VERSION = 1


class ConfigError(ValueError):
    pass


class OptimizerError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def trunc_normal(rng, shape, std=0.02, dtype=T.DEFAULT_DTYPE):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


class Module:
    """Parameter container. Parameters are Tensor attributes with requires_grad;
    submodules are Module attributes or lists of Modules."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise CheckpointError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = state[name].astype(p.dtype)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, std=None):
        # fan-in scaling keeps activations O(1) at small widths
        std = d_in ** -0.5 if std is None else std
        self.weight = T.parameter(trunc_normal(rng, (d_in, d_out), std=std))
        self.bias = T.parameter(np.zeros(d_out, dtype=T.DEFAULT_DTYPE)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = T.parameter(np.ones(d, dtype=T.DEFAULT_DTYPE))
        self.beta = T.parameter(np.zeros(d, dtype=T.DEFAULT_DTYPE))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    def __init__(self, d, rng, mult=4):
        self.fc1 = Linear(d, mult * d, rng)
        self.fc2 = Linear(mult * d, d, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng):
        if d % heads:
            raise ConfigError(f"hidden size {d} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)

    def project_kv(self, x):
        return self.wk(x), self.wv(x)

    def __call__(self, x, k, v, mask=None):
        out = T.attention(self.wq(x), k, v, mask, self.heads)
        return self.wo(out)


class EncoderLayer(Module):
    """Pre-norm self-attention + GELU feed-forward."""

    def __init__(self, d, heads, rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, rng)

    def __call__(self, x, mask=None):
        h = self.ln1(x)
        k, v = self.attn.project_kv(h)
        x = x + self.attn(h, k, v, mask)
        return x + self.ffn(self.ln2(x))


class CacheError(ValueError):
    pass


class DecoderLayer(Module):
    """Pre-norm decoder layer: masked self-attention, cross-attention, feed-forward.

    ``past`` is an optional (keys, values) pair for already-processed tokens;
    the layer returns its output together with the keys/values of ``x`` so the
    caller can extend a cache.
    """

    def __init__(self, d, heads, rng):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.ln3 = LayerNorm(d)
        self.ffn = FeedForward(d, rng)

    def memory_kv(self, memory):
        return self.cross_attn.project_kv(memory)

    def __call__(self, x, mask, memory_kv, past=None):
        h = self.ln1(x)
        k, v = self.self_attn.project_kv(h)
        if past is not None:
            pk, pv = past
            if pk.shape[1] != k.shape[1] or pv.shape != pk.shape:
                raise CacheError(f"cached keys {pk.shape} do not match layer width {k.shape[1]}")
            keys, values = T.concat([pk, k]), T.concat([pv, v])
        else:
            keys, values = k, v
        x = x + self.self_attn(h, keys, values, mask)
        mk, mv = memory_kv
        x = x + self.cross_attn(self.ln2(x), mk, mv, None)
        x = x + self.ffn(self.ln3(x))
        return x, (k, v)


def sinusoidal_positions(length, d, dtype=T.DEFAULT_DTYPE):
    if d % 2:
        raise ConfigError(f"position table needs an even width, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table.astype(dtype)


# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise OptimizerError(f"parameter {i} {p.shape} has no gradient")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay:
                p.data *= p.dtype.type(1.0 - self.lr * self.weight_decay)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * upd).astype(p.dtype)


# ---------------------------------------------------------------------------
# checkpoints: npz container with a JSON header entry


def config_hash(config_dict):
    blob = json.dumps(config_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, module, config_dict, extra=None):
    header = {
        "format": "trajnav.checkpoint",
        "substrate_version": SUBSTRATE_VERSION,
        "config_hash": config_hash(config_dict),
        "config": config_dict,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in module.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return header


def read_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("substrate_version") != SUBSTRATE_VERSION:
        raise CheckpointError(f"unsupported substrate version {header.get('substrate_version')}")
    return header, state
