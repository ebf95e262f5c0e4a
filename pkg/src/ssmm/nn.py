"""Parameterized building blocks composed by :mod:`ssmm.models`."""
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .ops3d import conv3d
from .tensor import Tensor


class ConfigurationError(ValueError):
    pass


def init_uniform(rng, shape, fan_in, gain=1.0):
    """Fan-in-scaled uniform draw with std = gain / sqrt(fan_in)."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container; children and parameters are kept in
    assignment order so traversal (and therefore init and checkpoint layout)
    is deterministic."""

    training = True

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_param(self, name, data):
        p = Tensor(data, requires_grad=True, name=name)
        setattr(self, name, p)
        return p

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, v in state.items():
            if k not in own:
                continue
            v = np.asarray(v, dtype=np.float64)
            if v.shape != own[k].shape:
                raise ValueError(f"shape mismatch for {k}: checkpoint {v.shape} vs model {own[k].shape}")
            own[k].data = v.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, gain=1.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.add_param("weight", init_uniform(rng, (n_out, n_in), n_in, gain))
        self.add_param("bias", np.zeros(n_out))

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise T.DimensionError(f"Linear expects last dim {self.n_in}, got {x.shape}")
        return T.matmul(x, T.transpose(self.weight, None)) + self.bias


class LayerNorm(Module):
    """Normalization over the last axis with elementwise affine."""

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.add_param("gamma", np.ones(dim))
        self.add_param("beta", np.zeros(dim))

    def forward(self, x):
        return T.layer_norm(x, axes=-1, eps=self.eps) * self.gamma + self.beta


class VolumeNorm(Module):
    """Layer normalization over (C, D, H, W) per sample, per-channel affine."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.add_param("gamma", np.ones((1, channels, 1, 1, 1)))
        self.add_param("beta", np.zeros((1, channels, 1, 1, 1)))

    def forward(self, x):
        return T.layer_norm(x, axes=(1, 2, 3, 4), eps=self.eps) * self.gamma + self.beta


class Conv3d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, gain=np.sqrt(2.0)):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel**3
        self.add_param("weight", init_uniform(rng, (c_out, c_in, kernel, kernel, kernel), fan_in, gain))

    def forward(self, x):
        return conv3d(x, self.weight, self.stride, self.padding)


class ResidualBlock3D(Module):
    """conv-norm-relu-conv-norm plus skip, then relu.

    The skip path gets a strided 1x1x1 projection whenever channels or
    resolution change.
    """

    def __init__(self, c_in, c_out, stride, rng):
        super().__init__()
        self.stride = stride
        self.conv1 = Conv3d(c_in, c_out, 3, rng, stride=stride, padding=1)
        self.norm1 = VolumeNorm(c_out)
        self.conv2 = Conv3d(c_out, c_out, 3, rng, stride=1, padding=1)
        self.norm2 = VolumeNorm(c_out)
        self.skip = Conv3d(c_in, c_out, 1, rng, stride=stride, gain=1.0) if (c_in != c_out or stride != 1) else None

    def forward(self, x):
        h = T.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return T.relu(h + (x if self.skip is None else self.skip(x)))


class MultiHeadAttention(Module):
    def __init__(self, d_model, n_heads, rng):
        super().__init__()
        if d_model % n_heads:
            raise ConfigurationError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model, self.n_heads = d_model, n_heads
        self.d_head = d_model // n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.last_weights = None

    def _split(self, x):
        n, length, _ = x.shape
        return T.transpose(T.reshape(x, (n, length, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def forward(self, query, kv):
        if query.shape[-1] != self.d_model or kv.shape[-1] != self.d_model:
            raise T.DimensionError(f"attention expects width {self.d_model}, got {query.shape} / {kv.shape}")
        n, lq, _ = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(kv))
        v = self._split(self.v_proj(kv))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_head))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = T.matmul(weights, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, lq, self.d_model))
        return self.out_proj(ctx)


class FeedForward(Module):
    def __init__(self, d_model, d_hidden, rng):
        super().__init__()
        self.fc1 = Linear(d_model, d_hidden, rng, gain=np.sqrt(2.0))
        self.fc2 = Linear(d_hidden, d_model, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerLayer(Module):
    """Post-norm layer: self-attention, cross-attention, feed-forward."""

    def __init__(self, d_model, n_heads, d_hidden, rng):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_hidden, rng)
        self.norm3 = LayerNorm(d_model)

    def forward(self, x, kv):
        x = self.norm1(x + self.self_attn(x, x))
        x = self.norm2(x + self.cross_attn(x, kv))
        return self.norm3(x + self.ffn(x))


class MLP(Module):
    """Stack of Linear+ReLU(+dropout) layers; the last layer is linear."""

    def __init__(self, sizes, rng, dropout=0.0):
        super().__init__()
        self.dropout = dropout
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layer = Linear(a, b, rng, gain=1.0 if last else np.sqrt(2.0))
            setattr(self, f"fc{i}", layer)
            self.layers.append(layer)
        self._drop_rng = np.random.default_rng(int(rng.integers(2**31)))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
                x = T.dropout(x, self.dropout, self._drop_rng, self.training)
        return x
