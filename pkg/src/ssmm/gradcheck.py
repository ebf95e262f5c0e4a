"""Central finite-difference verification of every differentiable primitive,
the network blocks, and the full CLIP+ITM objective."""
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from . import ops3d as O
from . import tensor as T
from .models import ModelConfig, MultimodalModel
from .objectives import ClipConfig, clip_itm_loss, clip_loss, itm_loss, mine_hard_negatives, ntxent_loss
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    entries: int

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(max |a|, max |n|, floor) over the checked entries."""
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def check_gradient(fn, tensors, step=STEP, max_entries=None, rng=None):
    """Compare backprop against central differences of the scalar ``fn()``
    with respect to each Tensor in ``tensors`` (perturbed in place).

    With ``max_entries`` only a random subset of each tensor is probed.
    Returns ``(max_rel_error, entries_checked)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    out = fn()
    if out.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic, numeric = [], []
    for t in tensors:
        g = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        picks = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            picks = rng.choice(flat.size, size=max_entries, replace=False)
        with T.no_grad():
            for k in picks:
                orig = flat[k]
                flat[k] = orig + step
                up = fn().item()
                flat[k] = orig - step
                down = fn().item()
                flat[k] = orig
                numeric.append((up - down) / (2.0 * step))
                analytic.append(g.reshape(-1)[k])
    return relative_error(analytic, numeric), len(analytic)


def _param(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return Tensor(x * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


def _project(out, rng):
    """Scalar readout sum(out * R) with a fixed random R."""
    r = rng.normal(size=out.shape)
    return T.tsum(out * Tensor(r))


def _elementwise_cases(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (4,))
    pos = _param(rng, (3, 4), 0.5, 2.0)
    kink = _away_from_zero(rng, (3, 4))
    yield "add_broadcast", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.add(a, b) * Tensor(r))), [a, b]
    yield "sub_broadcast", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.sub(a, b) * Tensor(r))), [a, b]
    yield "mul_broadcast", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.mul(a, b) * Tensor(r))), [a, b]
    yield "div", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.div(a, pos) * Tensor(r))), [a, pos]
    yield "power", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.power(pos, 2.5) * Tensor(r))), [pos]
    yield "exp", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.exp(a) * Tensor(r))), [a]
    yield "log", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.log(pos) * Tensor(r))), [pos]
    yield "sqrt", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.sqrt(pos) * Tensor(r))), [pos]
    yield "relu", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.relu(kink) * Tensor(r))), [kink]
    yield "gelu", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.gelu(a) * Tensor(r))), [a]
    yield "sigmoid", (lambda r=rng.normal(size=(3, 4)): T.tsum(T.sigmoid(a * 3.0) * Tensor(r))), [a]
    seed = int(rng.integers(2**31))
    yield "dropout", (
        lambda r=rng.normal(size=(3, 4)): T.tsum(T.dropout(a, 0.3, np.random.default_rng(seed)) * Tensor(r))
    ), [a]


def _shape_cases(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (4, 5))
    ba, bb = _param(rng, (2, 3, 4)), _param(rng, (2, 4, 5))
    x = _param(rng, (2, 3, 4))
    idx = np.array([2, 0, 2, 1])
    yield "matmul_2d", (lambda r=rng.normal(size=(3, 5)): T.tsum(T.matmul(a, b) * Tensor(r))), [a, b]
    yield "matmul_batched", (lambda r=rng.normal(size=(2, 3, 5)): T.tsum(T.matmul(ba, bb) * Tensor(r))), [ba, bb]
    yield "matmul_batched_2d", (lambda r=rng.normal(size=(2, 3, 5)): T.tsum(T.matmul(ba, b) * Tensor(r))), [ba, b]
    yield "reshape", (lambda r=rng.normal(size=(6, 4)): T.tsum(T.reshape(x, (6, 4)) * Tensor(r))), [x]
    yield "transpose", (lambda r=rng.normal(size=(4, 2, 3)): T.tsum(T.transpose(x, (2, 0, 1)) * Tensor(r))), [x]
    yield "getitem_slice", (lambda r=rng.normal(size=(2, 2, 3)): T.tsum(x[:, 1:, 0:3] * Tensor(r))), [x]
    yield "getitem_gather", (lambda r=rng.normal(size=(4, 4)): T.tsum(a[idx] * Tensor(r))), [a]
    yield "concatenate", (
        lambda r=rng.normal(size=(3, 8)): T.tsum(T.concatenate([a, T.transpose(b, None)[:3]], axis=1) * Tensor(r))
    ), [a, b]
    yield "stack", (lambda r=rng.normal(size=(3, 2, 4)): T.tsum(T.stack([a, a * 2.0], axis=1) * Tensor(r))), [a]


def _reduction_cases(rng):
    x = _param(rng, (3, 5))
    t = rng.integers(0, 2, size=(3, 5)).astype(float)
    w = rng.uniform(0.5, 2.0, size=(3, 5))
    yield "sum_axis", (lambda r=rng.normal(size=(5,)): T.tsum(T.tsum(x, axis=0) * Tensor(r))), [x]
    yield "mean_keepdims", (lambda r=rng.normal(size=(3, 1)): T.tsum(T.mean(x, axis=1, keepdims=True) * Tensor(r))), [x]
    yield "max_reduce", (lambda r=rng.normal(size=(3,)): T.tsum(T.max_reduce(x, axis=1) * Tensor(r))), [x]
    yield "softmax", (lambda r=rng.normal(size=(3, 5)): T.tsum(T.softmax(x * 2.0, axis=-1) * Tensor(r))), [x]
    yield "log_softmax", (lambda r=rng.normal(size=(3, 5)): T.tsum(T.log_softmax(x, axis=0) * Tensor(r))), [x]
    yield "logsumexp", (lambda r=rng.normal(size=(3,)): T.tsum(T.logsumexp(x, axis=1) * Tensor(r))), [x]
    yield "l2_normalize", (lambda r=rng.normal(size=(3, 5)): T.tsum(T.l2_normalize(x, axis=1) * Tensor(r))), [x]
    yield "layer_norm", (lambda r=rng.normal(size=(3, 5)): T.tsum(T.layer_norm(x, axes=-1) * Tensor(r))), [x]
    yield "bce_with_logits", (lambda: T.bce_with_logits(x * 3.0, t, w)), [x]


def _volume_cases(rng):
    x = _param(rng, (2, 2, 5, 5, 5))
    w = _param(rng, (3, 2, 3, 3, 3))
    x4 = _param(rng, (1, 2, 4, 4, 4))
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        def conv(s=stride, p=pad):
            return _project(O.conv3d(x, w, s, p), np.random.default_rng(7))

        yield f"conv3d_s{stride}_p{pad}", conv, [x, w]
    yield "avg_pool3d", (lambda: _project(O.avg_pool3d(x4, 2), np.random.default_rng(8))), [x4]
    yield "max_pool3d", (lambda: _project(O.max_pool3d(x4, 2), np.random.default_rng(9))), [x4]
    yield "global_avg_pool3d", (lambda: _project(O.global_avg_pool3d(x4), np.random.default_rng(10))), [x4]


def _module_cases(rng):
    lin = nn.Linear(4, 3, rng)
    x = _param(rng, (2, 4))
    yield "Linear", (lambda: _project(lin(x), np.random.default_rng(11))), [x] + lin.parameters()
    ln = nn.LayerNorm(4)
    ln.gamma.data[:] = rng.uniform(0.5, 1.5, 4)
    yield "LayerNorm", (lambda: _project(ln(x), np.random.default_rng(12))), [x] + ln.parameters()
    vol = _param(rng, (2, 2, 4, 4, 4))
    block = nn.ResidualBlock3D(2, 3, 2, rng)
    yield "ResidualBlock3D", (lambda: _project(block(vol), np.random.default_rng(13))), [vol] + block.parameters()
    seq, kv = _param(rng, (2, 2, 8)), _param(rng, (2, 1, 8))
    attn = nn.MultiHeadAttention(8, 2, rng)
    yield "MultiHeadAttention", (lambda: _project(attn(seq, kv), np.random.default_rng(14))), [seq, kv] + attn.parameters()
    layer = nn.TransformerLayer(8, 2, 12, rng)
    yield "TransformerLayer", (lambda: _project(layer(seq, kv), np.random.default_rng(15))), [seq, kv] + layer.parameters()


def _unit_rows(rng, n, d):
    return Tensor(rng.normal(size=(n, d)), requires_grad=True)


def _loss_cases(rng):
    zi, zt = _unit_rows(rng, 4, 5), _unit_rows(rng, 4, 5)
    std = ClipConfig(temperature=0.5)
    lit = ClipConfig(temperature=0.5, denominator="literal")
    yield "clip_loss_standard", (lambda: clip_loss(T.l2_normalize(zi), T.l2_normalize(zt), std)[0]), [zi, zt]
    yield "clip_loss_literal", (lambda: clip_loss(T.l2_normalize(zi), T.l2_normalize(zt), lit)[0]), [zi, zt]
    yield "ntxent_loss", (lambda: ntxent_loss(T.l2_normalize(zi), T.l2_normalize(zt), 0.5)), [zi, zt]
    pos, neg = _param(rng, (4,)), _param(rng, (4,))
    yield "itm_loss", (lambda: itm_loss(pos * 2.0, neg * 2.0)), [pos, neg]


def tiny_model(seed=0, tabular_in=6):
    cfg = ModelConfig(
        volume_shape=(6, 6, 6),
        widths=(2, 3),
        strides=(1, 2),
        stem_stride=1,
        image_dim=4,
        tabular_in=tabular_in,
        tabular_hidden=(5,),
        tabular_dim=4,
        projection_dim=4,
        d_model=8,
        n_heads=2,
        n_layers=1,
        ffn_hidden=8,
    )
    return MultimodalModel(cfg, seed=seed)


def _composite_case(rng):
    model = tiny_model(int(rng.integers(1000)))
    n = 4
    vols = Tensor(rng.normal(size=(n, 1, 6, 6, 6)))
    rows = Tensor(rng.normal(size=(n, 6)))
    with T.no_grad():
        sim = model.project_image(model.encode_image(vols)).data @ model.project_tabular(model.encode_tabular(rows)).data.T
    neg_tab, neg_img = mine_hard_negatives(sim, 0.5, rng)
    cfg = ClipConfig(temperature=0.5)

    def fn():
        z_img = model.project_image(model.encode_image(vols))
        z_tab = model.project_tabular(model.encode_tabular(rows))
        return clip_itm_loss(model, z_img, z_tab, cfg, neg_tab, neg_img)[0]

    return "clip_itm_composite", fn, model.parameters()


def build_cases(seed=0, repeats=3):
    rng = np.random.default_rng(seed)
    cases = []
    for rep in range(repeats):
        for gen in (_elementwise_cases, _shape_cases, _reduction_cases, _volume_cases, _module_cases, _loss_cases):
            for name, fn, tensors in gen(rng):
                cases.append((f"{name}#{rep}", fn, tensors))
        name, fn, tensors = _composite_case(rng)
        cases.append((f"{name}#{rep}", fn, tensors))
    return cases


def run_suite(seed=0, repeats=3, max_entries=24, step=STEP, log=None):
    """Run every case; modules and the composite probe a random subset of
    entries per tensor. Returns a list of :class:`CaseResult`."""
    rng = np.random.default_rng(seed + 1)
    results = []
    start = time.perf_counter()
    for name, fn, tensors in build_cases(seed, repeats):
        err, count = check_gradient(fn, tensors, step, max_entries, rng)
        results.append(CaseResult(name, err, count))
        if log:
            log(f"{name:32s} rel_err={err:.3e} entries={count}")
    if log:
        log(f"{len(results)} cases in {time.perf_counter() - start:.1f}s")
    return results
