"""Finite-difference verification of every differentiable kernel and of the
full desk-scale model.

All checks run in float64: central differences are unreliable in float32.
Relative error is max|analytic - numeric| / (max|numeric| + 1e-12).
"""
from __future__ import annotations

import numpy as np

from . import tensor as tc
from .head import head_forward
from .model import (ModelConfig, bind_params, dt_forward, forward_from_inputs,
                    init_params, tiny_preset)
from .training import l1_tonemapped_loss, synth_dataset
from .hdrmath import build_input

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
FD_STEP = 1e-4


def rel_error(analytic, numeric):
    # denominator floored so exactly-cancelling gradients (e.g. an attention
    # key bias, which softmax normalizes away) compare at FD noise level
    denom = max(float(np.abs(numeric).max()), 1e-3)
    return float(np.abs(analytic - numeric).max() / denom)


def check_function(build, arrays, h=FD_STEP):
    """Max FD relative error of a scalar tensor function over its inputs.

    ``build`` maps len(arrays) tensors to a scalar Tensor.
    """
    worst = 0.0
    for i in range(len(arrays)):
        tape = tc.Tape()
        leaves = [tape.leaf(a) for a in arrays]
        loss = build(*leaves)
        grad = tc.backward(loss).get(leaves[i])
        if grad is None:
            grad = np.zeros_like(arrays[i])

        def f(x, i=i):
            t2 = tc.Tape()
            ls = [t2.leaf(x if j == i else arrays[j])
                  for j in range(len(arrays))]
            return float(build(*ls).data)

        numeric = tc.finite_difference_grad(f, arrays[i], h)
        worst = max(worst, rel_error(grad, numeric))
    return worst


def _weighted(rng, shape):
    c = tc.constant(rng.normal(size=shape))
    return lambda y: tc.sum_(tc.mul(y, c))


def _op_checks(rng):
    """One (build, arrays) case per kernel, freshly randomized."""
    x = rng.normal(size=(1, 6, 6, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    # fractional parts bounded away from integers: bilinear sampling has
    # derivative kinks at grid points that central differences straddle
    off = (rng.integers(-1, 2, size=(1, 6, 6, 18)).astype(float)
           + rng.uniform(0.3, 0.7, size=(1, 6, 6, 18)))
    xx = rng.normal(size=(4, 5))
    checks = {}

    s = _weighted(rng, (1, 6, 6, 3))
    checks["conv2d"] = (lambda x, w, b: s(tc.conv2d(x, w, b, dilation=2)),
                        [x, w, b])
    s2 = _weighted(rng, (1, 6, 6, 3))
    checks["deformable_conv2d"] = (
        lambda x, w, b, o: s2(tc.deformable_conv2d(x, w, b, o)),
        [x, w, b, off])
    s3 = _weighted(rng, (4, 5))
    checks["layer_norm"] = (
        lambda x, g, bt: s3(tc.layer_norm(x, g, bt)),
        [xx, rng.normal(size=5), rng.normal(size=5)])
    checks["softmax"] = (lambda x: s3(tc.softmax(x)), [xx])
    s4 = _weighted(rng, (4, 3))
    checks["linear"] = (lambda x, w, b: s4(tc.linear(x, w, b)),
                        [xx, rng.normal(size=(5, 3)), rng.normal(size=3)])
    s5 = _weighted(rng, (2, 3, 3))
    checks["matmul"] = (lambda a, b2: s5(tc.matmul(a, b2)),
                        [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 3))])
    checks["sigmoid"] = (lambda x: tc.sum_(tc.sigmoid(x)), [xx])
    checks["leaky_relu"] = (lambda x: tc.sum_(tc.leaky_relu(x)), [xx])
    checks["log"] = (
        lambda x: tc.sum_(tc.log(tc.add_scalar(tc.sigmoid(x), 0.5))), [xx])
    checks["add_mul"] = (
        lambda a, b2: tc.sum_(tc.mul(tc.add(a, b2), b2)), [xx, rng.normal(size=(4, 5))])
    s6 = _weighted(rng, (1, 2))
    checks["global_avg_pool"] = (lambda x: s6(tc.global_avg_pool(x)), [x])
    s7 = _weighted(rng, (1, 10, 9, 2))
    checks["pad_reflect"] = (
        lambda x: s7(tc.pad2d(x, (2, 2, 1, 2), mode="reflect")), [x])
    s8 = _weighted(rng, (2, 6, 6, 2))
    checks["concat_narrow"] = (
        lambda a, b2: s8(tc.concat([tc.narrow(a, 0, 0, 1), b2], axis=0)),
        [rng.normal(size=(2, 6, 6, 2)), rng.normal(size=(1, 6, 6, 2))])
    target = rng.uniform(0, 1, size=(2, 4, 4, 3))
    checks["loss"] = (
        lambda x: l1_tonemapped_loss(tc.sigmoid(x), target),
        [rng.normal(size=(2, 4, 4, 3))])
    return checks


def check_op(name, seeds=20):
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        checks = _op_checks(rng)
        if name not in checks:
            raise KeyError(f"unknown op {name!r}; choices: {sorted(checks)}")
        build, arrays = checks[name]
        worst = max(worst, check_function(build, arrays))
    return worst


def op_names():
    return sorted(_op_checks(np.random.default_rng(0)))


def _frac_offsets(params, rng):
    # nudge offset predictors off the integer-coordinate bilinear kink,
    # where one-sided derivatives disagree with central differences
    for k in params:
        if k.endswith(".off.b"):
            params[k] = rng.uniform(0.1, 0.4, size=params[k].shape)
    return params


def _random_like(params, rng, scale=0.4):
    # O(1)-scale draws keep activations clear of the leaky_relu corner,
    # which central differences cannot straddle
    out = {k: rng.normal(0.0, scale, size=v.shape) for k, v in params.items()}
    return _frac_offsets(out, rng)


def check_dt_block(seed=0):
    """FD check of one full dual-transformer block (all its parameters)."""
    cfg = tiny_preset(dtype="f64")
    rng = np.random.default_rng(seed)
    params = _random_like(init_params(cfg, seed), rng)
    pre = "group0.dt0"
    block = {k: v for k, v in params.items() if k.startswith(pre)}
    x = rng.normal(size=(1, 8, 8, cfg.embed_dim))
    wsum = tc.constant(rng.normal(size=x.shape))

    names = sorted(block)

    def build(*leaves):
        p = dict(zip(names, leaves))
        return tc.sum_(tc.mul(dt_forward(tc.constant(x), p, pre, cfg, shift=2),
                              wsum))

    return check_function(build, [block[n] for n in names])


def check_head(seed=0):
    cfg = tiny_preset(dtype="f64")
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    head = {k: v for k, v in params.items() if k.startswith("head.")}
    ins = [tc.constant(rng.uniform(0, 1, size=(1, 6, 6, 6))) for _ in range(3)]
    wsum = tc.constant(rng.normal(size=(1, 6, 6, 4 * cfg.channels)))
    names = sorted(head)

    def build(*leaves):
        p = dict(zip(names, leaves))
        return tc.sum_(tc.mul(head_forward(ins, p, cfg), wsum))

    return check_function(build, [head[n] for n in names])


def check_full_model(seed=0, n_params=200, h=FD_STEP, size=16, cfg=None):
    """End-to-end loss gradient vs finite differences on the tiny preset
    (or a caller-supplied f64 config), subsampling random parameter entries."""
    if cfg is None:
        cfg = tiny_preset(dtype="f64")
    if cfg.dtype != "f64":
        raise ValueError("gradient checks require an f64 config")
    rng = np.random.default_rng(seed)
    params = _frac_offsets(init_params(cfg, seed), rng)
    sample = synth_dataset(1, seed=seed, size=size)[0]
    inputs = build_input(sample)
    gt = sample.ground_truth.pixels[None, ...]

    def loss_value(p):
        tape = tc.Tape()
        leaves = bind_params(p, tape)
        out = forward_from_inputs(inputs, leaves, cfg)
        return l1_tonemapped_loss(out, gt), leaves

    loss, leaves = loss_value(params)
    grads = tc.backward(loss)
    analytic = {k: grads.get(leaf, np.zeros_like(params[k]))
                for k, leaf in leaves.items()}

    names = sorted(params)
    entries = []
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        entries.append((name, int(rng.integers(params[name].size))))

    worst = 0.0
    a_vec, n_vec = [], []
    for name, flat in entries:
        arr = params[name].reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + h
        fp = float(loss_value(params)[0].data)
        arr[flat] = orig - h
        fm = float(loss_value(params)[0].data)
        arr[flat] = orig
        n_vec.append((fp - fm) / (2 * h))
        a_vec.append(analytic[name].reshape(-1)[flat])
    return rel_error(np.asarray(a_vec), np.asarray(n_vec))


def run_suite(ops="all", seeds=20, seed=0):
    """Returns {name: (max_rel_err, tolerance)} for the requested checks."""
    results = {}
    targets = op_names() if ops == "all" else [ops]
    for name in targets:
        results[name] = (check_op(name, seeds=seeds), OP_TOLERANCE)
    if ops == "all":
        results["head"] = (check_head(seed), OP_TOLERANCE)
        results["dt_block"] = (check_dt_block(seed), OP_TOLERANCE)
        results["full_model"] = (check_full_model(seed), MODEL_TOLERANCE)
    return results
