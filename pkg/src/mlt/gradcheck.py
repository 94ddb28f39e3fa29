"""Finite-difference gradient verification.

The analytic gradients from ``mlt.tensor`` are compared against central
differences computed by re-evaluating the forward function; the two routes
share no code, so agreement is evidence both are right. The relative error
for a coordinate is |analytic - numeric| / max(1, |analytic|).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients
    of the scalar-valued ``f`` at ``x``."""
    return gradcheck_many(lambda ts: f(ts[0]), [x], h=h)


def gradcheck_many(f: Callable[[Sequence[Tensor]], Tensor],
                   tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Gradcheck of ``f`` over several input tensors jointly; f is called
    with the full list and must be deterministic."""
    return max(_per_leaf_errors(f, tensors, h))


def gradcheck_named(f: Callable[[Sequence[Tensor]], Tensor],
                    named: Sequence[tuple[str, Tensor]],
                    h: float = 1e-5) -> dict[str, float]:
    """Per-tensor worst relative error, keyed by the given names."""
    errors = _per_leaf_errors(f, [t for _, t in named], h)
    return {name: err for (name, _), err in zip(named, errors)}


def _per_leaf_errors(f, tensors: Sequence[Tensor], h: float) -> list[float]:
    if h <= 0:
        raise ValueError(f"gradcheck: h must be positive, got {h}")
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in tensors]
    loss = f(leaves)
    T.backward(loss)
    out = []
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(leaves).item()
            flat[i] = orig - h
            down = f(leaves).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
        out.append(worst)
    return out


def with_faulty_backward(op_fn: Callable, factor: float = 1.02) -> Callable:
    """Wrap an op so its forward is untouched but every input gradient is
    scaled by ``factor``. Negative control for the checking machinery."""

    def wrapped(*args, **kwargs):
        out = op_fn(*args, **kwargs)
        if out.op is not None:
            inner = out.op.backward

            def bad(g):
                return tuple(None if gi is None else gi * factor
                             for gi in inner(g))

            out.op.backward = bad
        return out

    return wrapped


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _weighted_sum(out: Tensor, rng) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output
    coordinate influences the loss differently."""
    w = Tensor(rng.standard_normal(out.shape))
    return T.tsum(T.mul(out, w))


def primitive_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    """One named check per differentiable primitive. Each callable returns
    the max relative error of a gradcheck on fresh random inputs."""
    checks: dict[str, Callable[[], float]] = {}

    def register(name, fn):
        checks[name] = fn

    def mk_rng():
        return np.random.default_rng(seed)

    def chk_add():
        rng = mk_rng()
        a, b = _rand(rng, 3, 4), _rand(rng, 4)
        return gradcheck_many(lambda ts: _weighted_sum(T.add(ts[0], ts[1]), mk_rng()), [a, b])

    def chk_sub():
        rng = mk_rng()
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 1)
        return gradcheck_many(lambda ts: _weighted_sum(T.sub(ts[0], ts[1]), mk_rng()), [a, b])

    def chk_mul():
        rng = mk_rng()
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 3, 4)
        return gradcheck_many(lambda ts: _weighted_sum(T.mul(ts[0], ts[1]), mk_rng()), [a, b])

    def chk_div():
        rng = mk_rng()
        a = _rand(rng, 3, 4)
        b = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
        return gradcheck_many(lambda ts: _weighted_sum(T.div(ts[0], ts[1]), mk_rng()), [a, b])

    def chk_scale():
        rng = mk_rng()
        a = _rand(rng, 5)
        return gradcheck(lambda t: _weighted_sum(T.scale(t, -1.7), mk_rng()), a)

    def chk_matmul():
        rng = mk_rng()
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
        return gradcheck_many(lambda ts: _weighted_sum(T.matmul(ts[0], ts[1]), mk_rng()), [a, b])

    def chk_transpose():
        rng = mk_rng()
        a = _rand(rng, 2, 3, 4)
        return gradcheck(lambda t: _weighted_sum(T.transpose_last2(t), mk_rng()), a)

    def chk_swap_axes():
        rng = mk_rng()
        a = _rand(rng, 2, 3, 4)
        return gradcheck(lambda t: _weighted_sum(T.swap_axes(t, -3, -2), mk_rng()), a)

    def chk_reshape():
        rng = mk_rng()
        a = _rand(rng, 3, 4)
        return gradcheck(lambda t: _weighted_sum(T.reshape(t, (2, 6)), mk_rng()), a)

    def chk_concat():
        rng = mk_rng()
        a, b = _rand(rng, 3, 2), _rand(rng, 3, 5)
        return gradcheck_many(
            lambda ts: _weighted_sum(T.concat([ts[0], ts[1]], axis=1), mk_rng()), [a, b])

    def chk_split():
        rng = mk_rng()
        a = _rand(rng, 3, 7)

        def f(t):
            lo, hi = T.split(t, [3, 4], axis=1)
            return T.add(_weighted_sum(lo, mk_rng()), T.scale(_weighted_sum(hi, mk_rng()), 0.5))

        return gradcheck(f, a)

    def chk_gather():
        rng = mk_rng()
        a = _rand(rng, 5, 3)
        idx = np.array([0, 2, 2, 4])
        return gradcheck(lambda t: _weighted_sum(T.gather_rows(t, idx), mk_rng()), a)

    def chk_sum():
        rng = mk_rng()
        a = _rand(rng, 2, 3, 4)
        return gradcheck(lambda t: _weighted_sum(T.tsum(t, axis=1), mk_rng()), a)

    def chk_mean():
        rng = mk_rng()
        a = _rand(rng, 3, 4)
        return gradcheck(lambda t: _weighted_sum(T.tmean(t, axis=-1, keepdims=True), mk_rng()), a)

    def chk_softmax():
        rng = mk_rng()
        a = _rand(rng, 3, 5)
        return gradcheck(lambda t: _weighted_sum(T.softmax_lastdim(t), mk_rng()), a)

    def chk_layer_norm():
        rng = mk_rng()
        x = _rand(rng, 3, 6)
        gamma = Tensor(rng.uniform(0.5, 1.5, 6))
        beta = _rand(rng, 6)
        return gradcheck_many(
            lambda ts: _weighted_sum(T.layer_norm(ts[0], ts[1], ts[2]), mk_rng()),
            [x, gamma, beta])

    def chk_gelu():
        rng = mk_rng()
        a = _rand(rng, 4, 4)
        return gradcheck(lambda t: _weighted_sum(T.gelu(t), mk_rng()), a)

    def chk_sigmoid():
        rng = mk_rng()
        a = Tensor(rng.standard_normal((4, 4)) * 3.0)
        return gradcheck(lambda t: _weighted_sum(T.sigmoid(t), mk_rng()), a)

    def chk_log():
        rng = mk_rng()
        a = Tensor(rng.uniform(0.2, 3.0, (3, 4)))
        return gradcheck(lambda t: _weighted_sum(T.tlog(t), mk_rng()), a)

    def chk_clip():
        rng = mk_rng()
        # keep samples away from the clip corners, where the derivative jumps
        a = Tensor(rng.choice([-2.0, 0.0, 2.0], size=12).reshape(3, 4)
                   + rng.uniform(-0.3, 0.3, (3, 4)))
        return gradcheck(lambda t: _weighted_sum(T.clip(t, -1.0, 1.0), mk_rng()), a)

    def chk_dropout():
        rng = mk_rng()
        a = _rand(rng, 4, 5)

        def f(t):
            out = T.dropout(t, 0.4, training=True, rng=np.random.default_rng(seed + 99))
            return _weighted_sum(out, mk_rng())

        return gradcheck(f, a)

    register("add", chk_add)
    register("sub", chk_sub)
    register("mul", chk_mul)
    register("div", chk_div)
    register("scale", chk_scale)
    register("matmul", chk_matmul)
    register("transpose_last2", chk_transpose)
    register("swap_axes", chk_swap_axes)
    register("reshape", chk_reshape)
    register("concat", chk_concat)
    register("split", chk_split)
    register("gather_rows", chk_gather)
    register("sum", chk_sum)
    register("mean", chk_mean)
    register("softmax_lastdim", chk_softmax)
    register("layer_norm", chk_layer_norm)
    register("gelu", chk_gelu)
    register("sigmoid", chk_sigmoid)
    register("log", chk_log)
    register("clip", chk_clip)
    register("dropout", chk_dropout)
    return checks


def check_all_primitives(seeds: Sequence[int] = range(20)) -> dict[str, float]:
    """Worst gradcheck error per primitive across the given seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, fn in primitive_checks(seed).items():
            err = fn()
            if err > worst.get(name, 0.0):
                worst[name] = err
    return worst


def composite_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    """Gradchecks through the attention and transformer-layer composites."""
    from . import attention as A
    from . import blocks as B

    def mk_rng():
        return np.random.default_rng(seed)

    def chk_attention():
        rng = mk_rng()
        w = A.init_mha(4, 2, rng)
        q, k = _rand(rng, 3, 4), _rand(rng, 5, 4)
        return gradcheck_many(
            lambda ts: _weighted_sum(
                A.multi_head_attention(ts[0], ts[1], ts[1], w), mk_rng()),
            [q, k])

    def chk_encoder_layer():
        rng = mk_rng()
        w = B.init_encoder_layer(4, 2, 8, rng)
        x = _rand(rng, 3, 4)
        return gradcheck(
            lambda t: _weighted_sum(B.encoder_layer(t, w), mk_rng()), x)

    def chk_decoder_layer():
        rng = mk_rng()
        w = B.init_decoder_layer(4, 2, 8, rng)
        tokens, enc = _rand(rng, 2, 4), _rand(rng, 3, 4)
        return gradcheck_many(
            lambda ts: _weighted_sum(B.decoder_layer(ts[0], ts[1], w), mk_rng()),
            [tokens, enc])

    return {"multi_head_attention": chk_attention,
            "encoder_layer": chk_encoder_layer,
            "decoder_layer": chk_decoder_layer}


def full_model_group_errors(model_cfg, loss_cfg, batch: int = 2,
                            seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of the training objective's gradient through
    the whole model, reported as the worst error per optimizer group."""
    from . import losses as L
    from . import model as M

    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((batch, model_cfg.n_x, model_cfg.patch_dim)))
    y = rng.integers(0, 2, (batch, model_cfg.L)).astype(float)
    mask = np.ones_like(y)

    params = M.init_params(model_cfg, np.random.default_rng(seed + 1))
    named = M.named_parameters(params)

    def f(ts):
        rebuilt = M.params_from_tensors(model_cfg, list(ts))
        probs = M.forward(rebuilt, model_cfg, x, training=False)
        total, _ = L.total_loss(y, mask, probs, loss_cfg)
        return total

    per_param = gradcheck_named(f, named, h=h)
    group_of = {}
    for group, members in M.parameter_groups(params).items():
        for name, _ in members:
            group_of[name] = group
    worst = {"backbone": 0.0, "encoder": 0.0, "decoder": 0.0}
    for name, err in per_param.items():
        group = group_of[name]
        if err > worst[group]:
            worst[group] = err
    return worst
