"""Finite-difference gradient checks for every building block, run on small
double-precision instances."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .losses import LossWeights, total_loss
from .nn import AGGConv, AGSC, BatchNorm, ContextualAttention, DeGConv, GConv, VConv
from .rng import SplitMix64
from .tensor import Tensor

F64 = np.float64


def _projected(out_fn, shape, rng):
    proj = Tensor(rng.normal(size=shape))
    return lambda: T.sum_all(T.mul(out_fn(), proj))


def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check(fn, module=None, **inputs):
    tensors = dict(module.named_parameters()) if module is not None else {}
    tensors.update(inputs)
    errs = T.gradcheck(fn, tensors)
    return max(errs.values())


def block_gradchecks(k=3, r=4, slope=0.2, seed=0):
    """Returns {block name: max relative error} on (2, c<=4, 8x8) inputs."""
    rng = np.random.default_rng(seed)
    init = SplitMix64(seed)
    out = {}

    x = _leaf(rng, 2, 3, 8, 8)
    vconv = VConv(init.spawn("vconv"), 3, 4, k, 2, slope, F64)
    out["VConv"] = _check(_projected(lambda: vconv(x), (2, 4, 4, 4), rng), vconv, x=x)

    gconv = GConv(init.spawn("gconv"), 3, 4, k, 1, slope, F64)
    out["GConv"] = _check(_projected(lambda: gconv(x), (2, 4, 8, 8), rng), gconv, x=x)

    x4 = _leaf(rng, 2, 4, 4, 4)
    degconv = DeGConv(init.spawn("degconv"), 4, 2, k, 2, slope, F64)
    out["DeGConv"] = _check(_projected(lambda: degconv(x4), (2, 2, 8, 8), rng), degconv, x=x4)

    ca = ContextualAttention(init.spawn("ca"), 16, r, F64)
    out["CA"] = _check(_projected(lambda: ca(x4), (2, 4, 4, 4), rng), ca, x=x4)

    f_d, f_c = _leaf(rng, 2, 3, 8, 8), _leaf(rng, 2, 4, 4, 4)
    agg = AGGConv(init.spawn("agg"), 3, 4, (4, 4), k, r, slope, F64)
    out["AG-GConv"] = _check(_projected(lambda: agg(f_d, f_c), (2, 4, 4, 4), rng), agg,
                             f_d=f_d, f_c=f_c)

    r_d = _leaf(rng, 2, 4, 4, 4)
    agsc = AGSC(init.spawn("agsc"), 4, k, slope, F64)
    out["AG-SC"] = _check(_projected(lambda: agsc(f_c, r_d), (2, 4, 4, 4), rng), agsc,
                          f_c=f_c, r_d=r_d)

    bn = BatchNorm(4, F64)
    bn.gamma.data[...] = rng.uniform(0.5, 1.5, 4)
    bn.beta.data[...] = rng.normal(size=4)
    xb = _leaf(rng, 2, 4, 8, 8)
    out["BatchNorm"] = _check(_projected(lambda: bn(xb), (2, 4, 8, 8), rng), bn, x=xb)

    pred = _leaf(rng, 2, 1, 8, 8)
    gt = rng.normal(size=(2, 1, 8, 8))
    weights = LossWeights(0.7, 0.3, 1.0)
    out["loss"] = _check(lambda: total_loss(pred, gt, weights), pred=pred)
    return out
