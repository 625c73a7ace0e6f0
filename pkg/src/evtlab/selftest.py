"""Quick built-in checks: finite-difference gradients and closed-form metric oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import context as cx
from . import evalkit as ek
from . import policy as pl
from . import tracksim as ts
from .numgrad import Tensor, check_gradients, lstm_cell, ops

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _project(out: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ops.sum(ops.mul(out, Tensor(w)))


def _unary(op, lo=-1.0, hi=1.0):
    def case(rng):
        a = _leaf(rng, 3, 4, lo=lo, hi=hi)
        return (lambda: _project(op(a), 1)), [a]
    return case


def _binary(op):
    def case(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        b.data += np.where(np.abs(a.data - b.data) < 0.05, 0.2, 0.0)
        return (lambda: _project(op(a, b), 2)), [a, b]
    return case


def _relu_case(rng):
    a = Tensor(rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)), requires_grad=True)
    return (lambda: _project(ops.relu(a), 3)), [a]


def _matmul_case(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return (lambda: _project(ops.matmul(a, b), 4)), [a, b]


def _conv_case(rng):
    x, w, b = _leaf(rng, 2, 2, 7, 6), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    return (lambda: _project(ops.conv2d(x, w, b, stride=2), 5)), [x, w, b]


def _conv1_case(rng):
    x, w = _leaf(rng, 1, 1, 5, 5), _leaf(rng, 2, 1, 2, 2)
    return (lambda: _project(ops.conv2d(x, w, None, stride=1), 7)), [x, w]


def _clip_case(rng):
    a = Tensor(np.array([-3.0, -1.5, 0.3, 2.5, 4.0]) + rng.uniform(-0.1, 0.1, 5), requires_grad=True)
    return (lambda: _project(ops.clip(a, -2.0, 3.0), 8)), [a]


def _squared_error_case(rng):
    a = _leaf(rng, 3, 2)
    target = rng.normal(size=(3, 2))
    return (lambda: ops.squared_error(a, target)), [a]


def _pair(op):
    def case(rng):
        a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
        return (lambda: _project(op([a, b]), 9)), [a, b]
    return case


def _lstm_case(rng):
    params = [Tensor(rng.normal(scale=0.5, size=s), requires_grad=True) for s in ((2, 12), (3, 12), (12,))]
    xs = [_leaf(rng, 2, 2) for _ in range(5)]
    h0 = _leaf(rng, 2, 3)

    def fn():
        h, c = h0, Tensor(np.zeros((2, 3)))
        for x in xs:
            h, c = lstm_cell(x, h, c, *params)
        return _project(ops.concat([h, c], axis=1), 6)
    return fn, params + xs + [h0]


GRADIENT_CASES: dict[str, Callable] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "minimum": _binary(ops.minimum),
    "cosine_similarity": _binary(ops.cosine_similarity),
    "matmul": _matmul_case,
    "conv2d": _conv_case,
    "tanh": _unary(ops.tanh, -2, 2),
    "sigmoid": _unary(ops.sigmoid, -3, 3),
    "relu": _relu_case,
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, 0.5, 2.0),
    "softplus": _unary(ops.softplus, -4, 4),
    "logsumexp": _unary(lambda a: ops.logsumexp(a, axis=1), -3, 3),
    "l2_norm": _unary(ops.l2_norm),
    "mean": _unary(lambda a: ops.mean(a, axis=0)),
    "neg": _unary(ops.neg),
    "square": _unary(ops.square),
    "clip": _clip_case,
    "sum": _unary(lambda a: ops.sum(a, axis=1)),
    "squared_error": _squared_error_case,
    "reshape_expand": _unary(lambda a: ops.expand(ops.reshape(a, (12,)), 3)),
    "getitem": _unary(lambda a: a[1:3, ::2]),
    "transpose": _unary(lambda a: ops.transpose(a, (1, 0))),
    "concat": _pair(lambda ts_: ops.concat(ts_, axis=1)),
    "stack": _pair(lambda ts_: ops.stack(ts_, axis=1)),
    "conv2d_stride1": _conv1_case,
    "lstm_5_steps": _lstm_case,
}


def gradient_checks(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, case in GRADIENT_CASES.items():
        fn, params = case(np.random.default_rng(seed))
        err = max(check_gradients(fn, params).values())
        out.append(CheckResult(f"grad:{name}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    return out


def oracle_checks() -> list[CheckResult]:
    out = []
    pairs = [(2.5, 0.0, 1.0), (5.0, math.pi / 8, 1 / 6), (10.0, 0.0, 0.0)]
    worst = max(abs(ts.reward(r, t) - want) for r, t, want in pairs)
    out.append(CheckResult("oracle:reward", worst < 1e-9, f"max abs err {worst:.1e}"))

    init = ek.BoundingBox(0.5, 0.5, 0.2, 0.4)
    shifted = ek.BoundingBox(0.68, 0.74, 0.2, 0.4)
    err = max(abs(ek.mr_from_boxes([init] * 3, init) - 1.0), abs(ek.box_reward(shifted, init) - 1 / 1.3))
    out.append(CheckResult("oracle:mr", err < 1e-9, f"max abs err {err:.1e}"))

    z = Tensor(np.tile([0.3, -1.0, 2.0], (4, 1)))
    zero = cx.consistency_loss([z], [Tensor(z.data.mean(axis=0))]).item()
    one = cx.consistency_loss([Tensor(np.array([[1.0, 0.0]]))], [Tensor(np.array([0.0, 2.0]))]).item()
    out.append(CheckResult("oracle:consistency", abs(zero) < 1e-12 and abs(one - 1.0) < 1e-12,
                           f"identical {zero:.1e}, orthogonal {one:.6f}"))

    n = 10
    q = Tensor(np.full((n, 5), 3.7))
    term = pl.conservative_term(q, Tensor(np.full(5, 3.7))).item()
    out.append(CheckResult("oracle:cql_log_n", abs(term - math.log(n)) < 1e-9,
                           f"{term:.12f} vs log {n}"))
    return out


def run_all(seed: int = 0) -> list[CheckResult]:
    return gradient_checks(seed) + oracle_checks()
