"""Self-contained property checks run by ``mlla-unet selftest``.

Every check compares an implementation against an independent route
(scalar loops, finite differences, brute force, closed forms) and returns
its worst error next to the threshold it must meet.
"""

from __future__ import annotations

import itertools
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import ops
from .attention import (attention_flops, linear_attention_global, linear_attention_recurrent, loglog_slope,
                        softmax_attention)
from .blocks import MllaBlock
from .gradcheck import check_params, condition_for_gradcheck, finite_difference_check
from .losses import LossConfig, cross_entropy, dice_loss, total_loss
from .metrics import boundary, dsc, hd95
from .network import build_model, count_flops, traced_macs
from .posenc import CPE, LePE, rope
from .rng import generator
from .stf import read_stf, write_stf
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check(name: str, value: float, limit: float, fmt: str = ".2e") -> CheckResult:
    return CheckResult(name, bool(value <= limit), f"{value:{fmt}} (limit {limit:{fmt}})")


def _loop_conv(x, w, b, stride, pad, groups):
    n, cin, h, wd = x.shape
    cout, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    per = cout // groups
    for bi, o, i, j in itertools.product(range(n), range(cout), range(ho), range(wo)):
        g = o // per
        patch = xp[bi, g * cg:(g + 1) * cg, i * stride:i * stride + k, j * stride:j * stride + k]
        out[bi, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def _probe(rng, shape) -> np.ndarray:
    # scalarizing weights kept away from zero so no gradient entry drops below
    # the roundoff of the difference quotient
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(0.5, 1.5, shape)


def check_op_gradients(rng) -> CheckResult:
    cases = []
    x = Tensor(rng.standard_normal((2, 3, 4)))
    pos = Tensor(rng.uniform(0.5, 2.0, (2, 3, 4)))
    probe = _probe(rng, (2, 3, 4))
    for fn in (ops.exp, ops.gelu, ops.silu, ops.elu_plus_one, lambda t: ops.softmax(t, -1),
               lambda t: ops.log_softmax(t, 1), lambda t: ops.mul(t, t), lambda t: ops.div(1.0, ops.add(ops.mul(t, t), 1.0))):
        cases.append((lambda t, fn=fn: ops.sum(ops.mul(fn(t), probe)), x))
    cases.append((lambda t: ops.sum(ops.mul(ops.log(t), probe)), pos))
    g, bta = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
    cases.append((lambda t: ops.sum(ops.mul(ops.layer_norm(t, g, bta), probe)), x))
    w = Tensor(rng.standard_normal((4, 5)))
    mprobe = _probe(rng, (2, 3, 5))
    cases.append((lambda t: ops.sum(ops.mul(ops.matmul(t, w), mprobe)), x))
    ang = rng.uniform(0, 6, (3, 2))
    cases.append((lambda t: ops.sum(ops.mul(ops.rotate_pairs(t, np.cos(ang), np.sin(ang)), probe)), x))
    img = Tensor(rng.standard_normal((1, 4, 6, 6)))
    for spec, wshape in ((ops.ConvSpec(3, 1, 1), (3, 4, 3, 3)), (ops.ConvSpec(3, 2, 1, 4), (4, 1, 3, 3)),
                         (ops.ConvSpec(1), (2, 4, 1, 1))):
        kw = Tensor(rng.standard_normal(wshape))
        out_probe = _probe(rng, ops.conv2d(img, kw, None, spec).shape)
        cases.append((lambda t, kw=kw, spec=spec, p=out_probe: ops.sum(ops.mul(ops.conv2d(t, kw, None, spec), p)), img))
    tw = Tensor(rng.standard_normal((4, 1, 3, 3)))
    tprobe = _probe(rng, (1, 4, 12, 12))
    cases.append((lambda t: ops.sum(ops.mul(ops.transposed_conv2d(t, tw), tprobe)), img))
    worst = 0.0
    for f, inp in cases:
        worst = max(worst, finite_difference_check(f, Tensor(inp.data.copy())))
    return _check(f"op gradients vs central differences ({len(cases)} ops, f64)", worst, 1e-4)


def check_conv_oracle(rng) -> CheckResult:
    worst = 0.0
    for stride, pad, groups, cin, cout in ((1, 1, 1, 3, 2), (2, 1, 1, 2, 4), (1, 1, 4, 4, 4), (2, 0, 2, 4, 2)):
        x = rng.standard_normal((2, cin, 7, 6))
        w = rng.standard_normal((cout, cin // groups, 3, 3))
        b = rng.standard_normal(cout)
        got = ops.conv2d(x, w, b, ops.ConvSpec(3, stride, pad, groups)).data
        worst = max(worst, float(np.abs(got - _loop_conv(x, w, b, stride, pad, groups)).max()))
    return _check("conv2d vs nested-loop oracle", worst, 1e-12)


def check_transposed_adjoint(rng) -> CheckResult:
    x = rng.standard_normal((1, 3, 5, 4))
    y = rng.standard_normal((1, 3, 10, 8))
    w = rng.standard_normal((3, 1, 3, 3))
    spec = ops.ConvSpec(3, 2, 1, 3)
    lhs = float((ops.transposed_conv2d(x, w, None, spec).data * y).sum())
    rhs = float((x * ops.conv2d(y, w, None, spec).data).sum())
    return _check("transposed conv is the adjoint of strided conv", abs(lhs - rhs) / abs(rhs), 1e-12)


def check_attention_forms(rng) -> CheckResult:
    worst = 0.0
    for n in (1, 7, 64, 200):
        q, k = (np.exp(rng.standard_normal((n, 8)) * 0.5) for _ in range(2))
        v = rng.standard_normal((n, 5))
        glob = linear_attention_global(q, k, v).data
        rec = linear_attention_recurrent(q, k, v)
        worst = max(worst, float(np.abs(rec[-1] - glob[-1]).max() / np.abs(glob[-1]).max()))
        loops = np.zeros((n, 5))
        for i in range(n):
            num = sum((q[i] @ k[j]) * v[j] for j in range(n))
            den = sum(q[i] @ k[j] for j in range(n)) + 1e-6
            loops[i] = num / den
        worst = max(worst, float(np.abs(glob - loops).max() / np.abs(loops).max()))
    return _check("linear attention: global == recurrent (final) == double loop", worst, 1e-10)


def check_softmax_attention(rng) -> CheckResult:
    q, k, v = rng.standard_normal((6, 4)), rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    got = softmax_attention(q, k, v).data
    want = np.zeros((6, 3))
    for i in range(6):
        w = np.array([math.exp(q[i] @ k[j] / 2.0) for j in range(6)])
        want[i] = (w / w.sum()) @ v
    return _check("softmax attention vs row-by-row loop", float(np.abs(got - want).max()), 1e-12)


def check_block_gradient(rng) -> CheckResult:
    blk = MllaBlock(8, 2, rng).to("f64")
    for p in blk.parameters():
        p.data = rng.standard_normal(p.shape) * 0.3
    probe = _probe(rng, (1, 16, 8))
    err = finite_difference_check(lambda t: ops.sum(ops.mul(blk(t, 4, 4), probe)),
                                  Tensor(rng.standard_normal((1, 16, 8))))
    return _check("one block (mixer + MLP) gradient vs central differences", err, 1e-4)


def check_losses(rng) -> CheckResult:
    logits = rng.standard_normal((2, 3, 5, 4))
    labels = rng.integers(0, 3, (2, 5, 4))
    ce = 0.0
    inter = np.zeros(3)
    pp = np.zeros(3)
    yy = np.zeros(3)
    for b, r, c in itertools.product(range(2), range(5), range(4)):
        z = logits[b, :, r, c]
        prob = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        ce -= math.log(prob[labels[b, r, c]]) / 40
        y = np.eye(3)[labels[b, r, c]]
        inter += prob * y
        pp += prob * prob
        yy += y
    dice = 1 - np.mean((2 * inter + 1) / (pp + yy + 1))
    err = max(abs(float(cross_entropy(logits, labels).data) - ce), abs(float(dice_loss(logits, labels).data) - dice))
    return _check("cross-entropy and Dice loss vs per-pixel loops", err, 1e-12)


def check_flop_slopes() -> CheckResult:
    ns = [1024, 2048, 4096, 8192, 16384]
    lin = loglog_slope(ns, [attention_flops("linear", n, 64, 64) for n in ns])[0]
    sm = loglog_slope(ns, [attention_flops("softmax", n, 64, 64) for n in ns])[0]
    return _check("counted-FLOP slopes (linear 1, softmax 2)", max(abs(lin - 1), abs(sm - 2)), 0.01, ".4f")


def check_rope(rng) -> CheckResult:
    q, k = rng.standard_normal((1, 16)), rng.standard_normal((1, 16))
    worst = 0.0
    for m, n in itertools.product(range(6), repeat=2):
        a = float(rope(q, [m]).data[0] @ rope(k, [n]).data[0])
        b = float(rope(q, [m - n]).data[0] @ k[0])
        worst = max(worst, abs(a - b))
    x = rng.standard_normal((5, 32))
    worst = max(worst, float(np.abs(np.linalg.norm(rope(x, [0, 3, 9, 27, 81]).data, axis=1)
                                    - np.linalg.norm(x, axis=1)).max()))
    return _check("rotary encoding: relative phase and norm preservation", worst, 1e-9)


def check_identities(rng) -> CheckResult:
    worst = 0.0
    z0 = rng.standard_normal((1, 16, 8))
    z = Tensor(z0)
    for _ in range(3):
        blk = MllaBlock(8, 2, rng).to("f64")
        blk.zero_(lambda name: not name.startswith("norm"))
        z = blk(z, 4, 4)
    worst = max(worst, float(np.abs(z.data - z0).max()))
    lepe = LePE(8, rng).to("f64").zero_(lambda n: n.startswith("conv"))
    cpe = CPE(8, rng).to("f64").zero_()
    worst = max(worst, float(np.abs(lepe(Tensor(z0), 4, 4).data - z0).max()),
                float(np.abs(cpe(Tensor(z0), 4, 4).data - z0).max()))
    logits = Tensor(rng.standard_normal((3, 5, 5)))
    labels = rng.integers(0, 3, (5, 5))
    worst = max(worst, abs(float(total_loss(logits, labels, LossConfig(1, 0)).data - cross_entropy(logits, labels).data)),
                abs(float(total_loss(logits, labels, LossConfig(0, 1)).data - dice_loss(logits, labels).data)))
    return _check("identity degeneracies (block stack, LePE, CPE, loss projections)", worst, 0.0)


def check_metrics(rng) -> CheckResult:
    worst = 0.0
    for _ in range(20):
        p = rng.random((16, 16)) < 0.3
        g = rng.random((16, 16)) < 0.3
        x = set(zip(*np.nonzero(p)))
        y = set(zip(*np.nonzero(g)))
        worst = max(worst, abs(dsc(p.astype(int), g.astype(int), 1) - 2 * len(x & y) / (len(x) + len(y))))
        bp = np.argwhere(boundary(p)).astype(float)
        bg = np.argwhere(boundary(g)).astype(float)
        dist = np.sqrt(((bp[:, None] - bg[None]) ** 2).sum(-1))
        pooled = np.sort(np.concatenate([dist.min(1), dist.min(0)]))
        want = pooled[max(1, math.ceil(95 * pooled.size / 100)) - 1]
        worst = max(worst, abs(hd95(p.astype(int), g.astype(int), 1) - want))
    a = np.zeros((8, 8), int)
    b = np.zeros((8, 8), int)
    a[1, 1] = b[4, 5] = 1
    worst = max(worst, abs(hd95(a, b, 1) - 5.0))
    return _check("DSC / HD95 vs all-pairs brute force", worst, 1e-9)


def check_stf(rng) -> CheckResult:
    bad = 0
    with tempfile.TemporaryDirectory() as tmp:
        for arr in (rng.standard_normal((3, 4, 5)).astype(np.float32), rng.standard_normal((2, 7)),
                    rng.integers(0, 65536, (6, 6)).astype(np.uint16), np.zeros((0, 3), np.float32)):
            path = Path(tmp) / "t.stf"
            write_stf(path, arr)
            back = read_stf(path)
            bad += int(back.dtype != arr.dtype or back.shape != arr.shape or back.tobytes() != arr.tobytes())
    return _check("STF round trip (f32, f64, u16, empty)", bad, 0, "d")


def check_end_to_end_gradient(rng) -> CheckResult:
    model = condition_for_gradcheck(build_model("toy", 1), rng)
    image = Tensor(rng.standard_normal((1, 1, 32, 32)))
    labels = rng.integers(0, 3, (1, 32, 32))
    params = model.parameters()
    picks = rng.choice(len(params), size=8, replace=False)
    samples = [(int(i), tuple(int(rng.integers(s)) for s in params[i].shape)) for i in picks]
    err = check_params(lambda: total_loss(model(image), labels), params, samples=samples)
    return _check("toy model total-loss gradient spot checks", err, 1e-3)


def check_flop_tracer() -> CheckResult:
    model = build_model("toy", 0)
    diff = abs(traced_macs(model) - count_flops(model, matmul_only=True).macs)
    return _check("analytic multiply-add counter == runtime tracer (toy)", diff, 0, "d")


CHECKS: List[Callable] = [
    check_op_gradients, check_conv_oracle, check_transposed_adjoint, check_attention_forms, check_softmax_attention,
    check_flop_slopes, check_rope, check_block_gradient, check_losses, check_identities, check_metrics, check_stf,
    check_end_to_end_gradient, check_flop_tracer,
]


def run(seed: int = 0, report: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
    results = []
    for i, fn in enumerate(CHECKS):
        rng = generator(seed + i)
        try:
            res = fn(rng) if fn.__code__.co_argcount else fn()
        except Exception as exc:  # a crash is a failed check, reported with its cause
            res = CheckResult(fn.__name__, False, f"raised {type(exc).__name__}: {exc}")
        results.append(res)
        if report:
            report(res)
    return results
