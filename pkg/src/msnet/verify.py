"""Self-check suite behind ``msnet verify``: gradient checks for every
differentiable primitive, and metric oracles.

``run_checks(sabotage="conv2d")`` swaps in a copy of an op whose backward
is scaled by 2, so the suite can prove it notices a broken rule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from .engine import Tensor, fd_check, make_node, mul, total
from .evaluation import avg_symmetric_distance, dice_coefficient, largest_component, paired_t_test
from .losses import dice_loss, kt_loss, l2_penalty, labels_to_onehot
from .model import ParamGroup
from .normalization import BnState, DsbnState, bn_forward_train, dsbn_forward
from .oracles import brute_asd, brute_dice, brute_largest_component, random_mask

GRAD_TOL = 1e-3
FD_STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    kind: str = "grad"

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} {self.kind:<7} value={self.value:.3e}  tol={self.tolerance:.0e}"


def sabotaged(op: Callable) -> Callable:
    """Same forward as ``op``; every gradient flowing back through it is doubled."""

    def wrapped(*args, **kwargs):
        out = op(*args, **kwargs)
        return make_node(out.data, (out,), lambda g: (2.0 * g,), "sabotaged")

    return wrapped


def _ops(sabotage: str | None) -> dict[str, Callable]:
    ops = {
        "conv2d": E.conv2d, "transposed_conv2d": E.transposed_conv2d, "maxpool2d": E.maxpool2d,
        "relu": E.relu, "add": E.add, "softmax_channel": E.softmax_channel,
        "bn_forward_train": bn_forward_train, "dsbn_forward": dsbn_forward,
        "dice_loss": dice_loss, "kt_loss": kt_loss, "l2_penalty": l2_penalty,
    }
    if sabotage is not None:
        if sabotage not in ops:
            raise KeyError(f"unknown op {sabotage!r}; choose from {', '.join(ops)}")
        ops[sabotage] = sabotaged(ops[sabotage])
    return ops


def gradient_checks(rng: np.random.Generator, sabotage: str | None = None) -> list[tuple[str, float]]:
    """(case name, max relative error) for every differentiable primitive."""
    op = _ops(sabotage)
    out = []

    def weighted(shape):
        r = Tensor(rng.normal(size=shape))
        return lambda t: total(mul(t, r))

    x = rng.normal(size=(2, 3, 8, 8))
    b4 = rng.normal(size=4)
    for stride, pad, k in ((1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 0, 1)):
        w = rng.normal(size=(4, 3, k, k))
        ho = (8 + 2 * pad - k) // stride + 1
        f = weighted((2, 4, ho, ho))
        out.append((f"conv2d k{k} s{stride} p{pad}",
                    fd_check(lambda x, w, b: f(op["conv2d"](x, w, b, stride, pad)), [x, w, b4], FD_STEP)))

    wt = rng.normal(size=(3, 4, 3, 3))
    f = weighted((2, 4, 16, 16))
    out.append(("transposed_conv2d s2",
                fd_check(lambda x, w, b: f(op["transposed_conv2d"](x, w, b, 2)), [x, wt, b4], FD_STEP)))

    # distinct values spaced far beyond the step so no window has a near-tie
    distinct = (rng.permutation(2 * 3 * 7 * 7).reshape(2, 3, 7, 7) * 0.1)
    f = weighted((2, 3, 4, 4))
    out.append(("maxpool2d 3/2/1", fd_check(lambda x: f(op["maxpool2d"](x, 3, 2, 1)), distinct, FD_STEP)))

    away = np.sign(rng.normal(size=(2, 3, 5, 5))) * (0.05 + np.abs(rng.normal(size=(2, 3, 5, 5))))
    f = weighted((2, 3, 5, 5))
    out.append(("relu", fd_check(lambda x: f(op["relu"](x)), away, FD_STEP)))

    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    f = weighted((2, 3, 4, 4))
    out.append(("add", fd_check(lambda a, b: f(op["add"](a, b)), [a, b], FD_STEP)))

    f = weighted((2, 3, 4, 4))
    out.append(("softmax_channel", fd_check(lambda a: f(op["softmax_channel"](a)), a, FD_STEP)))

    xb = rng.normal(size=(4, 3, 3, 3)) * 2.0 + 1.0
    g0, be0 = rng.uniform(0.5, 1.5, 3), rng.normal(size=3)
    f = weighted((4, 3, 3, 3))

    def bn(x, g, be):
        st = BnState.create(3)
        st.gamma, st.beta = g, be
        return f(op["bn_forward_train"](x, st))

    out.append(("bn_forward_train", fd_check(bn, [xb, g0, be0], FD_STEP)))

    def dsbn(x, g, be):
        st = DsbnState.create(3, 3)
        st.per_site[2].gamma, st.per_site[2].beta = g, be
        return f(op["dsbn_forward"](x, 2, st, "train"))

    out.append(("dsbn_forward site 2", fd_check(dsbn, [xb, g0, be0], FD_STEP)))

    logits = rng.normal(size=(2, 2, 6, 6))
    target = labels_to_onehot(rng.integers(0, 2, size=(2, 6, 6)), 2)
    out.append(("dice_loss", fd_check(lambda z: op["dice_loss"](E.softmax_channel(z), target), logits, FD_STEP)))
    out.append(("kt_loss", fd_check(lambda z: op["kt_loss"](E.softmax_channel(z), target), logits, FD_STEP)))

    def l2(w1, w2):
        return op["l2_penalty"]([ParamGroup({"a.w": w1, "a.b": Tensor(np.ones(2))}), ParamGroup({"b.w": w2})])

    out.append(("l2_penalty", fd_check(l2, [rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(3, 2, 1, 1))], FD_STEP)))
    return out


def adjointness_residual(rng: np.random.Generator) -> float:
    """|<conv(x, K), y> - <x, tconv(y, K)>| for stride 2, padding 1, zero bias."""
    x, y, k = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 4, 4, 4)), rng.normal(size=(4, 3, 3, 3))
    lhs = float((E.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(4)), 2, 1).data * y).sum())
    rhs = float((x * E.transposed_conv2d(Tensor(y), Tensor(k), Tensor(np.zeros(3)), 2).data).sum())
    return abs(lhs - rhs)


def metric_oracle_mismatches(rng: np.random.Generator, pairs: int = 500, size: int = 16) -> dict[str, int]:
    """Count disagreements between fast metrics and their brute-force oracles."""
    bad = {"dice": 0, "asd": 0, "largest_component": 0, "idempotent_subset": 0}
    for _ in range(pairs):
        a, b = random_mask(rng, size), random_mask(rng, size)
        if dice_coefficient(a, b) != brute_dice(a, b):
            bad["dice"] += 1
        if a.any() and b.any() and avg_symmetric_distance(a, b) != brute_asd(a, b):
            bad["asd"] += 1
        lc = largest_component(a)
        if not np.array_equal(lc, brute_largest_component(a)):
            bad["largest_component"] += 1
        if not np.array_equal(largest_component(lc), lc) or (lc & ~a.astype(bool)).any():
            bad["idempotent_subset"] += 1
    return bad


def run_checks(seed: int = 0, sabotage: str | None = None, pairs: int = 500) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [CheckResult(name, err, GRAD_TOL, bool(err < GRAD_TOL)) for name, err in gradient_checks(rng, sabotage)]
    res = adjointness_residual(rng)
    results.append(CheckResult("conv/tconv adjointness", res, 1e-9, bool(res < 1e-9), "oracle"))
    for name, count in metric_oracle_mismatches(rng, pairs).items():
        results.append(CheckResult(f"{name} ({pairs} masks)", float(count), 0.0, count == 0, "oracle"))
    t, p = paired_t_test(np.arange(1.0, 6.0), np.zeros(5))
    results.append(CheckResult("paired_t_test d=1..5", abs(t - 4.242640687119285), 1e-9,
                               bool(abs(t - 4.242640687119285) < 1e-9 and abs(p - 0.0132) < 5e-5), "oracle"))
    return results


def main_report(seed: int = 0, sabotage: str | None = None, stream=None) -> bool:
    start = time.perf_counter()
    results = run_checks(seed, sabotage)
    for r in results:
        print(r.line(), file=stream)
    ok = all(r.passed for r in results)
    print(f"{'all checks passed' if ok else 'FAILURES'}: {sum(r.passed for r in results)}/{len(results)} "
          f"in {time.perf_counter() - start:.1f}s", file=stream)
    return ok
