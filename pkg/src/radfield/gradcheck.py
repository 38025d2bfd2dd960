"""Central finite-difference verification of tape gradients.

Every differentiable op (and the end-to-end one-ray head loss) is checked
in float64 against (f(x+h) - f(x-h)) / 2h with h = 1e-4.  Inputs are drawn
away from kinks (relu/abs at 0, clamp bounds, grid cell faces) so the
two-sided difference stays inside one smooth piece.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-4
REL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    cases: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a-n| / max(|a|, |n|, 1e-6)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_gradient(fn: Callable[[Sequence[np.ndarray]], float],
                arrays: list[np.ndarray], index: int,
                h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function w.r.t. arrays[index]."""
    base = arrays[index]
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(arrays)
        flat[i] = orig - h
        fm = fn(arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_op(name: str, build_inputs: Callable[[np.random.Generator], list[np.ndarray]],
             loss_fn: Callable[[list[ad.Tensor]], ad.Tensor],
             rng: np.random.Generator, cases: int = 100) -> CheckResult:
    """Compare tape gradients of loss_fn against central differences.

    build_inputs returns float64 arrays; loss_fn maps the wrapped tensors
    to a scalar tape output.
    """
    worst = 0.0
    for _ in range(cases):
        arrays = [a.astype(np.float64) for a in build_inputs(rng)]
        tensors = [ad.Tensor(a.copy(), requires_grad=True, dtype=np.float64)
                   for a in arrays]
        loss = loss_fn(tensors)
        loss.backward()

        def scalar(arrs: list[np.ndarray]) -> float:
            ts = [ad.Tensor(a, dtype=np.float64) for a in arrs]
            return float(loss_fn(ts).data)

        for i, t in enumerate(tensors):
            analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
            numeric = fd_gradient(scalar, [a.copy() for a in arrays], i)
            worst = max(worst, relative_error(analytic, numeric))
    return CheckResult(name=name, cases=cases, max_rel_error=worst)


def check_params(forward: Callable[[], ad.Tensor], params: dict[str, ad.Tensor],
                 names: Sequence[str], rng: np.random.Generator,
                 h: float = 1e-6, probes: int = 5) -> dict[str, CheckResult]:
    """FD-verify named parameter tensors of a model against one backward pass.

    Probes a few entries per tensor (preferring ones with non-negligible
    gradient). A probe straddling a relu/clamp kink would corrupt the central
    difference, so probes whose second difference is large relative to the
    first are discarded: on a smooth piece |f(x+h)+f(x-h)-2f(x)| is O(h^2)
    while a kink contributes O(h).
    """
    ad.zero_grads(params)
    forward().backward()
    with ad.no_grad():
        mid = float(forward().data)
    out = {}
    for name in names:
        p = params[name]
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        gmax = np.abs(gflat).max()
        cand = np.flatnonzero(np.abs(gflat) > 1e-3 * gmax) if gmax > 0 \
            else np.arange(flat.size)
        picks = rng.choice(cand, size=min(probes, len(cand)), replace=False)
        worst, used = 0.0, 0
        for i in picks:
            keep = flat[i]
            flat[i] = keep + h
            with ad.no_grad():
                up = float(forward().data)
            flat[i] = keep - h
            with ad.no_grad():
                dn = float(forward().data)
            flat[i] = keep
            first = up - dn
            second = up + dn - 2.0 * mid
            if abs(second) > 0.05 * max(abs(first), 1e-12):
                continue
            worst = max(worst, relative_error(gflat[i], first / (2.0 * h)))
            used += 1
        out[name] = CheckResult(name=name, cases=used, max_rel_error=worst)
    return out


def away_from(rng: np.random.Generator, shape, kinks=(0.0,),
              margin: float = 0.05, scale: float = 1.0) -> np.ndarray:
    """Uniform values in [-scale, scale] kept `margin` away from each kink."""
    x = rng.uniform(-scale, scale, size=shape)
    for k in kinks:
        close = np.abs(x - k) < margin
        x = np.where(close, x + np.sign(x - k + 1e-12) * 2 * margin, x)
    return x


def _proj(shape) -> np.ndarray:
    """Fixed projection weights: keep vector-valued losses scalar without RNG."""
    n = int(np.prod(shape))
    return (np.cos(np.arange(n) * 0.7) + 0.25).reshape(shape)


def standard_op_checks(rng: np.random.Generator, cases: int = 100) -> list[CheckResult]:
    """The op-level gradcheck suite (one entry per differentiable op)."""
    results = []

    def run(name, build, loss):
        results.append(check_op(name, build, loss, rng, cases=cases))

    n = 5

    run("add", lambda r: [r.normal(size=(n,)), r.normal(size=(n,))],
        lambda t: ad.tsum(ad.add(t[0], t[1]) * ad.Tensor(_proj((n,)), dtype=np.float64)))
    run("sub", lambda r: [r.normal(size=(n,)), r.normal(size=(n,))],
        lambda t: ad.tsum(ad.sub(t[0], t[1]) * ad.Tensor(_proj((n,)), dtype=np.float64)))
    run("mul", lambda r: [r.normal(size=(n,)), r.normal(size=(n,))],
        lambda t: ad.tsum(ad.mul(t[0], t[1])))
    run("div", lambda r: [r.normal(size=(n,)), away_from(r, (n,), margin=0.3, scale=2.0)],
        lambda t: ad.tsum(ad.div(t[0], t[1])))
    run("neg", lambda r: [r.normal(size=(n,))],
        lambda t: ad.tsum(ad.neg(t[0]) * ad.Tensor(_proj((n,)), dtype=np.float64)))
    run("exp", lambda r: [r.uniform(-2, 2, size=(n,))],
        lambda t: ad.tsum(ad.exp(t[0])))
    # smooth region and clamped region are checked separately: summing
    # e^15-scale outputs with small-gradient elements would drown the
    # finite-difference signal in float cancellation noise
    run("truncated_exp", lambda r: [r.uniform(-3, 3, size=(n,))],
        lambda t: ad.tsum(ad.truncated_exp(t[0])))
    run("truncated_exp_clamp", lambda r: [np.sign(r.normal(size=(n,))) * r.uniform(16, 30, size=(n,))],
        lambda t: ad.tsum(ad.truncated_exp(t[0])))
    run("log", lambda r: [r.uniform(0.2, 3.0, size=(n,))],
        lambda t: ad.tsum(ad.log(t[0])))
    run("sigmoid", lambda r: [r.normal(size=(n,)) * 2],
        lambda t: ad.tsum(ad.sigmoid(t[0])))
    run("relu", lambda r: [away_from(r, (n,), margin=0.05)],
        lambda t: ad.tsum(ad.relu(t[0])))
    run("leaky_relu", lambda r: [away_from(r, (n,), margin=0.05)],
        lambda t: ad.tsum(ad.leaky_relu(t[0])))
    run("abs", lambda r: [away_from(r, (n,), margin=0.05)],
        lambda t: ad.tsum(ad.absolute(t[0])))
    run("clip", lambda r: [away_from(r, (n,), kinks=(-0.5, 0.5), margin=0.05, scale=1.0)],
        lambda t: ad.tsum(ad.clip(t[0], -0.5, 0.5) * ad.Tensor(_proj((n,)), dtype=np.float64)))
    run("matmul", lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))],
        lambda t: ad.tsum(ad.matmul(t[0], t[1])))
    run("concat", lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))],
        lambda t: ad.tsum(ad.concat([t[0], t[1]], axis=1)
                          * ad.Tensor(_proj((2, 5)), dtype=np.float64)))
    run("reshape", lambda r: [r.normal(size=(2, 6))],
        lambda t: ad.tsum(ad.reshape(t[0], (3, 4))
                          * ad.Tensor(_proj((3, 4)), dtype=np.float64)))
    run("sum_axis", lambda r: [r.normal(size=(3, 4))],
        lambda t: ad.tsum(ad.tsum(t[0], axis=1) * ad.Tensor(_proj((3,)), dtype=np.float64)))
    run("mean", lambda r: [r.normal(size=(3, 4))],
        lambda t: ad.tmean(t[0]))
    run("cumsum", lambda r: [r.normal(size=(2, 4))],
        lambda t: ad.tsum(ad.cumsum(t[0], axis=1)
                          * ad.Tensor(_proj((2, 4)), dtype=np.float64)))
    run("take_rows", lambda r: [r.normal(size=(4, 3))],
        lambda t: ad.tsum(ad.take_rows(t[0], np.array([0, 2, 2, 1]))
                          * ad.Tensor(_proj((4, 3)), dtype=np.float64)))
    run("put_rows", lambda r: [r.normal(size=(3, 2))],
        lambda t: ad.tsum(ad.put_rows(t[0], np.array([4, 0, 2]), 6)
                          * ad.Tensor(_proj((6, 2)), dtype=np.float64)))
    run("slice", lambda r: [r.normal(size=(4, 5))],
        lambda t: ad.tsum(t[0][1:3, ::2] * ad.Tensor(_proj((2, 3)), dtype=np.float64)))
    run("conv1d", lambda r: [r.normal(size=(2, 8, 3)), r.normal(size=(3, 3, 4)),
                             r.normal(size=(4,))],
        lambda t: ad.tsum(ad.conv1d(t[0], t[1], t[2], stride=2, padding=1)
                          * ad.Tensor(_proj((2, 4, 4)), dtype=np.float64)))
    run("window_mean2d", lambda r: [r.normal(size=(9, 10))],
        lambda t: ad.tsum(ad.window_mean2d(t[0], 7)
                          * ad.Tensor(_proj((3, 4)), dtype=np.float64)))
    run("softmax", lambda r: [r.normal(size=(2, 6))],
        lambda t: ad.tsum(ad.softmax_lastaxis(t[0])
                          * ad.Tensor(_proj((2, 6)), dtype=np.float64)))
    return results
