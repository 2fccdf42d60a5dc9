"""Self-verification battery behind ``ccm verify``.

Each check pits the production path against an independent, deliberately
naive oracle (finite differences, nested loops, a plain Python list).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .nets import MLPSpec, init_bundle
from .queue import KnowledgeQueue


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def tiny_problem(seed: int, in_dim: int = 3, hidden: int = 4, d: int = 4, num_classes: int = 3,
                 n: int = 4, m: int = 5):
    """A seeded bundle, batch and queue small enough for finite differences."""
    rng = np.random.default_rng(seed)
    bundle = init_bundle(MLPSpec((in_dim, hidden, d)), num_classes, seed)
    X = rng.standard_normal((n, in_dim))
    y = rng.integers(0, num_classes, size=n)
    zq = rng.standard_normal((m, d))
    yq = rng.integers(0, num_classes, size=m)
    yq[0] = y[0]  # at least one positive pair for the contrastive term
    return bundle, X, y, zq, yq


def loss_fn(kind: str, bundle, X, y, zq, yq, tau: float = 0.07):
    """Closure over all trainable parameters returning one CCM loss."""

    def fn(*_params):
        Z = bundle.F(Tensor(X))
        t_teach = losses.l_teach(bundle.C(Z), y)
        if kind == "teach":
            return t_teach
        px = losses.p_x(Z, tau, training=True)
        pzx = losses.p_z_given_x(zq, Z, tau)
        pyzx = losses.p_y_given_zx(bundle.H, bundle.G, zq, Z)
        t_learn, _ = losses.l_learn(losses.front_door_batch(px, pzx, pyzx), y)
        if kind == "learn":
            return t_learn
        t_cs = losses.l_cs(Z, zq, yq, y, tau)
        if kind == "cs":
            return t_cs
        return losses.l_all((t_teach, t_learn, t_cs)).total

    return fn


def check_gradients(cases: int = 100, tol: float = 1e-5, seed0: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    kinds = ("teach", "learn", "cs", "all")
    worst = {k: 0.0 for k in kinds}
    for c in range(cases):
        kind = kinds[c % len(kinds)]
        bundle, X, y, zq, yq = tiny_problem(seed0 + c)
        params = bundle.parameters()
        err = ad.grad_check(loss_fn(kind, bundle, X, y, zq, yq), params)
        worst[kind] = max(worst[kind], err)
    ok = all(v < tol for v in worst.values())
    detail = " ".join(f"{k}={v:.2e}" for k, v in worst.items())
    return CheckResult("gradients", ok, f"{cases} cases, max rel err {detail}", time.perf_counter() - t0)


def front_door_loops(px, pzx, pyzx) -> np.ndarray:
    n, m = pzx.shape
    c = pyzx.shape[2]
    out = np.zeros((n, c))
    for j in range(n):
        for yc in range(c):
            acc = 0.0
            for i in range(m):
                inner = 0.0
                for jp in range(n):
                    inner += px[jp] * pyzx[i, jp, yc]
                acc += pzx[j, i] * inner
            out[j, yc] = acc
    return out


def random_factors(rng: np.random.Generator, m: int, n: int, c: int):
    def dist(shape):
        a = rng.random(shape) + 1e-3
        return a / a.sum(axis=-1, keepdims=True)

    return dist(n), dist((n, m)), dist((m, n, c))


def check_front_door(seeds: int = 50, tol: float = 1e-12) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        for m in range(1, 9):
            for n in range(1, 9):
                c = int(rng.integers(1, 6))
                px, pzx, pyzx = random_factors(rng, m, n, c)
                ref = front_door_loops(px, pzx, pyzx)
                with ad.no_grad():
                    vec = losses.front_door_batch(Tensor(px), Tensor(pzx), Tensor(pyzx)).data
                f = losses.FrontDoorFactors(px, pzx, pyzx)
                single = np.stack([losses.front_door(f, j) for j in range(n)])
                worst = max(worst, np.abs(vec - ref).max(), np.abs(single - ref).max())
    return CheckResult("front_door_oracle", bool(worst <= tol), f"max |vec - loops| = {worst:.2e}",
                       time.perf_counter() - t0)


def check_queue(schedules: int = 200) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(12345)
    failures = 0
    for _ in range(schedules):
        B, k, d = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        q = KnowledgeQueue(4 * B * k, d)
        ref_f, ref_y = [], []
        for _ in range(int(rng.integers(1, 30))):
            b = int(rng.integers(1, q.capacity + 1))
            f = rng.standard_normal((b, d))
            y = rng.integers(0, 10, size=b)
            q.push_batch(f, y)
            ref_f = (ref_f + list(f))[-q.capacity:]
            ref_y = (ref_y + list(y))[-q.capacity:]
        z, yy = q.snapshot()
        if not (np.array_equal(z, np.array(ref_f)) and np.array_equal(yy, np.array(ref_y))):
            failures += 1
    return CheckResult("queue_fifo", failures == 0, f"{schedules} schedules, {failures} mismatches",
                       time.perf_counter() - t0)


def check_normalization(cases: int = 200, tol: float = 1e-9) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(777)
    worst = 0.0
    with ad.no_grad():
        for c in range(cases):
            n, m, d = int(rng.integers(1, 9)), int(rng.integers(1, 9)), 2 * int(rng.integers(1, 5))
            k = int(rng.integers(2, 6))
            bundle = init_bundle(MLPSpec((3, d)), k, c)
            f = rng.standard_normal((n, d)) * rng.uniform(0.01, 10)
            zq = rng.standard_normal((m, d))
            px = losses.p_x(f, 0.07, training=True).data
            pzx = losses.p_z_given_x(zq, f, 0.07).data
            pyzx = losses.p_y_given_zx(bundle.H, bundle.G, zq, f).data
            fd = losses.front_door_batch(Tensor(px), Tensor(pzx), Tensor(pyzx)).data
            for arr in (px[None], pzx, pyzx, fd):
                worst = max(worst, np.abs(arr.sum(axis=-1) - 1).max())
                if arr.min() < 0:
                    worst = np.inf
    return CheckResult("normalization", bool(worst <= tol), f"max |sum - 1| = {worst:.2e}",
                       time.perf_counter() - t0)


def run_all() -> list[CheckResult]:
    return [check_gradients(), check_front_door(), check_queue(), check_normalization()]
