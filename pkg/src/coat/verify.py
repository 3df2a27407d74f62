"""Finite-difference verification of the engine and the second-order
penalties.

Central differences are the oracle: for a scalar functional f and direction
v, (f(x+hv) - f(x-hv)) / 2h is compared against <grad f, v>. Inputs are
drawn away from ReLU/clamp kinks so the oracle is valid at step h.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eg


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_fd(fval, arrays, direction, h: float):
    plus = [a + h * d for a, d in zip(arrays, direction)]
    minus = [a - h * d for a, d in zip(arrays, direction)]
    return (fval(plus) - fval(minus)) / (2.0 * h)


def _unit(rng, shape):
    v = rng.standard_normal(shape)
    return v / max(np.linalg.norm(v), 1e-12)


def _away_from(x, cut: float, margin: float):
    """Push entries of x that sit within ``margin`` of ``cut`` away from it."""
    x = np.array(x)
    near = np.abs(x - cut) < margin
    x[near] = cut + margin * np.where(x[near] >= cut, 2.0, -2.0)
    return x


@dataclass
class VerifyReport:
    kind: str
    tol: float
    rows: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r["ok"] for r in self.rows)

    @property
    def max_err(self) -> float:
        return max((r["rel_err"] for r in self.rows), default=0.0)

    def summary(self) -> str:
        n_bad = sum(not r["ok"] for r in self.rows)
        word = "pass" if self.ok else f"FAIL ({n_bad} cases)"
        return (f"{self.kind}: {word}, {len(self.rows)} checks, "
                f"max rel err {self.max_err:.3e} (tol {self.tol:g})")


def _scalarize(t, wseed):
    # fixed reduction weights per case: the finite-difference evaluations
    # must probe the exact same scalar function as the analytic gradient
    w = eg.Tensor(np.random.default_rng(wseed).standard_normal(t.shape))
    return eg.tsum(eg.mul(t, w))


def _first_order_case(kind: str, rng):
    """Returns (arrays, build) with build(list of tensors) -> scalar tensor."""
    wseed = int(rng.integers(2 ** 32))
    if kind in ("add", "sub", "mul", "div"):
        shapes_b = [(3, 4), (1, 4), (3, 1), (4,)]
        shape_a, shape_b = (3, 4), shapes_b[int(rng.integers(0, len(shapes_b)))]
        a = rng.standard_normal(shape_a)
        b = rng.standard_normal(shape_b)
        if kind == "div":
            b = _away_from(b, 0.0, 0.3)
        op = getattr(eg, kind)
        return [a, b], lambda ts: _scalarize(op(ts[0], ts[1]), wseed)
    if kind == "matmul":
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        return [a, b], lambda ts: _scalarize(eg.matmul(ts[0], ts[1]), wseed)
    if kind == "matmul_batched":
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        return [a, b], lambda ts: _scalarize(eg.matmul(ts[0], ts[1]), wseed)
    if kind == "conv2d":
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((2, 3, 3, 3)) * 0.5
        b = rng.standard_normal(2) * 0.1
        return [x, w, b], lambda ts: _scalarize(
            eg.conv2d(ts[0], ts[1], ts[2], stride=stride, padding=padding), wseed)
    if kind == "relu":
        x = _away_from(rng.standard_normal((4, 5)), 0.0, 0.05)
        return [x], lambda ts: _scalarize(eg.relu(ts[0]), wseed)
    if kind == "sign":
        x = _away_from(rng.standard_normal((3, 3)), 0.0, 0.05)
        return [x], lambda ts: _scalarize(eg.sign(ts[0]), wseed)
    if kind == "clamp":
        x = _away_from(_away_from(rng.standard_normal((4, 4)), -0.5, 0.05), 0.5, 0.05)
        return [x], lambda ts: _scalarize(eg.clamp(ts[0], -0.5, 0.5), wseed)
    if kind == "reshape":
        x = rng.standard_normal((2, 3, 4))
        return [x], lambda ts: _scalarize(eg.reshape(ts[0], (3, 8)), wseed)
    if kind == "sum":
        x = rng.standard_normal((3, 4, 2))
        ax = [None, 0, (1, 2), -1][int(rng.integers(0, 4))]
        keep = bool(rng.integers(0, 2))
        return [x], lambda ts: _scalarize(eg.tsum(ts[0], axis=ax, keepdims=keep), wseed)
    if kind == "mean":
        x = rng.standard_normal((3, 4))
        ax = [None, 0, 1][int(rng.integers(0, 3))]
        return [x], lambda ts: _scalarize(eg.mean(ts[0], axis=ax), wseed)
    if kind == "softmax_ce":
        z = rng.standard_normal((4, 6)) * 2.0
        y = rng.integers(0, 6, size=4)
        return [z], lambda ts: _scalarize(eg.softmax_cross_entropy(ts[0], y), wseed)
    if kind == "exp":
        x = rng.standard_normal((3, 4))
        return [x], lambda ts: _scalarize(eg.texp(ts[0]), wseed)
    if kind == "sqrt":
        x = rng.random((3, 4)) + 0.1
        return [x], lambda ts: _scalarize(eg.sqrt(ts[0]), wseed)
    if kind == "square":
        x = rng.standard_normal((3, 4))
        return [x], lambda ts: _scalarize(eg.square(ts[0]), wseed)
    if kind == "l2_norm":
        x = rng.standard_normal((3, 8)) + 0.5
        ax = [None, 1][int(rng.integers(0, 2))]
        return [x], lambda ts: _scalarize(eg.l2_norm(ts[0], axis=ax), wseed)
    if kind == "dot":
        a, b = rng.standard_normal(6), rng.standard_normal(6)
        return [a, b], lambda ts: eg.dot(ts[0], ts[1])
    if kind == "cosine":
        a = rng.standard_normal((3, 6)) + 0.3
        b = rng.standard_normal((3, 6)) + 0.3
        return [a, b], lambda ts: _scalarize(
            eg.cosine_similarity(ts[0], ts[1], axis=1), wseed)
    if kind == "unfold_fold":
        x = rng.standard_normal((2, 2, 6, 6))
        stride = int(rng.integers(1, 3))

        def build(ts):
            cols = eg.unfold(ts[0], 3, stride=stride, padding=1)
            back = eg.fold(cols, (2, 6, 6), 3, stride=stride, padding=1)
            return _scalarize(back, wseed)

        return [x], build
    if kind == "broadcast_to":
        x = rng.standard_normal((3, 1))
        return [x], lambda ts: _scalarize(eg.broadcast_to(ts[0], (3, 5)), wseed)
    raise ValueError(f"unknown case kind {kind!r}")


FIRST_ORDER_OPS = (
    "add", "sub", "mul", "div", "matmul", "matmul_batched", "conv2d", "relu",
    "sign", "clamp", "reshape", "sum", "mean", "softmax_ce", "exp", "sqrt",
    "square", "l2_norm", "dot", "cosine", "unfold_fold", "broadcast_to",
)


def check_first_order(n_cases: int = 100, seed: int = 0, h: float = 1e-5,
                      tol: float = 1e-4, n_dirs: int = 2) -> VerifyReport:
    """Every supported op, randomized shapes, grads vs central differences."""
    rng = np.random.default_rng(seed)
    report = VerifyReport(kind="first-order", tol=tol)
    for case in range(n_cases):
        kind = FIRST_ORDER_OPS[case % len(FIRST_ORDER_OPS)]
        arrays, build = _first_order_case(kind, rng)

        with eg.Graph():
            ts = [eg.Tensor(a, requires_grad=True) for a in arrays]
            out = build(ts)
            grads = eg.backward(out, ts)
        gvals = [grads[t].data for t in ts]

        def fval(arrs):
            with eg.no_grad():
                return float(build([eg.Tensor(a) for a in arrs]).data)

        worst = 0.0
        for _ in range(n_dirs):
            vs = [_unit(rng, a.shape) for a in arrays]
            num = directional_fd(fval, arrays, vs, h)
            ana = sum(float(np.sum(g * v)) for g, v in zip(gvals, vs))
            worst = max(worst, rel_err(ana, num))
        report.rows.append({"case": case, "op": kind, "rel_err": worst,
                            "ok": worst <= tol})
    return report


PENALTY_KINDS = ("gradalign", "gradnorm", "cure")


def check_second_order(n_cases: int = 100, seed: int = 0, h: float = 1e-5,
                       tol: float = 1e-3, kink_margin: float = 1e-3) -> VerifyReport:
    """GradAlign / gradient-norm / CURE parameter gradients vs central
    differences on small random CNNs.

    The perturbation (eta or the FGSM direction) is held fixed across the
    difference evaluations, matching each penalty's definition. Cases are
    redrawn until every ReLU preactivation sits at least ``kink_margin`` from
    zero at all evaluation points.
    """
    from . import models as md
    from . import training as tr

    rng = np.random.default_rng(seed)
    report = VerifyReport(kind="second-order", tol=tol)
    case = 0
    while case < n_cases:
        kind = PENALTY_KINDS[case % len(PENALTY_KINDS)]
        side = int(rng.integers(5, 8))
        model = md.SingleLayerCNN(in_channels=1, side=side,
                                  filters=int(rng.integers(1, 4)),
                                  num_classes=int(rng.integers(2, 4)))
        params = model.init_params(seed=int(rng.integers(1 << 30)))
        bsz = int(rng.integers(1, 3))
        x = rng.random((bsz, 1, side, side))
        y = rng.integers(0, model.num_classes, size=bsz)
        eps = 0.1

        if kind == "gradalign":
            eta = rng.uniform(-eps, eps, x.shape)
            pen = lambda p: tr.grad_align_penalty(model, p, x, y, eps, eta=eta)
            probe_points = [x, x + eta]
        elif kind == "gradnorm":
            pen = lambda p: tr.grad_norm_penalty(model, p, x, y)
            probe_points = [x]
        else:
            delta = tr.fgsm_direction(model, params, x, y, eps)
            pen = lambda p: tr.cure_penalty(model, p, x, y, eps, delta=delta)
            probe_points = [x, x + delta]

        margin = min(model.preactivation_margin(params, xx) for xx in probe_points)
        if margin < kink_margin:
            # too close to a ReLU kink for the FD oracle; redraw
            rng = np.random.default_rng(rng.integers(1 << 30))
            continue

        with eg.Graph(eg.HIGHER_ORDER):
            grads = eg.grad_of_grad(pen(params), params)

        names = list(params.names())

        def fval(vecs):
            shifted = params.with_arrays({n: v for n, v in zip(names, vecs)})
            with eg.Graph():
                return float(pen(shifted).data)

        arrays = [params[n].data for n in names]
        worst = 0.0
        for _ in range(2):
            vs = [_unit(rng, a.shape) for a in arrays]
            num = directional_fd(fval, arrays, vs, h)
            ana = sum(float(np.sum(grads[n].data * v)) for n, v in zip(names, vs))
            worst = max(worst, rel_err(ana, num))
        report.rows.append({"case": case, "op": kind, "rel_err": worst,
                            "ok": worst <= tol})
        case += 1
    return report
