"""L-infinity attacks: FGSM, FGSM with random start, PGD, corner snap.

All attacks return perturbations (not perturbed inputs) and keep every
iterate inside both the eps-ball around x and the [0,1] pixel box. Feasibility
is re-checked on every result; a violation is a bug, not a warning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eg

BALL_TOL = 1e-12


class AttackError(Exception):
    """Invalid attack arguments or an infeasible perturbation."""


@dataclass
class AttackResult:
    delta: np.ndarray          # same shape as x
    loss: np.ndarray           # per-example cross-entropy at x + delta
    misclassified: np.ndarray  # per-example bool; True if ANY tested delta fooled
    info: dict = field(default_factory=dict)

    def validate(self, x: np.ndarray, eps: float) -> "AttackResult":
        worst = np.abs(self.delta).max(initial=0.0)
        if worst > eps + BALL_TOL:
            raise AttackError(f"|delta|_inf = {worst!r} exceeds eps = {eps!r}")
        adv = x + self.delta
        if adv.min(initial=0.0) < -BALL_TOL or adv.max(initial=1.0) > 1.0 + BALL_TOL:
            raise AttackError("perturbed input left the [0,1] box")
        return self


def _check_eps(eps: float) -> float:
    eps = float(eps)
    if not (eps >= 0.0 and np.isfinite(eps)):
        raise AttackError(f"eps must be finite and >= 0, got {eps}")
    return eps


def input_gradient(model, params, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d/dx of the summed per-example cross-entropy (rows stay independent)."""
    with eg.Graph():
        xt = eg.Tensor(x, requires_grad=True)
        total = eg.tsum(model.loss_per_example(params, xt, y))
        return eg.backward(total, [xt])[xt].data


def _project(delta: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    delta = np.clip(delta, -eps, eps)
    return np.clip(x + delta, 0.0, 1.0) - x


def _loss_and_hits(model, params, x, delta, y):
    with eg.no_grad():
        loss = model.loss_per_example(params, x + delta, y).data
        pred = model.predict(params, x + delta)
    return loss, pred != np.asarray(y)


def fgsm(model, params, x, y, eps: float, alpha: float | None = None) -> AttackResult:
    """delta = alpha * sign(grad_x loss), projected to the ball and box.

    sign(0) = 0, so dead coordinates stay untouched.
    """
    eps = _check_eps(eps)
    x = np.asarray(x, dtype=np.float64)
    alpha = eps if alpha is None else float(alpha)
    g = input_gradient(model, params, x, y)
    delta = _project(alpha * np.sign(g), x, eps)
    loss, hits = _loss_and_hits(model, params, x, delta, y)
    return AttackResult(delta, loss, hits, {"attack": "fgsm", "eps": eps,
                                            "alpha": alpha}).validate(x, eps)


def fgsm_rs(model, params, x, y, eps: float, alpha: float | None = None,
            seed: int = 0) -> AttackResult:
    """FGSM from a uniform random start inside the ball.

    eta ~ U([-eps, eps]^d); delta = project(eta + alpha * sign(grad at x+eta)).
    alpha must lie in [0, 2*eps].
    """
    eps = _check_eps(eps)
    x = np.asarray(x, dtype=np.float64)
    alpha = 1.25 * eps if alpha is None else float(alpha)
    if not (0.0 <= alpha <= 2.0 * eps + BALL_TOL):
        raise AttackError(f"fgsm_rs step alpha = {alpha} outside [0, 2*eps]")
    rng = np.random.default_rng(seed)
    eta = rng.uniform(-eps, eps, size=x.shape)
    g = input_gradient(model, params, x + eta, y)
    delta = _project(eta + alpha * np.sign(g), x, eps)
    loss, hits = _loss_and_hits(model, params, x, delta, y)
    return AttackResult(delta, loss, hits, {"attack": "fgsm_rs", "eps": eps,
                                            "alpha": alpha, "seed": seed}).validate(x, eps)


def pgd(model, params, x, y, eps: float, steps: int = 10, alpha: float | None = None,
        restarts: int = 1, init: str = "uniform", zero_first_restart: bool = True,
        seed: int = 0) -> AttackResult:
    """Projected gradient descent on the cross-entropy, keeping per example
    the restart whose final loss is largest.

    ``misclassified`` aggregates over restarts: True if any fooled the model.
    With zero_first_restart the first restart starts at delta = 0 (so a
    single-restart call is deterministic regardless of seed).
    """
    eps = _check_eps(eps)
    if steps < 1 or restarts < 1:
        raise AttackError("steps and restarts must be >= 1")
    if init not in ("zero", "uniform"):
        raise AttackError(f"unknown init {init!r}")
    x = np.asarray(x, dtype=np.float64)
    alpha = 2.0 * eps / steps if alpha is None else float(alpha)

    best_loss = np.full(len(x), -np.inf)
    best_delta = np.zeros_like(x)
    fooled = np.zeros(len(x), dtype=bool)
    for r in range(restarts):
        if init == "zero" or (r == 0 and zero_first_restart):
            delta = np.zeros_like(x)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
            delta = _project(rng.uniform(-eps, eps, size=x.shape), x, eps)
        for _ in range(steps):
            g = input_gradient(model, params, x + delta, y)
            delta = _project(delta + alpha * np.sign(g), x, eps)
        loss, hits = _loss_and_hits(model, params, x, delta, y)
        fooled |= hits
        better = loss > best_loss
        best_loss = np.where(better, loss, best_loss)
        best_delta = np.where(better.reshape((-1,) + (1,) * (x.ndim - 1)),
                              delta, best_delta)
    return AttackResult(best_delta, best_loss, fooled,
                        {"attack": "pgd", "eps": eps, "alpha": alpha,
                         "steps": steps, "restarts": restarts, "init": init,
                         "seed": seed}).validate(x, eps)


def pgd_eval(model, params, x, y, eps: float, seed: int = 0) -> AttackResult:
    """The reporting attack: PGD, 50 steps, 10 restarts, alpha = eps/4,
    uniform random starts except the first restart at zero."""
    return pgd(model, params, x, y, eps, steps=50, alpha=eps / 4.0,
               restarts=10, init="uniform", zero_first_restart=True, seed=seed)


def corner_snap(delta: np.ndarray, eps: float) -> np.ndarray:
    """Push a perturbation to the nearest ball corner: eps * sign(delta),
    with zero coordinates sent to +eps so the result is a true corner."""
    eps = _check_eps(eps)
    return np.where(delta >= 0.0, eps, -eps)


def pgd_corner(model, params, x, y, eps: float, base: AttackResult | None = None,
               **pgd_kwargs) -> AttackResult:
    """Diagnostic: snap a PGD perturbation to the ball corner, then box-project.

    A solution that survives snapping shows the attack did not depend on
    interior coordinates.
    """
    x = np.asarray(x, dtype=np.float64)
    if base is None:
        base = pgd(model, params, x, y, eps, **pgd_kwargs)
    delta = _project(corner_snap(base.delta, eps), x, eps)
    loss, hits = _loss_and_hits(model, params, x, delta, y)
    return AttackResult(delta, loss, hits, {"attack": "pgd_corner", "eps": eps,
                                            "base": base.info}).validate(x, eps)


def evaluate_robustness(model, params, x, y, eps: float, attack: str = "pgd_eval",
                        seed: int = 0, chunk: int = 128, **kwargs) -> dict:
    """Clean and adversarial accuracy; an example counts as robust only if no
    tested perturbation (across restarts) flips it."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    fns = {"fgsm": fgsm, "fgsm_rs": fgsm_rs, "pgd": pgd, "pgd_eval": pgd_eval}
    if attack not in fns:
        raise AttackError(f"unknown attack {attack!r}; pick from {sorted(fns)}")
    clean_hits = adv_hits = 0
    for start in range(0, len(x), chunk):
        xb, yb = x[start:start + chunk], y[start:start + chunk]
        if attack == "fgsm":
            res = fns[attack](model, params, xb, yb, eps, **kwargs)
        else:
            res = fns[attack](model, params, xb, yb, eps, seed=seed + start, **kwargs)
        pred = model.predict(params, xb)
        clean_ok = pred == yb
        clean_hits += int(clean_ok.sum())
        adv_hits += int((clean_ok & ~res.misclassified).sum())
    n = len(x)
    return {"n": n, "eps": eps, "attack": attack,
            "clean_acc": clean_hits / n, "adv_acc": adv_hits / n}
