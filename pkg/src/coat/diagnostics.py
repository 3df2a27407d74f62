"""Diagnostics that make single-step-AT failure observable: gradient
alignment, attack-direction cosines, linearization error, filter statistics,
noise amplification, and the collapse-event detector.

Everything here is pure over read-only parameters; sampling is deterministic
in the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attacks
from . import engine as eg

COS_FLOOR = 1e-10


class DiagnosticsError(Exception):
    pass


def derive(seed: int, tag: str) -> int:
    """Stateless sub-seed (same scheme as the trainer's derive_seed)."""
    import hashlib
    text = f"{seed}/{tag}"
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _as_xy(dataset, n_points=None, seed=0):
    """Accept an ImageDataset or an (x, y) pair; optionally subsample."""
    if hasattr(dataset, "images"):
        x, y = dataset.images, dataset.labels
    else:
        x, y = dataset
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
    if n_points is not None and n_points < len(x):
        idx = np.random.default_rng(seed).permutation(len(x))[:n_points]
        idx.sort()
        x, y = x[idx], y[idx]
    return x, y


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stabilized per-row cosine between flattened gradients: zero/zero
    pairs count as aligned, zero/nonzero as orthogonal."""
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    cos = (a * b).sum(axis=1) / np.maximum(na * nb, COS_FLOOR)
    both_zero = (na == 0.0) & (nb == 0.0)
    return np.clip(np.where(both_zero, 1.0, cos), -1.0, 1.0)


@dataclass
class AlignmentEstimate:
    mean: float
    std_err: float
    n_samples: int
    eps: float

    def __post_init__(self):
        if not (-1.0 <= self.mean <= 1.0):
            raise DiagnosticsError(f"mean cosine {self.mean} outside [-1, 1]")
        if self.std_err < 0.0:
            raise DiagnosticsError("negative standard error")


def input_grads(model, params, x, y) -> np.ndarray:
    return attacks.input_gradient(model, params, x, y)


def alignment_cosines(model, params, x, y, eta: np.ndarray) -> np.ndarray:
    """Per-example cos(grad at x, grad at x + eta) for a fixed eta."""
    g0 = input_grads(model, params, x, y)
    g1 = input_grads(model, params, np.asarray(x, dtype=np.float64) + eta, y)
    return _row_cosines(g0, g1)


def gradient_alignment(model, params, dataset, eps: float, n_points: int = 512,
                       n_eta: int = 1, seed: int = 0,
                       chunk: int = 256) -> AlignmentEstimate:
    """Monte-Carlo estimate of E[cos(grad at x, grad at x+eta)] with
    eta ~ U([-eps, eps]^d), n_points examples x n_eta draws each."""
    if n_eta < 1:
        raise DiagnosticsError("n_eta must be >= 1")
    x, y = _as_xy(dataset, n_points, seed=derive(seed, "pts"))
    rng = np.random.default_rng(derive(seed, "eta"))
    samples = []
    for _ in range(n_eta):
        eta = rng.uniform(-eps, eps, size=x.shape)
        for s in range(0, len(x), chunk):
            sl = slice(s, s + chunk)
            samples.append(alignment_cosines(model, params, x[sl], y[sl], eta[sl]))
    cos = np.concatenate(samples)
    se = float(cos.std(ddof=1) / np.sqrt(len(cos))) if len(cos) > 1 else 0.0
    return AlignmentEstimate(float(cos.mean()), se, len(cos), eps)


def attack_direction_cosine(model, params, dataset, eps: float, seed: int = 0,
                            n_points: int = 128, pgd_kwargs: dict | None = None,
                            chunk: int = 128) -> float:
    """Mean cosine between the single-step perturbation and the iterated
    attack's perturbation over an evaluation subsample."""
    x, y = _as_xy(dataset, n_points, seed=derive(seed, "pts"))
    vals = []
    for s in range(0, len(x), chunk):
        xb, yb = x[s:s + chunk], y[s:s + chunk]
        d_fgsm = attacks.fgsm(model, params, xb, yb, eps).delta
        if pgd_kwargs is None:
            d_pgd = attacks.pgd_eval(model, params, xb, yb, eps,
                                     seed=derive(seed, f"pgd{s}")).delta
        else:
            d_pgd = attacks.pgd(model, params, xb, yb, eps,
                                seed=derive(seed, f"pgd{s}"), **pgd_kwargs).delta
        vals.append(_row_cosines(d_fgsm, d_pgd))
    return float(np.concatenate(vals).mean())


def linear_approx_error(model, params, x, y, delta) -> np.ndarray:
    """Per-example |loss(x+delta) - loss(x) - <delta, grad loss(x)>|."""
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    g = input_grads(model, params, x, y)
    with eg.no_grad():
        l0 = model.loss_per_example(params, x, y).data
        l1 = model.loss_per_example(params, x + delta, y).data
    lin = (delta.reshape(len(x), -1) * g.reshape(len(x), -1)).sum(axis=1)
    return np.abs(l1 - l0 - lin)


def linearization_curve(model, params, x, y, eps: float,
                        fractions=(0.05, 0.1, 0.25, 0.5, 0.75, 1.0),
                        seed: int = 0) -> list[dict]:
    """Linearization error as the corner perturbation is sparsified.

    Starts from the full corner eps*sign(grad) and keeps each coordinate with
    probability f, so ||delta||_inf stays eps while ||delta||_2 shrinks.
    """
    x = np.asarray(x, dtype=np.float64)
    corner = eps * np.sign(input_grads(model, params, x, y))
    rng = np.random.default_rng(seed)
    rows = []
    for f in fractions:
        keep = rng.random(corner.shape) < f
        delta = np.clip(x + corner * keep, 0.0, 1.0) - x
        err = linear_approx_error(model, params, x, y, delta)
        l2 = np.linalg.norm(delta.reshape(len(x), -1), axis=1)
        rows.append({"fraction": float(f), "delta_l2": float(l2.mean()),
                     "abs_error": float(err.mean())})
    return rows


def filter_stats(history, model=None, conv_name: str = "conv",
                 ref_epoch: int = 0) -> dict:
    """Per-epoch filter summaries from a parameter-snapshot history:
    conv-filter norms, direction persistence vs a reference epoch, and (when
    the model is given) outgoing-weight norms per filter."""
    if not history:
        raise DiagnosticsError("empty parameter history")
    key = f"{conv_name}.w"
    if key not in history[0]:
        raise DiagnosticsError(f"history lacks {key!r}")
    n_f = history[0][key].shape[0]
    ref = history[ref_epoch][key].reshape(n_f, -1)
    w_norm = np.empty((len(history), n_f))
    dir_cos = np.empty((len(history), n_f))
    u_norm = np.empty((len(history), n_f)) if model is not None else None
    for t, snap in enumerate(history):
        w = snap[key].reshape(n_f, -1)
        w_norm[t] = np.linalg.norm(w, axis=1)
        dir_cos[t] = (w * ref).sum(axis=1) / np.maximum(
            np.linalg.norm(w, axis=1) * np.linalg.norm(ref, axis=1), COS_FLOOR)
        if u_norm is not None:
            u_norm[t] = model.filter_outgoing_norms(model.params_from_arrays(snap))
    out = {"epochs": np.arange(len(history)), "w_norm": w_norm,
           "dir_cos": np.clip(dir_cos, -1.0, 1.0)}
    if u_norm is not None:
        out["u_norm"] = u_norm
    return out


def noise_amplification(model, params, x, eps: float, seed: int = 0) -> np.ndarray:
    """Relative feature-map deviation per conv filter under one uniform noise
    draw: ||(x+eta)*w_i - x*w_i|| / ||x*w_i|| (pure convolution, no bias).
    A zero clean response reports +inf."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    eta = np.random.default_rng(seed).uniform(-eps, eps, size=x.shape)
    w = params["conv.w"]
    zero_b = eg.Tensor(np.zeros(w.shape[0]))
    with eg.no_grad():
        base = eg.conv2d(eg.Tensor(x), w, zero_b, stride=model.stride,
                         padding=model.padding).data
        pert = eg.conv2d(eg.Tensor(x + eta), w, zero_b, stride=model.stride,
                         padding=model.padding).data
    num = np.linalg.norm((pert - base).transpose(1, 0, 2, 3).reshape(w.shape[0], -1),
                         axis=1)
    den = np.linalg.norm(base.transpose(1, 0, 2, 3).reshape(w.shape[0], -1), axis=1)
    return np.where(den == 0.0, np.inf, num / np.maximum(den, 1e-300))


@dataclass
class COEvent:
    """A detected robustness collapse: the first epoch where iterated-attack
    accuracy craters while single-step accuracy jumps and gradient alignment
    halves."""
    epoch: int
    pgd_before: float
    pgd_after: float
    fgsm_before: float
    fgsm_after: float
    align_before: float
    align_after: float

    def as_dict(self) -> dict:
        return dict(epoch=self.epoch, pgd_before=self.pgd_before,
                    pgd_after=self.pgd_after, fgsm_before=self.fgsm_before,
                    fgsm_after=self.fgsm_after, align_before=self.align_before,
                    align_after=self.align_after)


def detect_co(metric_log, split: str = "test", pgd_drop: float = 0.20,
              fgsm_rise: float = 0.10, align_factor: float = 0.5) -> COEvent | None:
    """Scan a metric log for the collapse signature, comparing consecutive
    epochs that carry full evaluations (NaN rows are skipped).

    Fires at the first epoch where, versus the previous evaluated epoch,
    pgd accuracy drops by >= pgd_drop, fgsm accuracy rises by >= fgsm_rise,
    and alignment falls below align_factor times its previous value.
    """
    rows = metric_log.rows if hasattr(metric_log, "rows") else list(metric_log)
    cols = ("epoch", f"{split}_pgd_acc", f"{split}_fgsm_acc", "grad_alignment")
    valid = []
    for r in rows:
        missing = [c for c in cols if c not in r]
        if missing:
            raise DiagnosticsError(f"metric log row lacks columns {missing}")
        vals = [r[c] for c in cols]
        if all(np.isfinite(v) for v in vals):
            valid.append(vals)
    for (e0, p0, f0, a0), (e1, p1, f1, a1) in zip(valid, valid[1:]):
        if p0 - p1 >= pgd_drop and f1 - f0 >= fgsm_rise and a1 < align_factor * a0:
            return COEvent(int(e1), p0, p1, f0, f1, a0, a1)
    return None
