"""Monte-Carlo verification of two analytic results about single-step attacks.

lemma1: the exact second moment of the random-start single-step perturbation
delta = clip(eta + alpha*sign(g), -eps, eps), eta ~ U([-eps,eps]^d), namely
E||delta||^2 = d*(-alpha^3/(6 eps) + alpha^2/2 + eps^2/3), and the Jensen
bound E||delta|| <= sqrt of it.

lemma2: a lower bound on the gradient alignment of a randomly initialized
single-layer conv net, max{1 - sqrt(2)*E[exp(-<w/||w||, z>^2 / eps^2)]^(1/2),
0.5}, its tighter intermediate ("Hoeffding variant"), the limiting decoupled
cosine, and the finite-size empirical cosine on a patch model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BoundsError(Exception):
    pass


# --- random-step perturbation norm ---

def rs_second_moment(eps: float, alpha: float, d: int) -> float:
    """Exact E||delta||^2 for the clipped random-start single step."""
    if eps <= 0.0:
        raise BoundsError("eps must be > 0")
    if not (0.0 <= alpha <= 2.0 * eps):
        raise BoundsError(f"alpha={alpha} outside [0, 2*eps]")
    return d * (-alpha ** 3 / (6.0 * eps) + alpha ** 2 / 2.0 + eps ** 2 / 3.0)


@dataclass
class Lemma1Report:
    eps: float
    d: int
    alphas: list[float]
    bound: list[float]            # sqrt(second moment): Jensen upper bound on E||delta||
    second_moment: list[float]
    mc_mean: list[float]          # MC estimate of E||delta||, first sign pattern
    mc_se: list[float]
    mc_mean_alt: list[float]      # second sign pattern (must agree)
    mc_sq_mean: list[float]       # MC estimate of E||delta||^2
    mc_sq_se: list[float]
    n_mc: int
    seed: int

    def rows(self) -> list[dict]:
        return [dict(eps=self.eps, d=self.d, alpha=a, bound=b, second_moment=s2,
                     mc_mean=m, mc_se=se, mc_mean_alt=m2, mc_sq_mean=sq,
                     mc_sq_se=sqse)
                for a, b, s2, m, se, m2, sq, sqse in zip(
                    self.alphas, self.bound, self.second_moment, self.mc_mean,
                    self.mc_se, self.mc_mean_alt, self.mc_sq_mean, self.mc_sq_se)]


def _rs_norm_samples(eps, alpha, d, n_mc, rng, sign_pattern) -> np.ndarray:
    eta = rng.uniform(-eps, eps, size=(n_mc, d))
    delta = np.clip(eta + alpha * sign_pattern, -eps, eps)
    return np.linalg.norm(delta, axis=1)


def lemma1_verify(eps: float, d: int, alphas, n_mc: int = 1000,
                  seed: int = 0) -> Lemma1Report:
    """MC check of the closed form. The distribution of ||delta|| does not
    depend on the sign pattern of the gradient; two distinct fixed patterns
    are sampled so that invariance is itself checked by the caller."""
    if n_mc < 100:
        raise BoundsError("n_mc must be >= 100")
    alphas = [float(a) for a in alphas]
    rep = Lemma1Report(eps=float(eps), d=int(d), alphas=alphas, bound=[],
                       second_moment=[], mc_mean=[], mc_se=[], mc_mean_alt=[],
                       mc_sq_mean=[], mc_sq_se=[], n_mc=n_mc, seed=seed)
    pattern_a = np.ones(d)
    pattern_b = np.where(np.arange(d) % 3 == 0, -1.0, 1.0)  # arbitrary mix
    for i, a in enumerate(alphas):
        s2 = rs_second_moment(eps, a, d)
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        norms = _rs_norm_samples(eps, a, d, n_mc, rng, pattern_a)
        norms_alt = _rs_norm_samples(eps, a, d, n_mc, rng, pattern_b)
        rep.second_moment.append(s2)
        rep.bound.append(float(np.sqrt(s2)))
        rep.mc_mean.append(float(norms.mean()))
        rep.mc_se.append(float(norms.std(ddof=1) / np.sqrt(n_mc)))
        rep.mc_mean_alt.append(float(norms_alt.mean()))
        sq = norms ** 2
        rep.mc_sq_mean.append(float(sq.mean()))
        rep.mc_sq_se.append(float(sq.std(ddof=1) / np.sqrt(n_mc)))
    return rep


# --- alignment-at-initialization bound ---

def _unit_gaussian_rows(rng, n: int, p: int) -> np.ndarray:
    w = rng.standard_normal((n, p))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


@dataclass
class Lemma2Point:
    eps: float
    expectation: float      # E[exp(-<w/||w||, z>^2 / eps^2)]
    expectation_se: float
    final_bound: float      # max{1 - sqrt(2)*sqrt(expectation), 0.5}
    hoeffding_bound: float  # 1 - E[||w||^2 exp(-q^2/(2 eps^2))] / (p sigma_w^2)
    hoeffding_clipped: bool
    limiting_cosine: float = float("nan")
    limiting_se: float = float("nan")
    empirical_mean: float = float("nan")
    empirical_se: float = float("nan")


@dataclass
class Lemma2Report:
    p: int
    sigma_w: float
    sigma_u: float
    n_mc: int
    seed: int
    points: list[Lemma2Point] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [dict(eps=pt.eps, expectation=pt.expectation,
                     expectation_se=pt.expectation_se, final_bound=pt.final_bound,
                     hoeffding_bound=pt.hoeffding_bound,
                     hoeffding_clipped=int(pt.hoeffding_clipped),
                     limiting_cosine=pt.limiting_cosine, limiting_se=pt.limiting_se,
                     empirical_mean=pt.empirical_mean, empirical_se=pt.empirical_se)
                for pt in self.points]


def lemma2_bound(eps_grid, p: int, n_mc: int = 1000, seed: int = 0,
                 sigma_w: float = 1.0) -> Lemma2Report:
    """Per grid point: MC of the bound's expectation over w (gaussian,
    normalized to the sphere) and z ~ U([0,1]^p). eps=0 is exact: the inner
    product is nonzero almost surely, so the expectation is 0 and the bound 1.
    """
    if p < 2:
        raise BoundsError("p must be >= 2")
    rep = Lemma2Report(p=int(p), sigma_w=float(sigma_w), sigma_u=float("nan"),
                       n_mc=n_mc, seed=seed)
    # one (w, z) sample set shared across the grid: the integrand is
    # pointwise monotone in eps, so the reported bound is exactly monotone
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    w_raw = rng.standard_normal((n_mc, p)) * sigma_w
    w_unit = w_raw / np.linalg.norm(w_raw, axis=1, keepdims=True)
    z = rng.uniform(0.0, 1.0, size=(n_mc, p))
    q = (w_unit * z).sum(axis=1)
    for eps in (float(e) for e in eps_grid):
        if eps == 0.0:
            exp_samples = np.zeros(n_mc)
            hoeff_samples = np.zeros(n_mc)
        else:
            exp_samples = np.exp(-(q ** 2) / eps ** 2)
            hoeff_samples = (np.linalg.norm(w_raw, axis=1) ** 2
                             * np.exp(-(q ** 2) / (2.0 * eps ** 2)))
        e_mean = float(exp_samples.mean())
        e_se = float(exp_samples.std(ddof=1) / np.sqrt(n_mc))
        final = max(1.0 - np.sqrt(2.0) * np.sqrt(e_mean), 0.5)
        hoeff = 1.0 - float(hoeff_samples.mean()) / (p * sigma_w ** 2)
        clipped = hoeff > 1.0
        rep.points.append(Lemma2Point(eps=eps, expectation=e_mean,
                                      expectation_se=e_se, final_bound=float(final),
                                      hoeffding_bound=float(min(hoeff, 1.0)),
                                      hoeffding_clipped=clipped))
    return rep


def _patch_cosine_samples(eps: float, p: int, k: int, m: int, sigma_w: float,
                          sigma_u: float, n_trials: int, rng) -> np.ndarray:
    """Exact input-gradient cosines of the patch model f(x) = sum over
    patches j and filters f of u_f * relu(<w_f, x_j>), at x and x + eta."""
    cos = np.empty(n_trials)
    for t in range(n_trials):
        w = rng.standard_normal((m, p)) * sigma_w
        u = rng.standard_normal(m) * sigma_u
        z = rng.uniform(0.0, 1.0, size=(k, p))
        eta = rng.uniform(-eps, eps, size=(k, p))
        act0 = (z @ w.T) > 0.0          # (k, m) relu masks at x
        act1 = ((z + eta) @ w.T) > 0.0  # at x + eta
        g0 = (act0 * u) @ w             # (k, p): sum_f u_f 1[.] w_f per patch
        g1 = (act1 * u) @ w
        n0 = np.linalg.norm(g0)
        n1 = np.linalg.norm(g1)
        if n0 == 0.0 and n1 == 0.0:
            cos[t] = 1.0
        else:
            cos[t] = float((g0 * g1).sum() / max(n0 * n1, 1e-30))
    return np.clip(cos, -1.0, 1.0)


def lemma2_empirical(eps: float, p: int = 27, k: int = 100, m: int = 4,
                     sigma_w: float = 1.0, sigma_u: float = 1.0,
                     n_trials: int = 1000, seed: int = 0) -> dict:
    """Finite-size empirical cosines plus the limiting decoupled ratio
    E[||w||^2 1{<w,z>>0} 1{<w,z+eta> >0}] / (E||w||^2 / 2) by MC."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE3]))
    samples = _patch_cosine_samples(eps, p, k, m, sigma_w, sigma_u, n_trials, rng)

    # the ||w||^2 weighting fattens the estimator's tails, so the limiting
    # ratio gets its own larger sample
    n_lim = max(n_trials, 2000)
    w = rng.standard_normal((n_lim, p)) * sigma_w
    z = rng.uniform(0.0, 1.0, size=(n_lim, p))
    eta = rng.uniform(-eps, eps, size=(n_lim, p))
    both = (((w * z).sum(axis=1) > 0.0) & ((w * (z + eta)).sum(axis=1) > 0.0))
    num = (np.linalg.norm(w, axis=1) ** 2) * both
    limiting = num.mean() / (0.5 * p * sigma_w ** 2)
    limiting_se = (num.std(ddof=1) / np.sqrt(n_lim)) / (0.5 * p * sigma_w ** 2)

    return {"eps": float(eps), "samples": samples,
            "mean": float(samples.mean()),
            "se": float(samples.std(ddof=1) / np.sqrt(n_trials)),
            "limiting_cosine": float(limiting),
            "limiting_se": float(limiting_se)}


def lemma2_full(eps_grid, p: int = 27, k: int = 100, m: int = 4,
                sigma_w: float = 1.0, sigma_u: float = 1.0, n_mc: int = 1000,
                n_trials: int = 200, seed: int = 0) -> Lemma2Report:
    """Bound plus empirical and limiting cosines on a shared grid."""
    rep = lemma2_bound(eps_grid, p, n_mc=n_mc, seed=seed, sigma_w=sigma_w)
    rep.sigma_u = float(sigma_u)
    for i, pt in enumerate(rep.points):
        emp = lemma2_empirical(pt.eps, p=p, k=k, m=m, sigma_w=sigma_w,
                               sigma_u=sigma_u, n_trials=n_trials,
                               seed=seed * 1000 + i)
        pt.empirical_mean = emp["mean"]
        pt.empirical_se = emp["se"]
        pt.limiting_cosine = emp["limiting_cosine"]
        pt.limiting_se = emp["limiting_se"]
    return rep


DEFAULT_EPS_GRID = tuple(np.linspace(0.0, 0.1, 21))
