"""Monte Carlo estimators and bound checks built on the stabilization procedures.

Every estimator takes a master ``seed``; trial ``i`` runs with the key
``trial_key(seed, i)``, so a single trial can be rebuilt with
``Context.fresh(g, params, trial_key(seed, i))``. Trials are spread over
``parallel`` threads and aggregated with exactly rounded sums, so results do
not depend on ``parallel``.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import _prf
from ._prf import hash3, uniform
from .core import InitDist, ModelParams, SleepMask, _init_k
from .graphs import Family, _run_chunked, estimate_rw_stats, tree_green_exact
from .stabilize import StepBudgetExceeded, _stabilize_k, _via_weak_k
from .stats import Estimate, check_bound, mean_and_se, ratio_and_se

DEFAULT_BUDGET = 10**9
TOKEN_BUDGET = 10**7


class NoSignChange(ValueError):
    """Both bisection endpoints fall on the same side of the activity cutoff."""


class TokenBudgetExceeded(RuntimeError):
    """A branching trial grew past its token cap; ``trial`` holds the partial run."""

    def __init__(self, msg, trial=None):
        super().__init__(msg)
        self.trial = trial


# ---------------------------------------------------------------------------
# closed-form bounds
# ---------------------------------------------------------------------------

def q_upper_bound(lam, green_C):
    """``3 sqrt(lam (C_G (1 + lam) + 1))``."""
    return 3.0 * math.sqrt(lam * (green_C * (1.0 + lam) + 1.0))


def round_bound(lam, green_C):
    """Bound ``C_G (1 + lam) + 1`` on the mean number of weak-stabilization rounds."""
    return green_C * (1.0 + lam) + 1.0


def amenable_lower_bound(lam):
    """``lam / (1 + lam)``: lower bound on the critical density on amenable graphs."""
    return lam / (1.0 + lam)


def transient_upper_bound(lam, alpha, delta):
    """``1 - alpha delta / (1 + lam)``: upper bound on the critical density."""
    return 1.0 - alpha * delta / (1.0 + lam)


def tree_speed_exact(degree):
    return (degree - 2) / degree


def tree_nonreturn_exact(degree):
    return 1.0 - 1.0 / (degree - 1)


# ---------------------------------------------------------------------------
# batch kernels: one call runs a contiguous block of trials
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True, inline="always")
def _trial_tape(tkey, sp, mask):
    return (hash3(tkey, 2, 0), sp, mask[0], mask[1], mask[2], mask[3], mask[4])


@njit(cache=True, nogil=True)
def _q_batch_k(jump, dist, in_k, x, keys, mu, geometric, sp, mask, budget, a, b,
               slept, topp, rounds, m1, status):
    n = jump.shape[0]
    state = np.empty(n, np.int64)
    odo = np.empty(n, np.int64)
    scratch = np.empty(0, np.int64)
    for i in range(a, b):
        tkey = keys[i]
        _init_k(state, hash3(tkey, 3, 0), mu, geometric)
        odo[:] = 0
        T, _, _, st, r1 = _via_weak_k(state, odo, jump, dist, _trial_tape(tkey, sp, mask),
                                      in_k, x, budget, scratch)
        slept[i] = state[x] == 1
        topp[i] = odo[x]
        rounds[i] = T
        m1[i] = r1
        status[i] = st


@njit(cache=True, nogil=True)
def _activity_batch_k(jump, dist, keys, mu, geometric, sp, mask, theta, budget, a, b,
                      odo0, status):
    n = jump.shape[0]
    state = np.empty(n, np.int64)
    odo = np.empty(n, np.int64)
    in_k = np.ones(n, np.bool_)
    for i in range(a, b):
        tkey = keys[i]
        _init_k(state, hash3(tkey, 3, 0), mu, geometric)
        odo[:] = 0
        _, _, st, _ = _stabilize_k(state, odo, jump, dist, _trial_tape(tkey, sp, mask), in_k,
                                   -1, 0, np.uint64(0), budget, 0, theta)
        odo0[i] = odo[0]
        status[i] = 1 if st == 1 else 0


@njit(cache=True, nogil=True)
def _killed_walk_k(jump, dist, radius, keys, sp, horizon, a, b, N, Nt, censored):
    """Walks from the origin until they return to it or leave the ball.

    ``N[i, r]`` counts visits to sphere ``r``; ``Nt[i, r]`` counts only those
    before the kill clock has fired while the walk was at distance ``>= r``.
    """
    k = jump.shape[1]
    for i in range(a, b):
        key = keys[i]
        N[i, 0] = 1
        Nt[i, 0] = 1
        v = 0
        killed = -1
        t = 0
        while True:
            d = int(uniform(key, t, 0) * k)
            v = jump[v, d if d < k else k - 1]
            t += 1
            if v <= 0:
                break
            if t >= horizon:
                censored[i] = True
                break
            r = dist[v]
            if uniform(key, t, 1) < sp and r > killed:
                killed = r
            N[i, r] += 1
            if r > killed:
                Nt[i, r] += 1


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _mask_parts(g, mask):
    m = mask if mask is not None else SleepMask()
    return m.kernel_parts(g.n)


def _in_k(g, K):
    m = np.zeros(g.n, np.bool_)
    if K is None:
        m[:] = True
    else:
        K = np.asarray(K)
        if K.dtype == np.bool_:
            m[:] = K
        else:
            m[K] = True
    return m


def _check_budget(status, budget):
    over = int(np.count_nonzero(status == 1))
    if over:
        raise StepBudgetExceeded(f"{over} trial(s) exceeded the budget of {budget} topplings")


def _green(g, green_C, seed):
    if green_C is not None:
        return float(green_C), 0.0
    if g.spec.family is Family.TREE:
        return tree_green_exact(g.spec.degree), 0.0
    rs = estimate_rw_stats(g, 10**4, seed=_prf.derive(seed, _prf.WALK, 1))
    return rs.green_C, rs.green_C_se


# ---------------------------------------------------------------------------
# Q(x, K)
# ---------------------------------------------------------------------------

@dataclass
class QEstimate:
    """Estimates from repeated stabilization via weak stabilization of ``(x, K)``.

    ``Q`` is the probability that ``x`` ends sleeping, ``p_active`` the
    probability that ``x`` topples at least once, ``rounds`` the mean number
    of weak stabilizations. ``per_trial`` holds the raw per-trial arrays.
    """

    Q: Estimate
    p_active: Estimate
    rounds: Estimate
    green_C: float | None
    checks: list
    per_trial: dict = field(repr=False, default_factory=dict)

    def to_dict(self):
        return {"Q": self.Q.to_dict(), "p_active": self.p_active.to_dict(),
                "rounds": self.rounds.to_dict(), "green_C": self.green_C,
                "checks": [c.to_dict() for c in self.checks]}


def estimate_Q_and_check_bounds(g, x, K, params, trials, seed, *, green_C=None,
                                upper=None, mask=None, budget=DEFAULT_BUDGET, parallel=1):
    """Estimate ``Q(x, K)`` and check it against its two closed-form bounds.

    Lower bound: ``Q >= lam/(1+lam) P(m_K(x) >= 1)``, tested through the
    per-trial difference so that both sides share their noise. Upper bound
    (transient graphs only): ``Q <= 3 sqrt(lam (C_G (1+lam) + 1))``. On
    transient graphs the mean round count is also checked against
    ``C_G (1+lam) + 1``. ``green_C`` defaults to the exact value on trees and
    to a Monte Carlo estimate elsewhere.
    """
    if upper is None:
        upper = g.is_transient
    if upper and not g.is_transient:
        raise ValueError("the upper bound on Q needs a transient graph")
    in_k = _in_k(g, K)
    if not in_k[x]:
        raise ValueError("x must belong to K")
    keys = _prf.trial_keys(seed, trials)
    slept = np.zeros(trials, np.bool_)
    topp = np.zeros(trials, np.int64)
    rounds = np.zeros(trials, np.int64)
    m1 = np.zeros(trials, np.int64)
    status = np.zeros(trials, np.int64)
    geometric = params.init is InitDist.SHIFTED_GEOMETRIC
    parts = _mask_parts(g, mask)

    def run(a, b):
        _q_batch_k(g.jump, g.dist, in_k, int(x), keys, params.mu, geometric, params.sleep_prob,
                   parts, budget, a, b, slept, topp, rounds, m1, status)

    _run_chunked(run, trials, parallel)
    _check_budget(status, budget)

    sp = params.sleep_prob
    active = topp >= 1
    q = Estimate(*mean_and_se(slept), trials, seed)
    pa = Estimate(*mean_and_se(active), trials, seed)
    rr = Estimate(*mean_and_se(rounds), trials, seed)
    diff, diff_se = mean_and_se(slept.astype(float) - sp * active)
    checks = [check_bound("Q lower bound lam/(1+lam) P(m>=1)", q.value, diff_se,
                          q.value - diff, ">=")]
    C = None
    if g.is_transient:
        C, C_se = _green(g, green_C, seed)
        if upper:
            checks.append(check_bound("Q upper bound 3 sqrt(lam (C_G (1+lam) + 1))", q.value,
                                      q.stderr, q_upper_bound(params.lam, C), "<="))
        se = math.hypot(rr.stderr, (1.0 + params.lam) * C_se)
        checks.append(check_bound("mean rounds <= C_G (1+lam) + 1", rr.value, se,
                                  round_bound(params.lam, C), "<="))
    return QEstimate(q, pa, rr, C, checks,
                     {"slept": slept, "origin_topplings": topp, "rounds": rounds,
                      "first_round_topplings": m1})


# ---------------------------------------------------------------------------
# activity and the critical density
# ---------------------------------------------------------------------------

def default_threshold(radius):
    """Default activity threshold ``ceil(sqrt(L))`` on the origin's toppling count."""
    return max(1, math.ceil(math.sqrt(radius)))


def estimate_activity(g, params, theta=None, trials=200, seed=0, *, mask=None,
                      budget=DEFAULT_BUDGET, parallel=1, return_counts=False):
    """Estimate ``P(m(origin) >= theta)`` for the stabilization of the whole ball.

    Each trial stops as soon as the origin has toppled ``theta`` times. The
    initial configurations for different ``mu`` share their uniforms, so with
    a fixed seed the estimate is non-decreasing in ``mu``.
    """
    theta = default_threshold(g.radius) if theta is None else int(theta)
    if theta < 1:
        raise ValueError("theta must be at least 1")
    keys = _prf.trial_keys(seed, trials)
    odo0 = np.zeros(trials, np.int64)
    status = np.zeros(trials, np.int64)
    geometric = params.init is InitDist.SHIFTED_GEOMETRIC
    parts = _mask_parts(g, mask)

    def run(a, b):
        _activity_batch_k(g.jump, g.dist, keys, params.mu, geometric, params.sleep_prob,
                          parts, theta, budget, a, b, odo0, status)

    _run_chunked(run, trials, parallel)
    _check_budget(status, budget)
    est = Estimate(*mean_and_se(odo0 >= theta), trials, seed)
    return (est, odo0) if return_counts else est


@dataclass
class MuCInterval:
    """Bracket ``[lo, hi]`` around the finite-size critical density.

    ``lo`` classifies inactive and ``hi`` active, where active means the
    estimated activity probability exceeds ``cutoff``. ``evaluations`` lists
    ``(mu, Estimate)`` pairs in evaluation order.
    """

    lo: float
    hi: float
    theta: int
    cutoff: float
    evaluations: list

    @property
    def width(self):
        return self.hi - self.lo

    def intersects(self, a, b):
        return self.lo <= b and a <= self.hi

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi, "theta": self.theta, "cutoff": self.cutoff,
                "evaluations": [{"mu": m, **e.to_dict()} for m, e in self.evaluations]}


def estimate_mu_c(g, lam, lo=0.0, hi=1.0, tol=0.05, trials=200, theta=None, cutoff=0.5,
                  seed=0, *, init=InitDist.BERNOULLI, budget=DEFAULT_BUDGET, parallel=1):
    """Bisect on ``mu`` for the density where activity at scale ``L`` sets in.

    Every evaluation reuses ``seed``, so the classifier is monotone in ``mu``
    up to ties. Raises :class:`NoSignChange` if ``lo`` and ``hi`` classify
    alike.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not 0.0 < cutoff < 1.0:
        raise ValueError("cutoff must lie in (0, 1)")
    theta = default_threshold(g.radius) if theta is None else int(theta)
    evals = []

    def active(mu):
        e = estimate_activity(g, ModelParams(mu, lam, init), theta, trials, seed,
                              budget=budget, parallel=parallel)
        evals.append((mu, e))
        return e.value > cutoff

    a_lo, a_hi = active(lo), active(hi)
    if a_lo == a_hi:
        raise NoSignChange(f"activity classifies mu={lo} and mu={hi} both as "
                           f"{'active' if a_lo else 'inactive'}")
    if a_lo:
        raise NoSignChange(f"mu={lo} is active but mu={hi} is not")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if active(mid):
            hi = mid
        else:
            lo = mid
    return MuCInterval(lo, hi, theta, cutoff, evals)


# ---------------------------------------------------------------------------
# killed-walk sufficient condition
# ---------------------------------------------------------------------------

@dataclass
class SuffCondEstimate:
    """Killed-walk quantities for the sufficient condition for activity.

    ``N[n]`` and ``N_killed[n]`` are the mean visit counts to sphere ``n``
    without and with the kill clock; ``M`` and ``M_killed`` their sums over
    ``n``. The condition for activity compares ``ratio = M_killed / M`` with
    ``threshold = nu0 / (density + nu0)``.
    """

    M: Estimate
    M_killed: Estimate
    ratio: float
    ratio_stderr: float
    threshold: float
    N: np.ndarray
    N_killed: np.ndarray
    censored: int
    checks: list

    @property
    def condition_holds(self):
        return self.ratio > self.threshold

    def to_dict(self):
        return {"M": self.M.to_dict(), "M_killed": self.M_killed.to_dict(),
                "ratio": self.ratio, "ratio_stderr": self.ratio_stderr,
                "threshold": self.threshold, "N": self.N.tolist(),
                "N_killed": self.N_killed.tolist(), "censored": self.censored,
                "checks": [c.to_dict() for c in self.checks]}


def estimate_sufficient_condition(g, params, trials, seed, *, alpha=None, delta=None,
                                  eps=0.05, horizon=10**7, parallel=1):
    """Simulate walks from the origin with a kill clock of rate ``lam/(1+lam)``.

    A walk runs until it returns to the origin or leaves the ball. On trees
    the means are checked against ``E[M_killed] >= delta L / (1+lam)`` and
    ``E[M] <= L / (alpha - eps)``; ``alpha`` and ``delta`` default to their
    exact tree values.
    """
    L = g.radius
    keys = _prf.trial_keys(seed, trials)
    N = np.zeros((trials, L + 1), np.int64)
    Nt = np.zeros((trials, L + 1), np.int64)
    cens = np.zeros(trials, np.bool_)

    def run(a, b):
        _killed_walk_k(g.jump, g.dist, L, keys, params.sleep_prob, horizon, a, b, N, Nt, cens)

    _run_chunked(run, trials, parallel)
    Ms = N.sum(axis=1)
    Mt = Nt.sum(axis=1)
    M = Estimate(*mean_and_se(Ms), trials, seed)
    Mk = Estimate(*mean_and_se(Mt), trials, seed)
    ratio, ratio_se = ratio_and_se(Mt, Ms)
    nu0 = params.empty_prob
    threshold = nu0 / (params.density + nu0)
    checks = []
    if g.spec.family is Family.TREE:
        d = g.spec.degree
        alpha = tree_speed_exact(d) if alpha is None else alpha
        delta = tree_nonreturn_exact(d) if delta is None else delta
        checks.append(check_bound("E[M_killed] >= delta L / (1+lam)", Mk.value, Mk.stderr,
                                  delta * L / (1.0 + params.lam), ">="))
        if alpha > eps:
            checks.append(check_bound("E[M] <= L / (alpha - eps)", M.value, M.stderr,
                                      L / (alpha - eps), "<="))
    per_n = np.array([mean_and_se(N[:, n])[0] for n in range(L + 1)])
    per_n_k = np.array([mean_and_se(Nt[:, n])[0] for n in range(L + 1)])
    return SuffCondEstimate(M, Mk, ratio, ratio_se, threshold, per_n, per_n_k,
                            int(cens.sum()), checks)


# ---------------------------------------------------------------------------
# token branching process
# ---------------------------------------------------------------------------

def drift_factor(d, alpha_b, beta):
    """Expected one-step multiplier of ``Psi = sum_i gamma**k_i``, ``gamma = sqrt(1 - beta)``.

    ``alpha_b`` is the advance probability of a token (stored as
    ``advance_prob`` elsewhere, not the walk speed).
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    if not 0.0 <= alpha_b <= 1.0:
        raise ValueError("alpha_b must lie in [0, 1]")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    g = math.sqrt(1.0 - beta)
    return alpha_b * g + (1.0 - alpha_b) * d * (1.0 + g) / (g * (1.0 - g))


def event_rounds(d, beta):
    """Smallest ``R`` with ``d gamma**(R+1) < 1/5``."""
    g = math.sqrt(1.0 - beta)
    R = 0
    while d * g ** (R + 1) >= 0.2:
        R += 1
    return R


@dataclass
class BranchingTrial:
    survived: bool
    censored: bool
    steps: int
    min_position: int
    event_E: bool
    log_psi: list
    ratios: list
    max_rel_err: float


@dataclass
class BranchingReport:
    """Summary of :func:`simulate_branching`.

    ``survival`` counts censored trials as non-survival. ``ratio_mean`` is the
    mean of all one-step ratios ``Psi_{t+1}/Psi_t`` pooled over trials, with
    ``ratio_stderr`` its naive standard error. ``psi_max_rel_err`` is the
    largest relative gap between the incrementally maintained and the
    recomputed ``Psi``.
    """

    d: int
    advance_prob: float
    beta: float
    max_steps: int
    survival: Estimate
    censored: int
    min_position: int
    factor: float
    ratio_mean: float
    ratio_stderr: float
    ratio_samples: int
    event_R: int
    event_freq: Estimate
    event_prob: float
    psi_max_rel_err: float
    trials_detail: list = field(repr=False, default_factory=list)
    checks: list = field(default_factory=list)

    def to_dict(self):
        return {"d": self.d, "advance_prob": self.advance_prob, "beta": self.beta,
                "max_steps": self.max_steps, "survival": self.survival.to_dict(),
                "censored": self.censored, "min_position": self.min_position,
                "factor": self.factor, "ratio_mean": self.ratio_mean,
                "ratio_stderr": self.ratio_stderr, "ratio_samples": self.ratio_samples,
                "event_R": self.event_R, "event_freq": self.event_freq.to_dict(),
                "event_prob": self.event_prob, "psi_max_rel_err": self.psi_max_rel_err,
                "checks": [c.to_dict() for c in self.checks]}


def _branching_trial(d, alpha_b, beta, max_steps, key, token_budget, R):
    """One run of the token process. Positions live in ``counts[k]`` for ``k >= 1``.

    ``Psi`` is kept relative to ``gamma**shift`` (``shift`` = lowest occupied
    position) so that it never underflows.
    """
    rng = np.random.Generator(np.random.Philox(key=int(key)))
    gam = math.sqrt(1.0 - beta)
    size = max_steps + 2
    counts = np.zeros(size, np.int64)
    counts[1] = d
    total = d
    shift = 1
    psi = float(d)
    log_psi = [math.log(d) + shift * math.log(gam)]
    ratios = []
    min_pos = 1
    event = True
    max_err = 0.0
    for t in range(max_steps):
        occ = np.flatnonzero(counts)
        c = counts[occ]
        adv = rng.binomial(c, alpha_b)
        br = c - adv
        w = gam ** (occ - shift).astype(float)
        terms = [(adv * w * (gam - 1.0)).tolist(), (-br * w).tolist()]
        new = np.zeros(size, np.int64)
        new[occ + 1] += adv
        nb = int(br.sum())
        if nb:
            event = event and t >= R
            src = np.repeat(occ, br)
            ell = rng.geometric(beta, size=nb)
            dst = src - ell
            lo = int(dst.min())
            min_pos = min(min_pos, lo)
            if lo <= 0:
                return BranchingTrial(False, False, t + 1, min_pos, event, log_psi, ratios,
                                      max_err)
            np.add.at(new, dst, ell * d)
            terms.append((ell * d * gam ** (dst - shift).astype(float)).tolist())
        counts = new
        total = int(counts.sum())
        if total > token_budget:
            raise TokenBudgetExceeded(f"{total} tokens after {t + 1} steps",
                                      BranchingTrial(False, True, t + 1, min_pos, event,
                                                     log_psi, ratios, max_err))
        incr = math.fsum([psi] + terms[0] + terms[1] + (terms[2] if nb else []))
        occ = np.flatnonzero(counts)
        new_shift = int(occ[0])
        incr *= gam ** (shift - new_shift)
        recomputed = math.fsum((counts[occ] * gam ** (occ - new_shift).astype(float)).tolist())
        max_err = max(max_err, abs(incr - recomputed) / recomputed)
        ratios.append(recomputed / psi * gam ** (new_shift - shift))
        psi = recomputed
        shift = new_shift
        log_psi.append(math.log(psi) + shift * math.log(gam))
    return BranchingTrial(True, False, max_steps, min_pos, event, log_psi, ratios, max_err)


def simulate_branching(d, alpha_b, beta, max_steps, trials, seed, *,
                       token_budget=TOKEN_BUDGET, parallel=1, keep_trials=True):
    """Run the token branching process started from ``d`` tokens at position 1.

    Each step every token independently advances by one with probability
    ``alpha_b``, or else is replaced by ``ell * d`` tokens at ``k - ell`` with
    ``P(ell = z) = (1 - beta)**(z - 1) beta``. A trial survives if no token
    reaches a position ``<= 0`` within ``max_steps`` steps. The event ``E``
    (no branching in the first ``R`` steps) is tallied against
    ``alpha_b**(d R)``.
    """
    factor = drift_factor(d, alpha_b, beta)
    R = event_rounds(d, beta)
    keys = _prf.trial_keys(_prf.derive(seed, _prf.BRANCH), trials)
    out = [None] * trials

    def run(a, b):
        for i in range(a, b):
            try:
                out[i] = _branching_trial(d, alpha_b, beta, max_steps, keys[i], token_budget, R)
            except TokenBudgetExceeded as e:
                out[i] = e.trial

    _run_chunked(run, trials, parallel)
    surv = np.array([t.survived for t in out])
    cens = int(sum(t.censored for t in out))
    ratios = [r for t in out for r in t.ratios]
    rm, rse = mean_and_se(ratios) if ratios else (math.nan, math.nan)
    ev = np.array([t.event_E and t.steps >= min(R, max_steps) for t in out])
    ev_est = Estimate(*mean_and_se(ev), trials, seed)
    ev_prob = alpha_b ** (d * min(R, max_steps))
    checks = []
    if ratios and factor < 1.0:
        checks.append(check_bound("mean Psi ratio <= drift factor", rm, rse, factor, "<="))
    se_ev = math.sqrt(ev_prob * (1.0 - ev_prob) / trials)
    checks.append(check_bound("P(E) >= alpha_b^(dR)", ev_est.value, se_ev, ev_prob, ">="))
    checks.append(check_bound("P(E) <= alpha_b^(dR)", ev_est.value, se_ev, ev_prob, "<="))
    return BranchingReport(d, alpha_b, beta, max_steps, Estimate(*mean_and_se(surv), trials, seed),
                           cens, int(min(t.min_position for t in out)), factor, rm, rse,
                           len(ratios), R, ev_est, ev_prob,
                           float(max(t.max_rel_err for t in out)),
                           out if keep_trials else [], checks)
