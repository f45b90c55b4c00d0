"""Estimates, bound checks and order-independent aggregation."""
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

SIGMAS = 3.0


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    trials: int
    seed: int

    def to_dict(self):
        return {"value": self.value, "stderr": self.stderr, "trials": self.trials,
                "seed": self.seed}


class Verdict(str, Enum):
    SATISFIED = "Satisfied"
    VIOLATED = "Violated"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class BoundCheck:
    """Outcome of comparing an estimate against a closed-form bound.

    ``sense`` is ``">="`` (estimate should be at least ``bound``) or ``"<="``.
    ``slack`` is the signed margin in units of ``stderr``; positive means the
    inequality holds. Verdict is Violated only past ``SIGMAS`` standard errors.
    """

    name: str
    bound: float
    estimate: float
    stderr: float
    sense: str
    verdict: Verdict
    slack: float

    def to_dict(self):
        d = dict(self.__dict__)
        d["verdict"] = self.verdict.value
        return d

    def line(self):
        return (f"[{self.verdict.value}] {self.name}: estimate {self.estimate:.6g} "
                f"{self.sense} bound {self.bound:.6g} (slack {self.slack:+.2f} sigma)")


def check_bound(name, estimate, stderr, bound, sense=">="):
    if sense not in (">=", "<="):
        raise ValueError(f"bad sense {sense!r}")
    margin = estimate - bound if sense == ">=" else bound - estimate
    if stderr > 0:
        slack = margin / stderr
    else:
        slack = math.inf if margin >= 0 else -math.inf
    if margin >= 0:
        verdict = Verdict.SATISFIED
    elif slack >= -SIGMAS:
        verdict = Verdict.INCONCLUSIVE
    else:
        verdict = Verdict.VIOLATED
    return BoundCheck(name, float(bound), float(estimate), float(stderr), sense, verdict,
                      float(slack))


def fmean(x):
    x = np.asarray(x, dtype=np.float64)
    return math.fsum(x.tolist()) / x.size if x.size else math.nan


def mean_and_se(x):
    """Mean and standard error ``std/sqrt(n)``, summed with ``math.fsum``.

    ``fsum`` is exactly rounded, so the result does not depend on the order in
    which per-trial values were produced.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if n == 0:
        return math.nan, math.nan
    m = math.fsum(x.tolist()) / n
    if n == 1:
        return m, 0.0
    var = math.fsum(((x - m) ** 2).tolist()) / (n - 1)
    return m, math.sqrt(var / n)


def ratio_and_se(num, den):
    """Ratio of sums with a delta-method standard error."""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    n = num.size
    sd = math.fsum(den.tolist())
    if sd == 0:
        return math.nan, math.nan
    r = math.fsum(num.tolist()) / sd
    if n < 2:
        return r, 0.0
    resid = num - r * den
    var = math.fsum((resid ** 2).tolist()) / (n - 1)
    return r, math.sqrt(var / n) / (sd / n)
