"""
Privacy accountant for class-centric mixing with CAPE noise.

Forward direction: per-sample Renyi DP of the mixed Gaussian mechanism,
amplification by subsampling with sampling rate p = lK/N, composition over
T releases and conversion to (epsilon, delta)-DP minimized over integer
orders alpha in {3..alpha_max}. Inverse direction: bisection on the local
noise scale tau_g for a target epsilon. Also the CAPE variance calculus
(pooled, conventional local and zero-sum split scales).
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import pandas as pd
from scipy import special

from .data_io import atomic_write
from .errors import (AccountingError, AccountingOverflowError, CalibrationError,
                     ConfigurationError)

logger = logging.getLogger(__name__)

# exp() overflows a float64 just above this
MAX_EXPONENT = 709.0
CLAMP_RELATIVE = 1e-12

TAU_BRACKET = (1e-4, 1e4)
BRACKET_EXPANSIONS = 10
TAU_RELATIVE_TOLERANCE = 1e-3


@dataclass(frozen=True)
class PrivacyParams:
    """Budget and mechanism parameters the accountant depends on"""

    epsilon_target: float
    delta: float
    l: int
    c: float
    T: int
    N: int
    K: int
    S: int = 1
    alpha_max: int = 200

    def __post_init__(self):
        if not (self.epsilon_target > 0):
            raise ConfigurationError(f"epsilon must be positive or inf, got {self.epsilon_target}")
        if not 0 < self.delta < 1:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        for name in ("l", "T", "N", "K", "S"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if not self.c > 0:
            raise ConfigurationError(f"clipping threshold c must be positive, got {self.c}")
        if self.alpha_max < 3:
            raise ConfigurationError(f"alpha_max must be >= 3, got {self.alpha_max}")
        if self.T % self.K:
            raise ConfigurationError(f"K={self.K} must divide T={self.T}")
        if self.N % self.S:
            raise ConfigurationError(f"S={self.S} must divide N={self.N}")
        if self.sampling_rate > 1:
            raise ConfigurationError(f"sampling rate p = lK/N = {self.sampling_rate:.6g} exceeds 1")

    @property
    def sampling_rate(self) -> float:
        return self.l * self.K / self.N


@dataclass(frozen=True)
class NoiseScales:
    """Standard deviations of the local (tau_g) and zero-sum correlated (tau_e) noise"""

    tau_g: float
    tau_e: float = 0.0

    def __post_init__(self):
        for name in ("tau_g", "tau_e"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigurationError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class AccountingReport:
    """Result of one forward accounting run"""

    epsilon_achieved: float
    alpha_star: Optional[int]
    rdp_curve: Dict[int, float]
    tau_g: float
    tau_e: float = 0.0
    tau_central: Optional[float] = None
    delta: Optional[float] = None
    T: Optional[int] = None
    sampling_rate: Optional[float] = None
    skipped_alphas: Tuple[int, ...] = field(default_factory=tuple)

    def with_scales(self, scales: NoiseScales) -> "AccountingReport":
        """Same guarantee, annotated with the per-client scales actually used"""
        central = self.tau_central if self.tau_central is not None else self.tau_g
        return replace(self, tau_g=scales.tau_g, tau_e=scales.tau_e, tau_central=central)

    def to_text(self) -> str:
        lines = {
            "epsilon": self.epsilon_achieved,
            "alpha_star": self.alpha_star,
            "delta": self.delta,
            "T": self.T,
            "sampling_rate": self.sampling_rate,
            "tau_central": self.tau_central if self.tau_central is not None else self.tau_g,
            "tau_g": self.tau_g,
            "tau_e": self.tau_e,
            "skipped_alphas": len(self.skipped_alphas),
        }
        return "\n".join(f"{key}={'' if value is None else _fmt(value)}" for key, value in lines.items()) + "\n"

    def curve_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"alpha": list(self.rdp_curve.keys()), "rdp": list(self.rdp_curve.values())}
        )

    def write_curve_csv(self, path: Union[str, Path]) -> None:
        with atomic_write(path) as tmp:
            self.curve_frame().to_csv(tmp, index=False, float_format="%.17g")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------- Gaussian / per-sample RDP

def gaussian_rdp(alpha: float, sigma: float, sensitivity: float) -> float:
    """
    RDP of the Gaussian mechanism: alpha * sensitivity^2 / (2 sigma^2).

    Returns inf when sigma = 0 and the sensitivity is positive.
    """
    if sigma < 0 or sensitivity < 0:
        raise ConfigurationError("sigma and sensitivity must be non-negative")
    if sensitivity == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    return alpha * sensitivity ** 2 / (2.0 * sigma ** 2)


def _rdp_rate(l: int, c: float, tau_g: float) -> float:
    """Per-unit-alpha cost: eps(alpha) = alpha * rate"""
    if l < 1:
        raise ConfigurationError(f"l must be >= 1, got {l}")
    if tau_g < 0:
        raise ConfigurationError(f"tau_g must be non-negative, got {tau_g}")
    if math.isinf(tau_g):
        return 0.0
    if tau_g == 0:
        return math.inf
    return (2.0 * c * c + 1.0) / (l * l * tau_g * tau_g)


def per_sample_rdp(alpha: float, l: int, c: float, tau_g: float) -> float:
    """
    eps(alpha) = (alpha / l^2) (2c^2 + 1) / tau_g^2, the composition of the
    feature mechanism (sensitivity 2c/l) and the label mechanism
    (sensitivity sqrt(2)/l) at the same tau_g.
    """
    if alpha == 0:
        return 0.0
    return alpha * _rdp_rate(l, c, tau_g)


# ---------------------------------------------------------------- subsampling amplification

@lru_cache(maxsize=65536)
def _b_from_rate(m: int, rate: float) -> float:
    terms = []
    for i in range(m + 1):
        exponent = (i - 1) * i * rate
        coefficient = special.comb(m, i, exact=True)
        log_magnitude = math.log(coefficient) + exponent
        if log_magnitude > MAX_EXPONENT:
            raise AccountingOverflowError(
                f"B({m}) term {i} needs exp({log_magnitude:.1f}); alpha too large for this noise"
            )
        term = coefficient * math.exp(exponent)
        terms.append(-term if i % 2 else term)
    try:
        total = math.fsum(terms)
    except OverflowError:
        raise AccountingOverflowError(f"B({m}) overflows; alpha too large for this noise")
    # odd orders are genuinely negative at moderate noise; only pure cancellation residue is zeroed
    if abs(total) <= CLAMP_RELATIVE * max(abs(t) for t in terms):
        return 0.0
    return total


def b_term(m: int, l: int, c: float, tau_g: float) -> float:
    """
    B(m) = sum_{i=0}^{m} (-1)^i C(m, i) e^{(i-1) eps(i)}, summed exactly with
    math.fsum. The sign is kept (odd m is negative at moderate noise);
    a residue below 1e-12 of the largest term is returned as 0.
    """
    if m < 0:
        raise ConfigurationError(f"B(m) needs m >= 0, got {m}")
    rate = _rdp_rate(l, c, tau_g)
    if math.isinf(rate):
        raise AccountingOverflowError("tau_g = 0 gives infinite privacy cost")
    return _b_from_rate(int(m), rate)


def _g_from_rate(alpha: int, p: float, rate: float) -> float:
    terms = []
    for j in range(3, alpha + 1):
        weight = (p ** j) * special.comb(alpha, j, exact=True)
        lower = _b_from_rate(2 * (j // 2), rate)
        upper = _b_from_rate((j + 1) // 2, rate)
        terms.append(weight * math.sqrt(max(lower, 0.0)) * math.sqrt(max(upper, 0.0)))
    return math.fsum(terms)


def g_term(alpha: int, p: float, l: int, c: float, tau_g: float) -> float:
    """G(alpha) = sum_{j=3}^{alpha} p^j C(alpha, j) sqrt(B(2 floor(j/2)) B(ceil(j/2)))"""
    if not 0 <= p <= 1:
        raise ConfigurationError(f"sampling rate must lie in [0, 1], got {p}")
    if alpha < 3:
        raise ConfigurationError(f"G(alpha) needs alpha >= 3, got {alpha}")
    if p == 0:
        return 0.0
    rate = _rdp_rate(l, c, tau_g)
    if math.isinf(rate):
        raise AccountingOverflowError("tau_g = 0 gives infinite privacy cost")
    return _g_from_rate(int(alpha), p, rate)


def _subsampled_from_rate(alpha: int, p: float, rate: float) -> float:
    if p == 0:
        return 0.0
    eps2 = 2.0 * rate
    if eps2 > MAX_EXPONENT:
        raise AccountingOverflowError(f"exp(eps(2)) overflows at eps(2)={eps2:.1f}")
    second_order = min(4.0 * math.expm1(eps2), 2.0 * math.exp(eps2))
    argument = p * p * special.comb(alpha, 2, exact=True) * second_order + 4.0 * _g_from_rate(alpha, p, rate)
    if math.isinf(argument):
        raise AccountingOverflowError(f"log argument overflows at alpha={alpha}")
    if argument < -1:
        raise AccountingError(f"log argument {1 + argument} <= 0 at alpha={alpha}")
    return math.log1p(argument) / (alpha - 1)


def subsampled_rdp(alpha: int, params: PrivacyParams, tau_g: float) -> float:
    """
    eps'(alpha) = 1/(alpha-1) * log(1 + p^2 C(alpha,2) min{4(e^{eps(2)}-1), 2e^{eps(2)}} + 4G(alpha))

    Args:
        alpha: integer order >= 3
        params: supplies l, c and the sampling rate p = lK/N
        tau_g: local noise standard deviation

    Returns:
        Per-release RDP at order alpha
    """
    if int(alpha) != alpha or alpha < 3:
        raise ConfigurationError(f"alpha must be an integer >= 3, got {alpha}")
    rate = _rdp_rate(params.l, params.c, tau_g)
    if math.isinf(rate):
        raise AccountingOverflowError("tau_g = 0 gives infinite privacy cost")
    return _subsampled_from_rate(int(alpha), params.sampling_rate, rate)


# ---------------------------------------------------------------- composition and conversion

def compose_rdp(*values: float) -> float:
    """Sequential composition at a fixed order adds RDP costs"""
    return math.fsum(values)


def rdp_to_dp(rdp: float, alpha: float, delta: float) -> float:
    """(alpha, rdp)-RDP implies (rdp + log(1/delta)/(alpha-1), delta)-DP"""
    if not 0 < delta < 1:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    if alpha <= 1:
        raise ConfigurationError(f"alpha must exceed 1, got {alpha}")
    return rdp + math.log(1.0 / delta) / (alpha - 1)


def total_epsilon(params: PrivacyParams, tau_g: float) -> AccountingReport:
    """
    epsilon = min over alpha in {3..alpha_max} of T eps'(alpha) + log(1/delta)/(alpha-1).

    Orders whose terms overflow are skipped; if all overflow the noise is too
    small for the accounting range.
    """
    if not tau_g > 0:
        raise ConfigurationError(f"tau_g must be positive for accounting, got {tau_g}")
    rate = _rdp_rate(params.l, params.c, tau_g)
    p = params.sampling_rate

    curve: Dict[int, float] = {}
    skipped = []
    best_alpha, best_epsilon = None, math.inf
    for alpha in range(3, params.alpha_max + 1):
        try:
            rdp = _subsampled_from_rate(alpha, p, rate)
        except AccountingOverflowError as e:
            logger.debug(f"⚠️  Skipping alpha={alpha}: {e}")
            skipped.append(alpha)
            continue
        curve[alpha] = rdp
        epsilon = rdp_to_dp(params.T * rdp, alpha, params.delta)
        if epsilon < best_epsilon:
            best_alpha, best_epsilon = alpha, epsilon

    if best_alpha is None:
        raise AccountingError(
            f"noise too small for accounting range: every alpha in 3..{params.alpha_max} overflowed at tau_g={tau_g:.6g}"
        )
    if skipped:
        logger.debug(f"⚠️  {len(skipped)} alpha orders overflowed at tau_g={tau_g:.6g}")

    return AccountingReport(
        epsilon_achieved=best_epsilon,
        alpha_star=best_alpha,
        rdp_curve=curve,
        tau_g=tau_g,
        tau_e=0.0,
        tau_central=tau_g,
        delta=params.delta,
        T=params.T,
        sampling_rate=p,
        skipped_alphas=tuple(skipped),
    )


def local_sampling_report(params: PrivacyParams, tau_g: float) -> AccountingReport:
    """
    Diagnostic only: recompute epsilon with the client-local sampling rate
    p = lK/(N/S). Never used for reported guarantees.
    """
    local = replace(params, N=params.N // params.S, S=1)
    return total_epsilon(local, tau_g)


# ---------------------------------------------------------------- CAPE variance calculus

def classic_gaussian_tau(sensitivity: float, epsilon: float, delta: float) -> float:
    """tau = (sensitivity / epsilon) sqrt(2 log(1.25 / delta))"""
    if not 0 < epsilon <= 1:
        raise ConfigurationError(f"classic Gaussian mechanism needs epsilon in (0, 1], got {epsilon}")
    if not 0 < delta < 1:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    if sensitivity < 0:
        raise ConfigurationError(f"sensitivity must be non-negative, got {sensitivity}")
    return sensitivity / epsilon * math.sqrt(2.0 * math.log(1.25 / delta))


def pooled_tau(N: int, delta: float) -> float:
    """Noise for the pooled mean of N values in [0, 1]: (1/N) sqrt(2 log(1.25/delta))"""
    if N < 1:
        raise ConfigurationError(f"N must be >= 1, got {N}")
    return classic_gaussian_tau(1.0 / N, 1.0, delta)


def conventional_local_tau(tau_central: float, S: int) -> float:
    """Per-client scale without correlated noise: sqrt(S) * tau_central"""
    if S < 1:
        raise ConfigurationError(f"S must be >= 1, got {S}")
    return math.sqrt(S) * tau_central


def matched_local_tau(tau_central: float, S: int) -> float:
    """Per-client scale whose average over S clients has variance tau_central^2"""
    return conventional_local_tau(tau_central, S)


def cape_split(tau_g_central: float, S: int) -> NoiseScales:
    """
    Split a client's noise into local tau_g and correlated tau_e so that
    tau_e^2 + tau_g^2 = S tau_g^2.
    """
    if S < 1:
        raise ConfigurationError(f"S must be >= 1, got {S}")
    return NoiseScales(tau_g=tau_g_central, tau_e=tau_g_central * math.sqrt(S - 1))


# ---------------------------------------------------------------- calibration

def _epsilon_or_inf(params: PrivacyParams, tau_g: float) -> float:
    try:
        return total_epsilon(params, tau_g).epsilon_achieved
    except AccountingError:
        return math.inf


def calibrate_tau(params: PrivacyParams) -> Tuple[NoiseScales, AccountingReport]:
    """
    Smallest tau_g (to 0.1% relative) whose accounted epsilon meets the target.

    Args:
        params: target epsilon (inf for the non-private mode) and mechanism parameters

    Returns:
        CAPE noise scales for params.S clients and the accounting report at the calibrated tau

    Raises:
        CalibrationError: when the target is unreachable inside the expanded bracket
    """
    target = params.epsilon_target
    if math.isinf(target):
        logger.info("🔓 epsilon=inf: non-private mode, no noise")
        return NoiseScales(0.0, 0.0), AccountingReport(
            epsilon_achieved=math.inf, alpha_star=None, rdp_curve={}, tau_g=0.0, tau_e=0.0,
            tau_central=0.0, delta=params.delta, T=params.T, sampling_rate=params.sampling_rate,
        )

    lo, hi = TAU_BRACKET
    expansions = 0
    while _epsilon_or_inf(params, hi) > target:
        if expansions == BRACKET_EXPANSIONS:
            raise CalibrationError(
                f"target epsilon={target} unreachable: epsilon({hi:.6g}) still exceeds it "
                f"(bracket [{lo:.6g}, {hi:.6g}])",
                bracket=(lo, hi),
            )
        hi *= 2.0
        expansions += 1

    if _epsilon_or_inf(params, lo) <= target:
        hi = lo
    else:
        while hi / lo > 1.0 + TAU_RELATIVE_TOLERANCE:
            mid = math.sqrt(lo * hi)
            if _epsilon_or_inf(params, mid) <= target:
                hi = mid
            else:
                lo = mid

    report = total_epsilon(params, hi)
    scales = cape_split(matched_local_tau(hi, params.S), params.S)
    logger.info(
        f"✅ Calibrated tau_central={hi:.6g} for epsilon={target} "
        f"(achieved {report.epsilon_achieved:.6g} at alpha={report.alpha_star})"
    )
    return scales, report.with_scales(scales)
