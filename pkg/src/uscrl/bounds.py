"""Generalization-bound calculators with explicit constants.

All calculators take plain numbers and return a structured report with
named additive terms, so every constant in the bound statements is
visible and testable. The effective sample size

    N_tilde = N * min(rho_min / 2, (1 - rho_max) / k)

controls every rate; the class-count term switches from the rho_min
branch to the k branch exactly at k = 2(|C| - 1) under uniform priors.
A report is flagged vacuous when its total meets or exceeds the loss
bound M, since the excess risk of an M-clipped loss can never be larger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, PreconditionError
from .loss import LossSpec, loss_value, scores_from_reps

SQRT2 = math.sqrt(2.0)

# Constant inventory per bound statement. "log_mult" is the factor in
# front of |C| (or 1 for the tuple-count confidence term) inside the log.
THEOREM_CONSTANTS = {
    "basic": {
        "complexity_coef": 8.0, "conf_coef": 44.0, "conf_log_mult": 8.0,
        "lambda_mult": 8.0,
    },
    "subsampled": {
        "rad_coef": 4.0, "complexity_coef": 8.0,
        "mc_coef": 6.0, "mc_log_mult": 8.0,
        "conf_coef": 44.0, "conf_log_mult": 16.0, "lambda_mult": 16.0,
    },
    "basic_linear": {
        "small_coef": 32.0, "complexity_coef": 3072.0 * SQRT2,
        "phi_inner_a": 44.0, "phi_inner_b": 7.0,
        "conf_coef": 44.0, "conf_log_mult": 8.0, "lambda_mult": 8.0,
        "k_small": 4.0, "k_coef": 384.0 * SQRT2,
    },
    "basic_nn": {
        "small_coef": 32.0, "complexity_coef": 192.0, "log_inner": 12.0,
        "conf_coef": 44.0, "conf_log_mult": 8.0, "lambda_mult": 8.0,
        "k_small": 4.0, "k_coef": 24.0,
    },
    "subsampled_linear": {
        "mc_small_coef": 4.0, "small_coef": 32.0,
        "complexity_coef": 3072.0 * SQRT2,
        "phi_inner_a": 44.0, "phi_inner_b": 7.0,
        "mc_coef": 6.0, "mc_log_mult": 8.0,
        "conf_coef": 44.0, "conf_log_mult": 16.0, "lambda_mult": 16.0,
    },
    "subsampled_nn": {
        "mc_small_coef": 4.0, "small_coef": 32.0,
        "complexity_coef": 24.0, "log_inner": 12.0,
        "mc_coef": 6.0, "mc_log_mult": 8.0,
        "conf_coef": 44.0, "conf_log_mult": 16.0, "lambda_mult": 16.0,
    },
    "chernoff": {"factor": 3.0, "default_mult": 2.0},
}

THEOREM_IDS = tuple(t for t in THEOREM_CONSTANTS if t != "chernoff")


@dataclass(frozen=True)
class BoundInputs:
    """Shared statistics feeding every bound calculator.

    ``rho`` holds the class priors (or empirical frequencies); ``class_k``
    is the per-class complexity constant K_{F,c} for the generic theorems
    (scalar broadcasts); ``m_tuples`` is the sub-sampled tuple count for
    the sub-sampled variants; ``family_params`` carries the model-class
    parameters used by the linear and neural-network instantiations.
    """

    n: int
    rho: np.ndarray
    k: int
    delta: float
    loss_bound: float
    class_k: np.ndarray | float | None = None
    m_tuples: int | None = None
    family_params: dict = field(default_factory=dict)

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float64)
        if rho.ndim != 1 or rho.shape[0] < 1:
            raise ConfigError("rho must be a 1-d array of class priors")
        if np.any(rho <= 0):
            raise ConfigError("class priors must be strictly positive")
        if abs(rho.sum() - 1.0) > 1e-9:
            raise ConfigError(f"class priors sum to {rho.sum()}, expected 1")
        object.__setattr__(self, "rho", rho)
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.loss_bound <= 0 or not math.isfinite(self.loss_bound):
            raise ConfigError("loss_bound must be positive and finite")
        if self.m_tuples is not None and self.m_tuples < 1:
            raise ConfigError("m_tuples must be >= 1")

    @property
    def num_classes(self) -> int:
        return self.rho.shape[0]


@dataclass(frozen=True)
class BoundReport:
    theorem: str
    n_tilde: float
    lam: float
    terms: tuple
    total: float
    flags: dict

    def to_json(self) -> dict:
        return {"theorem": self.theorem, "n_tilde": self.n_tilde,
                "lambda": self.lam, "terms": dict(self.terms),
                "total": self.total, "flags": dict(self.flags)}


def effective_n(n: int, rho, k: int) -> float:
    """N_tilde = N min(rho_min/2, (1-rho_max)/k); needs at least 2 classes."""
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape[0] < 2:
        raise PreconditionError(
            "effective sample size requires at least 2 classes")
    if np.any(rho <= 0):
        raise ConfigError("class priors must be strictly positive")
    if k < 1:
        raise ConfigError("k must be >= 1")
    return float(n * min(rho.min() / 2.0, (1.0 - rho.max()) / k))


def chernoff_lambda(n: int, rho_min: float, num_classes: int, delta: float,
                    multiplier: float = 2.0) -> float:
    """Lambda = sqrt(3 ln(mult |C| / delta) / (N rho_min)).

    The class-count multiplier inside the log is a parameter because
    different bound statements budget their failure probability over the
    classes differently (2|C|, 4|C|, 8|C|, 16|C|).
    """

    if rho_min <= 0:
        raise ConfigError("rho_min must be positive")
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    if n < 1 or num_classes < 1:
        raise ConfigError("n and num_classes must be >= 1")
    factor = THEOREM_CONSTANTS["chernoff"]["factor"]
    return math.sqrt(factor * math.log(multiplier * num_classes / delta)
                     / (n * rho_min))


def _finish(theorem: str, inputs: BoundInputs, n_tilde: float,
            terms: list) -> BoundReport:
    const = THEOREM_CONSTANTS[theorem]
    total = float(sum(v for _, v in terms))
    lam = chernoff_lambda(inputs.n, float(inputs.rho.min()),
                          inputs.num_classes, inputs.delta,
                          multiplier=const["lambda_mult"])
    flags = {"vacuous": total >= inputs.loss_bound, "lambda_ge_1": lam >= 1.0}
    return BoundReport(theorem=theorem, n_tilde=n_tilde, lam=lam,
                       terms=tuple(terms), total=total, flags=flags)


def _class_k_vector(inputs: BoundInputs) -> np.ndarray:
    if inputs.class_k is None:
        raise ConfigError("class_k is required for this theorem")
    ck = np.asarray(inputs.class_k, dtype=np.float64)
    if ck.ndim == 0:
        ck = np.full(inputs.num_classes, float(ck))
    if ck.shape != (inputs.num_classes,):
        raise ConfigError("class_k must be scalar or one value per class")
    if np.any(ck < 0):
        raise ConfigError("class_k values must be nonnegative")
    return ck


def basic_bound(inputs: BoundInputs) -> BoundReport:
    """Excess-risk bound for the all-tuples empirical minimizer."""
    c = THEOREM_CONSTANTS["basic"]
    nt = effective_n(inputs.n, inputs.rho, inputs.k)
    ck = _class_k_vector(inputs)
    complexity = (c["complexity_coef"] / math.sqrt(nt)) * float(inputs.rho @ ck)
    conf = c["conf_coef"] * inputs.loss_bound * math.sqrt(
        math.log(c["conf_log_mult"] * inputs.num_classes / inputs.delta)
        / (2.0 * nt))
    return _finish("basic", inputs, nt,
                   [("complexity", complexity), ("confidence", conf)])


def subsampled_bound(inputs: BoundInputs, emp_rad: float) -> BoundReport:
    """Excess-risk bound for the sub-sampled minimizer.

    ``emp_rad`` is an empirical Rademacher complexity of the loss class
    on the sub-sampled tuples (any upper bound keeps validity).
    """

    c = THEOREM_CONSTANTS["subsampled"]
    if inputs.m_tuples is None:
        raise ConfigError("m_tuples is required for the sub-sampled bound")
    if emp_rad < 0:
        raise ConfigError("empirical Rademacher complexity must be >= 0")
    nt = effective_n(inputs.n, inputs.rho, inputs.k)
    ck = _class_k_vector(inputs)
    m = inputs.loss_bound
    terms = [
        ("rademacher", c["rad_coef"] * emp_rad),
        ("complexity",
         (c["complexity_coef"] / math.sqrt(nt)) * float(inputs.rho @ ck)),
        ("mc", c["mc_coef"] * m * math.sqrt(
            math.log(c["mc_log_mult"] / inputs.delta)
            / (2.0 * inputs.m_tuples))),
        ("confidence", c["conf_coef"] * m * math.sqrt(
            math.log(c["conf_log_mult"] * inputs.num_classes / inputs.delta)
            / (2.0 * nt))),
    ]
    return _finish("subsampled", inputs, nt, terms)


def _require(params: dict, names) -> list:
    missing = [x for x in names if x not in params]
    if missing:
        raise ConfigError(f"family_params missing {missing}")
    vals = [params[x] for x in names]
    for name, v in zip(names, vals):
        if isinstance(v, (int, float)) and v <= 0:
            raise ConfigError(f"family_params[{name!r}] must be positive")
    return vals


def linear_phi(n: int, k: int, d: int, loss_bound: float, eta: float,
               s: float, a: float, b: float) -> float:
    """Logarithmic factor of the linear-class complexity term."""
    inner_a = THEOREM_CONSTANTS["basic_linear"]["phi_inner_a"]
    inner_b = THEOREM_CONSTANTS["basic_linear"]["phi_inner_b"]
    return (math.log((inner_a * n * eta * s * a * b * b + inner_b)
                     * n * (k + 2) * d)
            * math.log(n * loss_bound))


def linear_class_K(eta: float, s: float, a: float, b: float, n: int, k: int,
                   d: int, loss_bound: float) -> float:
    """Complexity constant of the norm-capped linear class."""
    c = THEOREM_CONSTANTS["basic_linear"]
    phi = linear_phi(n, k, d, loss_bound, eta, s, a, b)
    return c["k_small"] / n + c["k_coef"] * eta * s * a * b * b * phi


def nn_log_factor(n: int, eta: float, b: float, caps, xis) -> float:
    """ln(12 eta N L b^2 prod xi_l^2 s_l^2 + 1) for a capped network."""
    caps = np.asarray(caps, dtype=np.float64)
    xis = np.asarray(xis, dtype=np.float64)
    gain = float(np.prod(xis * xis * caps * caps))
    depth = caps.shape[0]
    inner = THEOREM_CONSTANTS["basic_nn"]["log_inner"]
    return math.log(inner * eta * n * depth * b * b * gain + 1.0)


def nn_class_K(loss_bound: float, neuron_count: int, eta: float, n: int,
               b: float, caps, xis) -> float:
    """Complexity constant of the spectrally-capped network class.

    ``neuron_count`` is W = sum of layer widths excluding the input layer.
    """

    c = THEOREM_CONSTANTS["basic_nn"]
    logf = nn_log_factor(n, eta, b, caps, xis)
    return c["k_small"] / n + c["k_coef"] * loss_bound * math.sqrt(
        neuron_count * logf)


def basic_linear_bound(inputs: BoundInputs) -> BoundReport:
    c = THEOREM_CONSTANTS["basic_linear"]
    eta, s, a, b, d = _require(inputs.family_params,
                               ["eta", "s", "a", "b", "d"])
    nt = effective_n(inputs.n, inputs.rho, inputs.k)
    m = inputs.loss_bound
    phi = linear_phi(inputs.n, inputs.k, int(d), m, eta, s, a, b)
    terms = [
        ("small", c["small_coef"] / (inputs.n * math.sqrt(nt))),
        ("complexity",
         c["complexity_coef"] * eta * s * a * b * b * phi / math.sqrt(nt)),
        ("confidence", c["conf_coef"] * m * math.sqrt(
            math.log(c["conf_log_mult"] * inputs.num_classes / inputs.delta)
            / (2.0 * nt))),
    ]
    return _finish("basic_linear", inputs, nt, terms)


def basic_nn_bound(inputs: BoundInputs) -> BoundReport:
    c = THEOREM_CONSTANTS["basic_nn"]
    eta, b = _require(inputs.family_params, ["eta", "b"])
    caps, xis = _require(inputs.family_params, ["caps", "xis"])
    widths = _require(inputs.family_params, ["widths"])[0]  # d_1..d_L
    neuron_count = int(np.sum(widths))
    nt = effective_n(inputs.n, inputs.rho, inputs.k)
    m = inputs.loss_bound
    logf = nn_log_factor(inputs.n, eta, b, caps, xis)
    terms = [
        ("small", c["small_coef"] / (inputs.n * math.sqrt(nt))),
        ("complexity", c["complexity_coef"] * m * math.sqrt(
            neuron_count / nt * logf)),
        ("confidence", c["conf_coef"] * m * math.sqrt(
            math.log(c["conf_log_mult"] * inputs.num_classes / inputs.delta)
            / (2.0 * nt))),
    ]
    return _finish("basic_nn", inputs, nt, terms)


def subsampled_linear_bound(inputs: BoundInputs) -> BoundReport:
    c = THEOREM_CONSTANTS["subsampled_linear"]
    if inputs.m_tuples is None:
        raise ConfigError("m_tuples is required for the sub-sampled bound")
    eta, s, a, b, d = _require(inputs.family_params,
                               ["eta", "s", "a", "b", "d"])
    nt = effective_n(inputs.n, inputs.rho, inputs.k)
    m = inputs.loss_bound
    mt = inputs.m_tuples
    phi = linear_phi(inputs.n, inputs.k, int(d), m, eta, s, a, b)
    terms = [
        ("mc_small", c["mc_small_coef"] / mt),
        ("small", c["small_coef"] / (inputs.n * math.sqrt(nt))),
        ("complexity", c["complexity_coef"] * eta * s * a * b * b * phi
         * (1.0 / math.sqrt(mt) + 1.0 / math.sqrt(nt))),
        ("mc", c["mc_coef"] * m * math.sqrt(
            math.log(c["mc_log_mult"] / inputs.delta) / (2.0 * mt))),
        ("confidence", c["conf_coef"] * m * math.sqrt(
            math.log(c["conf_log_mult"] * inputs.num_classes / inputs.delta)
            / (2.0 * nt))),
    ]
    return _finish("subsampled_linear", inputs, nt, terms)


def subsampled_nn_bound(inputs: BoundInputs) -> BoundReport:
    c = THEOREM_CONSTANTS["subsampled_nn"]
    if inputs.m_tuples is None:
        raise ConfigError("m_tuples is required for the sub-sampled bound")
    eta, b = _require(inputs.family_params, ["eta", "b"])
    caps, xis = _require(inputs.family_params, ["caps", "xis"])
    widths = _require(inputs.family_params, ["widths"])[0]
    neuron_count = int(np.sum(widths))
    nt = effective_n(inputs.n, inputs.rho, inputs.k)
    m = inputs.loss_bound
    mt = inputs.m_tuples
    logf = nn_log_factor(inputs.n, eta, b, caps, xis)
    terms = [
        ("mc_small", c["mc_small_coef"] / mt),
        ("small", c["small_coef"] / (inputs.n * math.sqrt(nt))),
        ("complexity", c["complexity_coef"] * m
         * math.sqrt(neuron_count * logf)
         * (1.0 / math.sqrt(nt) + 1.0 / math.sqrt(mt))),
        ("mc", c["mc_coef"] * m * math.sqrt(
            math.log(c["mc_log_mult"] / inputs.delta) / (2.0 * mt))),
        ("confidence", c["conf_coef"] * m * math.sqrt(
            math.log(c["conf_log_mult"] * inputs.num_classes / inputs.delta)
            / (2.0 * nt))),
    ]
    return _finish("subsampled_nn", inputs, nt, terms)


_THEOREM_FUNCS = {
    "basic": lambda inp: basic_bound(inp),
    "subsampled": None,  # needs emp_rad, handled by evaluate_theorem
    "basic_linear": lambda inp: basic_linear_bound(inp),
    "basic_nn": lambda inp: basic_nn_bound(inp),
    "subsampled_linear": lambda inp: subsampled_linear_bound(inp),
    "subsampled_nn": lambda inp: subsampled_nn_bound(inp),
}


def evaluate_theorem(theorem: str, inputs: BoundInputs,
                     emp_rad: float | None = None) -> BoundReport:
    """Dispatch a bound statement by id."""
    if theorem not in THEOREM_IDS:
        raise ConfigError(
            f"unknown theorem {theorem!r}; expected one of {sorted(THEOREM_IDS)}")
    if theorem == "subsampled":
        if emp_rad is None:
            raise ConfigError("the sub-sampled bound needs emp_rad")
        return subsampled_bound(inputs, emp_rad)
    return _THEOREM_FUNCS[theorem](inputs)


def _adaptive_simpson(f, a: float, b: float, rel_tol: float = 1e-6,
                      max_depth: int = 40) -> float:
    """Adaptive Simpson quadrature with the standard 1/15 error estimate."""
    if b <= a:
        return 0.0

    def simpson(x0, x2, f0, f1, f2):
        return (x2 - x0) / 6.0 * (f0 + 4.0 * f1 + f2)

    def recurse(x0, x2, f0, f1, f2, whole, tol, depth):
        xm = 0.5 * (x0 + x2)
        xl = 0.5 * (x0 + xm)
        xr = 0.5 * (xm + x2)
        fl, fr = f(xl), f(xr)
        left = simpson(x0, xm, f0, fl, f1)
        right = simpson(xm, x2, f1, fr, f2)
        err = left + right - whole
        if depth >= max_depth or abs(err) <= 15.0 * tol * max(abs(left + right), 1e-300):
            return left + right + err / 15.0
        return (recurse(x0, xm, f0, fl, f1, left, tol / 2.0, depth + 1)
                + recurse(xm, x2, f1, fr, f2, right, tol / 2.0, depth + 1))

    fa, fb = f(a), f(b)
    fm = f(0.5 * (a + b))
    whole = simpson(a, b, fa, fm, fb)
    return recurse(a, b, fa, fm, fb, whole, rel_tol, 0)


def dudley_bound(log_cover, n: int, b_sup: float,
                 alpha_grid=None) -> float:
    """inf_alpha [4 alpha + 12 int_alpha^B sqrt(log_cover(eps)/n) d eps].

    ``log_cover(eps)`` must upper-bound ln(2 N(eps)) for the function
    class on the n evaluation points; ``b_sup`` is the sup of the
    empirical L2 radius B. The infimum is taken over a log-spaced alpha
    grid (32 points spanning [B*1e-6, B] by default) with the integral
    evaluated by adaptive Simpson quadrature.
    """

    if n < 1:
        raise ConfigError("n must be >= 1")
    if b_sup <= 0:
        raise ConfigError("b_sup must be positive")
    if alpha_grid is None:
        alpha_grid = np.geomspace(b_sup * 1e-6, b_sup, 32)
    else:
        alpha_grid = np.asarray(alpha_grid, dtype=np.float64)
        if np.any(alpha_grid <= 0) or np.any(alpha_grid > b_sup):
            raise ConfigError("alpha grid must lie in (0, b_sup]")

    def integrand(eps):
        val = log_cover(eps)
        if val < 0:
            raise NumericError(f"log_cover({eps}) = {val} is negative")
        return math.sqrt(val / n)

    best = math.inf
    # Integrate once over [alpha_min, B] in grid segments and reuse the
    # pieces: the integral from alpha_i to B is a suffix sum.
    grid = np.sort(alpha_grid)
    points = grid if grid[-1] >= b_sup else np.append(grid, b_sup)
    segs = [_adaptive_simpson(integrand, float(lo), float(hi))
            for lo, hi in zip(points[:-1], points[1:])]
    suffix = np.concatenate([np.cumsum(segs[::-1])[::-1], [0.0]])
    for alpha, tail in zip(grid, suffix[:grid.shape[0]]):
        best = min(best, 4.0 * float(alpha) + 12.0 * float(tail))
    return best


def empirical_rademacher_probe(candidates, ds, tset, spec: LossSpec,
                               num_sigma: int = 256, seed: int = 0) -> float:
    """Monte Carlo lower estimate of the empirical Rademacher complexity.

    Maximizes |mean_j sigma_j l_f(T_j)| over a finite candidate list only,
    so the value lower-bounds the true supremum over the whole class.
    Suitable for sanity checks against upper bounds, never as a
    certified upper bound itself.
    """

    if num_sigma < 1:
        raise ConfigError("num_sigma must be >= 1")
    if tset.m_count == 0:
        raise PreconditionError("empty tuple set")
    if not candidates:
        raise ConfigError("need at least one candidate model")
    n = tset.m_count
    loss_rows = np.empty((len(candidates), n))
    for i, model in enumerate(candidates):
        reps = model.forward(ds.x)
        v = scores_from_reps(reps, tset.anchors, tset.positives, tset.negatives)
        loss_rows[i] = loss_value(spec, v)
    rng = np.random.default_rng(seed)
    sigmas = rng.integers(0, 2, size=(num_sigma, n)) * 2 - 1
    corr = loss_rows @ sigmas.T / n  # (candidates, num_sigma)
    return float(np.abs(corr).max(axis=0).mean())
