"""Risk estimators for contrastive tuple losses over a fixed pool.

The class-conditional U-statistic averages the clipped loss over every
valid tuple of a class: ordered anchor/positive pairs times unordered
negative k-subsets, |T_c| = 2 C(N_c+, 2) C(N_c-, k) terms. The overall
empirical risk weights feasible classes by their empirical frequency:

    L_hat = sum_c (N_c+/N) * 1{N_c >= 1} * U(f | c),
    N_c = min(floor(N_c+/2), floor(N_c-/k)).

Every estimator here targets that quantity or its population limit:
exact enumeration, incomplete (Monte Carlo) U-statistics, the decoupled
disjoint-block average underlying the independence argument, the
with-replacement V-statistic, the sub-sampled tuple risk, and a fresh
Monte Carlo draw from the data distribution itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import GaussianSpec, LabeledDataset
from .errors import ConfigError, PreconditionError, SizeError
from .loss import LossSpec, loss_value, scores_from_reps
from .tuples import (DEFAULT_CAP, class_tuple_count, draw_ksubsets,
                     draw_ordered_pairs, TupleSet, REGIME_SUB)


@dataclass(frozen=True)
class Exact:
    """Full enumeration, refused above the term cap."""

    cap: int = DEFAULT_CAP


@dataclass(frozen=True)
class MonteCarlo:
    """Incomplete estimator: num_draws uniform draws per class."""

    num_draws: int
    seed: int = 0

    def __post_init__(self):
        if self.num_draws < 1:
            raise ConfigError("num_draws must be >= 1")


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    estimator: str
    n_terms: int
    std_error: float | None = None
    seed: int | None = None

    def to_json(self) -> dict:
        return {"value": self.value, "estimator": self.estimator,
                "n_terms": self.n_terms, "std_error": self.std_error,
                "seed": self.seed}


_CHUNK = 1 << 16


def _chunked_loss_stats(reps, anchors, positives, negatives, spec):
    """(sum, sumsq, count) of per-tuple losses, evaluated in chunks."""
    total = anchors.shape[0]
    s = sq = 0.0
    for lo in range(0, total, _CHUNK):
        hi = min(total, lo + _CHUNK)
        v = scores_from_reps(reps, anchors[lo:hi], positives[lo:hi],
                             negatives[lo:hi])
        lv = loss_value(spec, v)
        s += float(lv.sum())
        sq += float((lv * lv).sum())
    return s, sq, total


def _std_error(s: float, sq: float, n: int) -> float:
    if n < 2:
        return 0.0
    var = max(0.0, (sq - s * s / n) / (n - 1))
    return math.sqrt(var / n)


def subsampled_risk(model, ds: LabeledDataset, tset: TupleSet,
                    spec: LossSpec) -> RiskEstimate:
    """Mean clipped loss over an i.i.d. sub-sampled tuple set."""
    if tset.regime != REGIME_SUB:
        raise ConfigError(f"expected a {REGIME_SUB} tuple set, got {tset.regime}")
    if tset.m_count == 0:
        raise PreconditionError("empty tuple set")
    reps = model.forward(ds.x)
    s, sq, n = _chunked_loss_stats(reps, tset.anchors, tset.positives,
                                   tset.negatives, spec)
    return RiskEstimate(value=s / n, estimator="subsampled", n_terms=n,
                        std_error=_std_error(s, sq, n))


def _class_setup(ds: LabeledDataset, c: int, k: int):
    if not 0 <= c < ds.num_classes:
        raise ConfigError(f"class {c} out of range")
    pos_idx = ds.class_indices(c)
    neg_idx = ds.out_indices(c)
    return pos_idx, neg_idx, class_tuple_count(len(pos_idx), len(neg_idx), k)


def _exact_class_ustat(reps, pos_idx, neg_idx, k, spec, cap):
    """Mean over all of T_c by rank arithmetic; no (pairs x subsets) blowup."""
    from itertools import combinations

    n_pos, n_neg = len(pos_idx), len(neg_idx)
    count = class_tuple_count(n_pos, n_neg, k)
    if count > cap:
        raise SizeError(count, cap, "exact class U-statistic")
    subs = neg_idx[np.array(list(combinations(range(n_neg), k)), dtype=np.int64)]
    n_subs = subs.shape[0]
    s = sq = 0.0
    # Ordered pairs in lexicographic order, chunked so that the expanded
    # (pairs, subsets) block stays bounded.
    pair_rows = max(1, _CHUNK // max(n_subs, 1))
    pa_all = np.repeat(np.arange(n_pos), n_pos - 1)
    grid = np.tile(np.arange(n_pos), (n_pos, 1))
    pb_all = grid[~np.eye(n_pos, dtype=bool)].reshape(n_pos, n_pos - 1).ravel()
    for lo in range(0, pa_all.shape[0], pair_rows):
        hi = min(pa_all.shape[0], lo + pair_rows)
        m = hi - lo
        anchors = pos_idx[np.repeat(pa_all[lo:hi], n_subs)]
        positives = pos_idx[np.repeat(pb_all[lo:hi], n_subs)]
        negatives = np.tile(subs, (m, 1))
        cs, csq, _ = _chunked_loss_stats(reps, anchors, positives, negatives, spec)
        s += cs
        sq += csq
    return s / count, count


def _mc_class_ustat(reps, pos_idx, neg_idx, k, spec, mode: MonteCarlo):
    rng = np.random.default_rng(mode.seed)
    b = mode.num_draws
    s = sq = 0.0
    for lo in range(0, b, _CHUNK):
        m = min(b, lo + _CHUNK) - lo
        a, p = draw_ordered_pairs(rng, len(pos_idx), m)
        sub = draw_ksubsets(rng, len(neg_idx), k, m)
        cs, csq, _ = _chunked_loss_stats(reps, pos_idx[a], pos_idx[p],
                                         neg_idx[sub], spec)
        s += cs
        sq += csq
    return s / b, sq, b


def ustat_conditional(model, ds: LabeledDataset, c: int, k: int,
                      spec: LossSpec, mode=Exact()) -> RiskEstimate:
    """Class-conditional U-statistic U(f | c); 0 with n_terms 0 if infeasible."""
    pos_idx, neg_idx, count = _class_setup(ds, c, k)
    if count == 0:
        return RiskEstimate(0.0, "ustat_exact" if isinstance(mode, Exact)
                            else "ustat_mc", 0)
    reps = model.forward(ds.x)
    if isinstance(mode, Exact):
        value, n = _exact_class_ustat(reps, pos_idx, neg_idx, k, spec, mode.cap)
        return RiskEstimate(value, "ustat_exact", n)
    value, sq, b = _mc_class_ustat(reps, pos_idx, neg_idx, k, spec, mode)
    return RiskEstimate(value, "ustat_mc", b,
                        std_error=_std_error(value * b, sq, b), seed=mode.seed)


def ustat_overall(model, ds: LabeledDataset, k: int, spec: LossSpec,
                  mode=Exact()) -> RiskEstimate:
    """Frequency-weighted sum of feasible class-conditional U-statistics."""
    if ds.n == 0:
        raise PreconditionError("empty dataset")
    reps = model.forward(ds.x)
    sizes = ds.class_sizes()
    total = 0.0
    n_terms = 0
    var = 0.0
    any_feasible = False
    mc = isinstance(mode, MonteCarlo)
    for c in range(ds.num_classes):
        pos_idx, neg_idx, count = _class_setup(ds, c, k)
        if count == 0:
            continue
        any_feasible = True
        w = sizes[c] / ds.n
        if mc:
            sub_mode = MonteCarlo(mode.num_draws,
                                  seed=np.random.SeedSequence((mode.seed, c))
                                  .generate_state(1)[0])
            val, sq, b = _mc_class_ustat(reps, pos_idx, neg_idx, k, spec, sub_mode)
            se = _std_error(val * b, sq, b)
            var += (w * se) ** 2
            n_terms += b
        else:
            val, n = _exact_class_ustat(reps, pos_idx, neg_idx, k, spec, mode.cap)
            n_terms += n
        total += w * val
    if not any_feasible:
        raise PreconditionError(f"no class admits a valid tuple at k={k}")
    if mc:
        return RiskEstimate(total, "ustat_mc", n_terms,
                            std_error=math.sqrt(var), seed=mode.seed)
    return RiskEstimate(total, "ustat_exact", n_terms)


def decoupled_block_estimate(model, ds: LabeledDataset, c: int, k: int,
                             spec: LossSpec, perm_pos,
                             perm_neg) -> RiskEstimate:
    """Mean loss over the N_c disjoint block tuples of one permutation pair.

    Averaging this quantity over all (pi, pi_bar) pairs reproduces the
    class-conditional U-statistic exactly; a single pair is the
    independent-blocks estimator used by the concentration argument.
    """

    pos_idx, neg_idx, count = _class_setup(ds, c, k)
    n_pos, n_neg = len(pos_idx), len(neg_idx)
    n_c = min(n_pos // 2, n_neg // k)
    if n_c == 0:
        return RiskEstimate(0.0, "ustat_decoupled", 0)
    perm_pos = np.asarray(perm_pos, dtype=np.int64)
    perm_neg = np.asarray(perm_neg, dtype=np.int64)
    if sorted(perm_pos.tolist()) != list(range(n_pos)):
        raise ConfigError(f"perm_pos is not a permutation of {n_pos} items")
    if sorted(perm_neg.tolist()) != list(range(n_neg)):
        raise ConfigError(f"perm_neg is not a permutation of {n_neg} items")
    pp = pos_idx[perm_pos]
    nn = neg_idx[perm_neg]
    anchors = pp[0:2 * n_c:2]
    positives = pp[1:2 * n_c:2]
    negatives = np.sort(nn[:n_c * k].reshape(n_c, k), axis=1)
    reps = model.forward(ds.x)
    s, _, n = _chunked_loss_stats(reps, anchors, positives, negatives, spec)
    return RiskEstimate(s / n, "ustat_decoupled", n)


def _vstat_class_count(n_pos: int, n_neg: int, k: int) -> int:
    if n_pos < 1 or n_neg < 1:
        return 0
    return n_pos * n_pos * n_neg**k


def _exact_class_vstat(reps, pos_idx, neg_idx, k, spec, cap):
    """Mean over all index combinations with repetition, by rank unpacking."""
    n_pos, n_neg = len(pos_idx), len(neg_idx)
    count = _vstat_class_count(n_pos, n_neg, k)
    if count > cap:
        raise SizeError(count, cap, "exact class V-statistic")
    neg_total = n_neg**k
    s = 0.0
    for lo in range(0, count, _CHUNK):
        t = np.arange(lo, min(count, lo + _CHUNK), dtype=np.int64)
        pair, rem = divmod(t, neg_total)
        j1, j2 = divmod(pair, n_pos)
        digits = np.empty((t.shape[0], k), dtype=np.int64)
        for pos in range(k - 1, -1, -1):
            rem, d = divmod(rem, n_neg)
            digits[:, pos] = d
        v = scores_from_reps(reps, pos_idx[j1], pos_idx[j2], neg_idx[digits])
        s += float(loss_value(spec, v).sum())
    return s / count, count


def vstat_overall(model, ds: LabeledDataset, k: int, spec: LossSpec,
                  mode=Exact()) -> RiskEstimate:
    """V-statistic analogue: anchors may equal positives, negatives repeat.

    A class only needs one in-class and one out-of-class sample to
    contribute, so pools infeasible for the U-statistic can still have a
    nonzero V-statistic. The gap to the U-statistic is O(1/n).
    """

    if ds.n == 0:
        raise PreconditionError("empty dataset")
    reps = model.forward(ds.x)
    sizes = ds.class_sizes()
    total = 0.0
    n_terms = 0
    var = 0.0
    any_feasible = False
    mc = isinstance(mode, MonteCarlo)
    rng = np.random.default_rng(mode.seed if mc else 0)
    for c in range(ds.num_classes):
        pos_idx = ds.class_indices(c)
        neg_idx = ds.out_indices(c)
        count = _vstat_class_count(len(pos_idx), len(neg_idx), k)
        if count == 0:
            continue
        any_feasible = True
        w = sizes[c] / ds.n
        if mc:
            b = mode.num_draws
            j1 = rng.integers(0, len(pos_idx), size=b)
            j2 = rng.integers(0, len(pos_idx), size=b)
            dig = rng.integers(0, len(neg_idx), size=(b, k))
            s, sq, _ = _chunked_loss_stats(reps, pos_idx[j1], pos_idx[j2],
                                           neg_idx[dig], spec)
            val = s / b
            var += (w * _std_error(s, sq, b)) ** 2
            n_terms += b
        else:
            val, n = _exact_class_vstat(reps, pos_idx, neg_idx, k, spec, mode.cap)
            n_terms += n
        total += w * val
    if not any_feasible:
        raise PreconditionError("no class has both an in-class and an "
                                "out-of-class sample")
    if mc:
        return RiskEstimate(total, "vstat", n_terms, std_error=math.sqrt(var),
                            seed=mode.seed)
    return RiskEstimate(total, "vstat", n_terms)


def population_risk_mc(model, gspec: GaussianSpec, k: int, spec: LossSpec,
                       num_draws: int, seed: int) -> RiskEstimate:
    """Monte Carlo population risk under a Gaussian mixture.

    Each draw picks a class c from the priors, an anchor and positive
    from component c, and k negative classes by rejection (z from the
    priors until z != c, i.e. probabilities rho(z)/(1 - rho(c))), each
    with its own fresh sample.
    """

    if gspec.num_classes < 2:
        raise PreconditionError("population risk needs at least 2 classes")
    if num_draws < 1:
        raise ConfigError("num_draws must be >= 1")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    priors = gspec.prior_vector()
    dim = gspec.dim
    chunk = max(1, (1 << 21) // ((k + 2) * dim))
    s = sq = 0.0
    done = 0
    while done < num_draws:
        m = min(chunk, num_draws - done)
        cls = rng.choice(gspec.num_classes, size=m, p=priors)
        negc = rng.choice(gspec.num_classes, size=(m, k), p=priors)
        bad = negc == cls[:, None]
        while bad.any():
            negc[bad] = rng.choice(gspec.num_classes, size=int(bad.sum()),
                                   p=priors)
            bad = negc == cls[:, None]
        xa = gspec.centers[cls] + gspec.sigma * rng.standard_normal((m, dim))
        xp = gspec.centers[cls] + gspec.sigma * rng.standard_normal((m, dim))
        xn = gspec.centers[negc] + gspec.sigma * rng.standard_normal((m, k, dim))
        reps = model.forward(np.concatenate(
            [xa, xp, xn.reshape(m * k, dim)], axis=0))
        ra, rp = reps[:m], reps[m:2 * m]
        rn = reps[2 * m:].reshape(m, k, -1)
        v = np.einsum("bd,bkd->bk", ra, rp[:, None, :] - rn)
        lv = loss_value(spec, v)
        s += float(lv.sum())
        sq += float((lv * lv).sum())
        done += m
    return RiskEstimate(s / num_draws, "population_mc", num_draws,
                        std_error=_std_error(s, sq, num_draws), seed=seed)
