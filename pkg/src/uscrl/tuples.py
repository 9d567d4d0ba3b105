"""Contrastive tuple construction over a fixed labeled pool.

A tuple is (anchor, positive, negatives): anchor and positive share a
class, the k negatives are distinct samples from other classes. Negatives
are an unordered k-subset and are always stored sorted by index. Three
regimes produce tuple sets:

* ``iid_disjoint``: greedy pass over per-class permutations, yielding
  N_c = min(floor(N_c+/2), floor(N_c-/k)) pairwise disjoint tuples per
  class; distinct tuples share no sample, so they are independent draws
  when the pool is i.i.d.
* ``subsampled``: M independent draws from the natural tuple measure,
  which picks a feasible class with probability proportional to N_c+ and
  then a uniform ordered anchor/positive pair and uniform negative
  k-subset within the class.
* ``all_tuples``: the complete enumeration, guarded by a term cap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .dataset import LabeledDataset
from .errors import ConfigError, PreconditionError, SizeError

REGIME_IID = "iid_disjoint"
REGIME_SUB = "subsampled"
REGIME_ALL = "all_tuples"
REGIMES = (REGIME_IID, REGIME_SUB, REGIME_ALL)

DEFAULT_CAP = 10**6


class Tuple(NamedTuple):
    anchor: int
    positive: int
    negatives: tuple
    class_id: int


@dataclass(frozen=True)
class TupleSet:
    """Columnar batch of tuples plus the regime that produced it."""

    regime: str
    k: int
    anchors: np.ndarray    # (M,) int64 dataset indices
    positives: np.ndarray  # (M,)
    negatives: np.ndarray  # (M, k), each row sorted ascending
    class_ids: np.ndarray  # (M,)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        for name in ("anchors", "positives", "negatives", "class_ids"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=np.int64))
        m = self.anchors.shape[0]
        if self.positives.shape != (m,) or self.class_ids.shape != (m,):
            raise ConfigError("tuple column lengths disagree")
        if self.negatives.shape != (m, self.k):
            raise ConfigError(
                f"negatives has shape {self.negatives.shape}, expected ({m}, {self.k})")

    @property
    def m_count(self) -> int:
        return self.anchors.shape[0]

    def __len__(self) -> int:
        return self.m_count

    def __iter__(self) -> Iterator[Tuple]:
        for i in range(self.m_count):
            yield self[i]

    def __getitem__(self, i: int) -> Tuple:
        return Tuple(int(self.anchors[i]), int(self.positives[i]),
                     tuple(int(v) for v in self.negatives[i]),
                     int(self.class_ids[i]))

    def select(self, idx) -> "TupleSet":
        idx = np.asarray(idx)
        return TupleSet(self.regime, self.k, self.anchors[idx],
                        self.positives[idx], self.negatives[idx],
                        self.class_ids[idx])

    def validate(self, ds: LabeledDataset) -> None:
        """Check every tuple invariant against the pool; raises on failure."""
        a, p, neg, cid = self.anchors, self.positives, self.negatives, self.class_ids
        if self.m_count == 0:
            return
        lo = min(a.min(), p.min(), neg.min())
        hi = max(a.max(), p.max(), neg.max())
        if lo < 0 or hi >= ds.n:
            raise PreconditionError(f"tuple index {lo if lo < 0 else hi} out of range")
        if np.any(a == p):
            raise PreconditionError("anchor equals positive")
        if np.any(ds.y[a] != cid) or np.any(ds.y[p] != cid):
            raise PreconditionError("anchor/positive label mismatch")
        if np.any(ds.y[neg] == cid[:, None]):
            raise PreconditionError("negative shares the tuple class")
        if np.any(np.diff(neg, axis=1) <= 0) and self.k > 1:
            raise PreconditionError("negatives must be sorted distinct")

    def to_jsonl(self) -> str:
        lines = []
        for t in self:
            lines.append(json.dumps({"class": t.class_id, "anchor": t.anchor,
                                     "positive": t.positive,
                                     "negatives": list(t.negatives)}))
        return "\n".join(lines) + ("\n" if lines else "")


def tuple_set_from_jsonl(lines: Iterable[str] | str, regime: str,
                         k: int | None = None) -> TupleSet:
    if isinstance(lines, str):
        lines = lines.splitlines()
    rows = [json.loads(s) for s in lines if s.strip()]
    if k is None:
        if not rows:
            raise ConfigError("cannot infer k from an empty tuple file")
        k = len(rows[0]["negatives"])
    m = len(rows)
    anchors = np.array([r["anchor"] for r in rows], dtype=np.int64)
    positives = np.array([r["positive"] for r in rows], dtype=np.int64)
    class_ids = np.array([r["class"] for r in rows], dtype=np.int64)
    negatives = np.zeros((m, k), dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r["negatives"]) != k:
            raise ConfigError(f"tuple line {i}: expected {k} negatives")
        negatives[i] = np.sort(np.asarray(r["negatives"], dtype=np.int64))
    return TupleSet(regime, k, anchors, positives, negatives, class_ids)


def _empty_set(regime: str, k: int) -> TupleSet:
    z = np.zeros(0, dtype=np.int64)
    return TupleSet(regime, k, z, z, np.zeros((0, k), dtype=np.int64), z)


def class_tuple_count(n_pos: int, n_neg: int, k: int) -> int:
    """|T_c| = 2 * C(N_c+, 2) * C(N_c-, k): ordered pairs, unordered subsets."""
    return n_pos * (n_pos - 1) * comb(n_neg, k)


def count_all_tuples(ds: LabeledDataset, k: int) -> tuple[int, list[int]]:
    """Exact per-class and total tuple counts (arbitrary precision ints)."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    sizes = ds.class_sizes()
    per_class = [class_tuple_count(int(s), ds.n - int(s), k) for s in sizes]
    return sum(per_class), per_class


def tuple_mass(ds: LabeledDataset, k: int, t: Tuple) -> float:
    """Probability mass of one tuple under the natural tuple measure.

    Equal to (N_c+/N) / |T_c| for the tuple's class. Summing over the
    whole enumeration gives sum_c rho_hat(c) over feasible classes.
    """

    c = t.class_id
    n_pos = int(ds.class_sizes()[c])
    n_neg = ds.n - n_pos
    cnt = class_tuple_count(n_pos, n_neg, k)
    if cnt == 0:
        raise PreconditionError(f"class {c} admits no valid tuple at k={k}")
    return (n_pos / ds.n) / cnt


def greedy_iid_tuples(ds: LabeledDataset, k: int,
                      perms: dict | None = None,
                      seed: int | None = None) -> TupleSet:
    """Disjoint tuples from per-class permutation passes.

    Each class contributes N_c = min(floor(N_c+/2), floor(N_c-/k)) tuples:
    consecutive permuted in-class samples become (anchor, positive) pairs
    and consecutive permuted out-of-class samples fill the negative blocks.
    ``perms`` maps class id to a (pi_pos, pi_neg) pair of position
    permutations; classes not listed use the identity. With ``perms`` None
    and a seed given, uniform permutations are drawn per class.
    """

    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed) if seed is not None else None
    anchors, positives, negs, cids = [], [], [], []
    for c in range(ds.num_classes):
        pos_idx = ds.class_indices(c)
        neg_idx = ds.out_indices(c)
        n_pos, n_neg = len(pos_idx), len(neg_idx)
        n_c = min(n_pos // 2, n_neg // k)
        if n_c == 0:
            continue
        if perms is not None and c in perms:
            pi, pibar = perms[c]
            pi = np.asarray(pi, dtype=np.int64)
            pibar = np.asarray(pibar, dtype=np.int64)
            if sorted(pi.tolist()) != list(range(n_pos)):
                raise ConfigError(f"class {c}: pi is not a permutation of {n_pos} items")
            if sorted(pibar.tolist()) != list(range(n_neg)):
                raise ConfigError(f"class {c}: pi_bar is not a permutation of {n_neg} items")
        elif perms is None and rng is not None:
            pi = rng.permutation(n_pos)
            pibar = rng.permutation(n_neg)
        else:
            pi = np.arange(n_pos)
            pibar = np.arange(n_neg)
        pos_perm = pos_idx[pi]
        neg_perm = neg_idx[pibar]
        anchors.append(pos_perm[0:2 * n_c:2])
        positives.append(pos_perm[1:2 * n_c:2])
        negs.append(np.sort(neg_perm[:n_c * k].reshape(n_c, k), axis=1))
        cids.append(np.full(n_c, c, dtype=np.int64))
    if not anchors:
        return _empty_set(REGIME_IID, k)
    return TupleSet(REGIME_IID, k,
                    np.concatenate(anchors), np.concatenate(positives),
                    np.concatenate(negs), np.concatenate(cids))


def disjoint_tuples(ds: LabeledDataset, k: int, n: int, seed: int) -> TupleSet:
    """n valid tuples sharing no sample index, drawn seeded at random.

    Unlike the per-class passes of greedy_iid_tuples, disjointness here is
    global: every tuple consumes 2 fresh in-class and k fresh out-of-class
    samples, so the set touches exactly n * (k + 2) distinct samples. Each
    tuple's class is drawn proportionally to the remaining in-class count
    among classes that can still afford a full tuple, and its samples are
    uniform over the unused pool.
    """

    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    if n == 0:
        return _empty_set(REGIME_IID, k)
    rng = np.random.default_rng(seed)
    # pre-shuffled per-class stacks make every pop a uniform unused sample
    stacks = [list(rng.permutation(ds.class_indices(c)))
              for c in range(ds.num_classes)]
    remaining = np.array([len(s) for s in stacks], dtype=np.int64)
    anchors = np.empty(n, dtype=np.int64)
    positives = np.empty(n, dtype=np.int64)
    negatives = np.empty((n, k), dtype=np.int64)
    cids = np.empty(n, dtype=np.int64)
    for t in range(n):
        total = int(remaining.sum())
        can = np.flatnonzero((remaining >= 2) & (total - remaining >= k))
        if can.size == 0:
            raise PreconditionError(
                f"pool supports only {t} disjoint tuples, need {n}")
        c = int(rng.choice(can, p=remaining[can] / remaining[can].sum()))
        anchors[t] = stacks[c].pop()
        positives[t] = stacks[c].pop()
        remaining[c] -= 2
        for j in range(k):
            # sequential class-weighted pops = uniform without replacement
            # over the unused out-of-class samples
            w = remaining.astype(np.float64)
            w[c] = 0.0
            z = int(rng.choice(ds.num_classes, p=w / w.sum()))
            negatives[t, j] = stacks[z].pop()
            remaining[z] -= 1
        cids[t] = c
    return TupleSet(REGIME_IID, k, anchors, positives,
                    np.sort(negatives, axis=1), cids)


def draw_ordered_pairs(rng: np.random.Generator, n: int, size: int):
    """Uniform ordered pairs (i, j), i != j, over range(n). Returns (a, b)."""
    if n < 2:
        raise PreconditionError(f"need at least 2 items, got {n}")
    a = rng.integers(0, n, size=size)
    b = rng.integers(0, n - 1, size=size)
    b = b + (b >= a)
    return a, b


def draw_ksubsets(rng: np.random.Generator, n: int, k: int, size: int) -> np.ndarray:
    """Uniform k-subsets of range(n), rows sorted ascending, shape (size, k)."""
    if k > n:
        raise PreconditionError(f"cannot draw {k}-subset from {n} items")
    if k == n:
        return np.tile(np.arange(n, dtype=np.int64), (size, 1))
    if 4 * k >= n:
        # Dense regime: per-row random keys, take the k smallest. Chunked to
        # bound the (rows, n) float workspace.
        out = np.empty((size, k), dtype=np.int64)
        step = max(1, int(2e7) // max(n, 1))
        for lo in range(0, size, step):
            hi = min(size, lo + step)
            keys = rng.random((hi - lo, n))
            part = np.argpartition(keys, k - 1, axis=1)[:, :k]
            out[lo:hi] = np.sort(part, axis=1)
        return out
    # Sparse regime: rejection on duplicate rows. Ordered distinct k-tuples
    # are uniform, so sorting yields uniform subsets.
    draw = rng.integers(0, n, size=(size, k))
    draw.sort(axis=1)
    bad = np.flatnonzero((np.diff(draw, axis=1) == 0).any(axis=1)) if k > 1 else \
        np.zeros(0, dtype=np.int64)
    while bad.size:
        redraw = rng.integers(0, n, size=(bad.size, k))
        redraw.sort(axis=1)
        draw[bad] = redraw
        still = (np.diff(redraw, axis=1) == 0).any(axis=1)
        bad = bad[still]
    return draw.astype(np.int64, copy=False)


def subsample_tuples(ds: LabeledDataset, k: int, m: int, seed: int) -> TupleSet:
    """M i.i.d. draws from the natural tuple measure (feasible classes only).

    Classes are picked proportionally to N_c+ among classes admitting at
    least one tuple, then the ordered pair and the negative subset are
    uniform within the class. Raises if no class is feasible.
    """

    if m < 0:
        raise ConfigError(f"m must be >= 0, got {m}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    sizes = ds.class_sizes()
    feasible = [c for c in range(ds.num_classes)
                if class_tuple_count(int(sizes[c]), ds.n - int(sizes[c]), k) > 0]
    if not feasible:
        raise PreconditionError(f"no class admits a valid tuple at k={k}")
    if m == 0:
        return _empty_set(REGIME_SUB, k)
    rng = np.random.default_rng(seed)
    weights = np.array([sizes[c] for c in feasible], dtype=np.float64)
    weights /= weights.sum()
    choice = rng.choice(len(feasible), size=m, p=weights)

    anchors = np.empty(m, dtype=np.int64)
    positives = np.empty(m, dtype=np.int64)
    negatives = np.empty((m, k), dtype=np.int64)
    class_ids = np.empty(m, dtype=np.int64)
    for ci, c in enumerate(feasible):
        rows = np.flatnonzero(choice == ci)
        if rows.size == 0:
            continue
        pos_idx = ds.class_indices(c)
        neg_idx = ds.out_indices(c)
        a, p = draw_ordered_pairs(rng, len(pos_idx), rows.size)
        sub = draw_ksubsets(rng, len(neg_idx), k, rows.size)
        anchors[rows] = pos_idx[a]
        positives[rows] = pos_idx[p]
        negatives[rows] = neg_idx[sub]
        class_ids[rows] = c
    return TupleSet(REGIME_SUB, k, anchors, positives, negatives, class_ids)


def _ordered_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """All ordered pairs (i, j), i != j, in lexicographic order."""
    grid = np.tile(np.arange(n, dtype=np.int64), (n, 1))
    mask = ~np.eye(n, dtype=bool)
    second = grid[mask].reshape(n, n - 1)
    first = np.repeat(np.arange(n, dtype=np.int64), n - 1)
    return first, second.ravel()


def enumerate_class_tuples(ds: LabeledDataset, c: int, k: int,
                           cap: int = DEFAULT_CAP):
    """Full T_c as (anchors, positives, negatives) arrays, lexicographic.

    Order: ordered anchor/positive position pairs vary slowest, negative
    k-subsets (lexicographic over positions) fastest. Raises SizeError
    with the exact count when |T_c| > cap.
    """

    pos_idx = ds.class_indices(c)
    neg_idx = ds.out_indices(c)
    n_pos, n_neg = len(pos_idx), len(neg_idx)
    cnt = class_tuple_count(n_pos, n_neg, k)
    if cnt == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z, np.zeros((0, k), dtype=np.int64)
    if cnt > cap:
        raise SizeError(cnt, cap, f"class {c} tuple enumeration")
    pa, pb = _ordered_pairs(n_pos)
    subs = np.array(list(combinations(range(n_neg), k)), dtype=np.int64)
    n_pairs, n_subs = pa.shape[0], subs.shape[0]
    anchors = pos_idx[np.repeat(pa, n_subs)]
    positives = pos_idx[np.repeat(pb, n_subs)]
    negatives = neg_idx[np.tile(subs, (n_pairs, 1))]
    return anchors, positives, negatives


def enumerate_all_tuples(ds: LabeledDataset, k: int,
                         cap: int = DEFAULT_CAP) -> TupleSet:
    """Complete tuple set over all classes, class-major lexicographic order."""
    total, per_class = count_all_tuples(ds, k)
    if total > cap:
        raise SizeError(total, cap, "tuple enumeration")
    if total == 0:
        return _empty_set(REGIME_ALL, k)
    anchors, positives, negs, cids = [], [], [], []
    for c in range(ds.num_classes):
        if per_class[c] == 0:
            continue
        a, p, ng = enumerate_class_tuples(ds, c, k, cap=cap)
        anchors.append(a)
        positives.append(p)
        negs.append(ng)
        cids.append(np.full(a.shape[0], c, dtype=np.int64))
    return TupleSet(REGIME_ALL, k,
                    np.concatenate(anchors), np.concatenate(positives),
                    np.concatenate(negs), np.concatenate(cids))
