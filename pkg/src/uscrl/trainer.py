"""Projected SGD training and the two experiment protocols.

Training minimizes the mean clipped tuple loss with mini-batch SGD,
projecting back onto the norm-constraint set after every step. Tuples
come from one of the three regimes; the sub-sampled regime can redraw
its M tuples each epoch or keep one fixed draw.

``compare_regimes`` mirrors the pool-based comparison experiment: one
set of n disjoint tuples, a sub-sampled run for each tuple budget M on
the re-pooled samples of those tuples, and the full enumeration when it
fits under the cap. ``sample_complexity_search`` binary-searches the
smallest pool size whose trained model comes within epsilon of a large
reference model's population risk.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .dataset import GaussianSpec, LabeledDataset, generate_gaussian
from .errors import ConfigError, NumericError, PreconditionError, SizeError
from .loss import LossSpec, default_clip
from .model import (LinearModel, MlpModel, fit_probe, make_linear, make_mlp,
                    project, tuple_batch_backward)
from .risk import MonteCarlo, population_risk_mc, ustat_overall
from .tuples import (DEFAULT_CAP, REGIME_ALL, REGIME_IID, REGIME_SUB,
                     TupleSet, count_all_tuples, disjoint_tuples,
                     enumerate_all_tuples, greedy_iid_tuples,
                     subsample_tuples)


@dataclass(frozen=True)
class TrainConfig:
    family: str = "mlp"            # "linear" | "mlp"
    hidden: tuple = (64,)          # mlp hidden widths
    out_dim: int = 32
    spectral_cap: float = 4.0      # per layer (mlp) or on A (linear)
    max_col_sum: float = 64.0      # linear family (2,1)-norm cap
    activations: tuple | None = None
    loss_kind: str = "logistic"
    clip: float | None = None      # None -> 4*log(1+k)
    margin: float = 1.0
    k: int = 2
    regime: str = REGIME_SUB
    m_tuples: int = 10000
    resample_per_epoch: bool = True
    epochs: int = 20
    batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.0
    seed: int = 0
    eval_every: int = 0            # 0 = final evaluation only
    eval_draws: int = 20000
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if self.family not in ("linear", "mlp"):
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.regime not in (REGIME_IID, REGIME_SUB, REGIME_ALL):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.k < 1:
            raise ConfigError("k must be >= 1")

    def loss_spec(self) -> LossSpec:
        clip = default_clip(self.k) if self.clip is None else self.clip
        return LossSpec(kind=self.loss_kind, clip=clip, margin=self.margin)


@dataclass
class TrainReport:
    config: dict
    epoch_losses: list
    eval_points: list          # [{"epoch", "risk", "std_error", "probe_accuracy"}]
    final_risk: float | None
    final_risk_se: float | None
    final_probe_accuracy: float | None
    n_steps: int
    m_tuples_used: int
    wall_seconds: float
    model: object = field(repr=False, compare=False, default=None)

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("model")
        return out


def _child_seed(*parts) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts))
               .generate_state(1)[0])


def _build_model(cfg: TrainConfig, in_dim: int):
    seed = _child_seed(cfg.seed, 1)
    if cfg.family == "linear":
        return make_linear(in_dim, cfg.out_dim, max_col_sum=cfg.max_col_sum,
                           max_spectral=cfg.spectral_cap, seed=seed)
    widths = [in_dim, *cfg.hidden, cfg.out_dim]
    acts = list(cfg.activations) if cfg.activations else None
    return make_mlp(widths, cfg.spectral_cap, seed=seed, activations=acts)


def _draw_tuples(ds: LabeledDataset, cfg: TrainConfig, epoch: int) -> TupleSet:
    seed = _child_seed(cfg.seed, 2, epoch)
    if cfg.regime == REGIME_SUB:
        return subsample_tuples(ds, cfg.k, cfg.m_tuples, seed=seed)
    if cfg.regime == REGIME_IID:
        ts = greedy_iid_tuples(ds, cfg.k, seed=seed)
        if ts.m_count == 0:
            raise PreconditionError("pool admits no disjoint tuple")
        return ts
    return enumerate_all_tuples(ds, cfg.k, cap=cfg.cap)


def _evaluate(model, cfg: TrainConfig, spec: LossSpec,
              eval_spec: GaussianSpec | None,
              holdout: LabeledDataset | None):
    seed = _child_seed(cfg.seed, 3)
    if eval_spec is not None:
        est = population_risk_mc(model, eval_spec, cfg.k, spec,
                                 num_draws=cfg.eval_draws, seed=seed)
        return est.value, est.std_error
    if holdout is not None:
        per_class = max(200, cfg.eval_draws // max(1, holdout.num_classes))
        est = ustat_overall(model, holdout, cfg.k, spec,
                            mode=MonteCarlo(per_class, seed=seed))
        return est.value, est.std_error
    return None, None


def _probe_accuracy(model, cfg: TrainConfig, ds: LabeledDataset,
                    eval_spec: GaussianSpec | None,
                    holdout: LabeledDataset | None):
    seed = _child_seed(cfg.seed, 4)
    reps = model.forward(ds.x)
    probe, acc = fit_probe(reps, ds.y, ds.num_classes, seed=seed)
    if eval_spec is not None:
        fresh = generate_gaussian(eval_spec, max(1000, 100 * eval_spec.num_classes),
                                  seed=_child_seed(cfg.seed, 5))
        return probe.accuracy(model.forward(fresh.x), fresh.y)
    if holdout is not None:
        return probe.accuracy(model.forward(holdout.x), holdout.y)
    return acc


def train(ds: LabeledDataset, cfg: TrainConfig,
          eval_spec: GaussianSpec | None = None,
          holdout: LabeledDataset | None = None,
          tuples: TupleSet | None = None,
          with_probe: bool = False) -> TrainReport:
    """Projected mini-batch SGD on the clipped tuple loss.

    ``tuples`` pins an explicit training tuple set (regime sampling and
    per-epoch resampling are then disabled). Evaluation uses fresh
    population draws when ``eval_spec`` is given, otherwise a Monte Carlo
    U-statistic on ``holdout`` when provided. Identical config and seed
    reproduce the exact same report apart from wall time.
    """

    t0 = time.perf_counter()
    spec = cfg.loss_spec()
    model = _build_model(cfg, ds.dim)
    velocity = [np.zeros_like(w) for w in model.weights]
    rng = np.random.default_rng(_child_seed(cfg.seed, 0))

    fixed = tuples
    if fixed is None and not (cfg.regime == REGIME_SUB and cfg.resample_per_epoch):
        fixed = _draw_tuples(ds, cfg, epoch=0)
    if fixed is not None and fixed.m_count == 0:
        raise PreconditionError("empty training tuple set")

    epoch_losses = []
    eval_points = []
    n_steps = 0
    m_used = 0
    for epoch in range(cfg.epochs):
        ts = fixed if fixed is not None else _draw_tuples(ds, cfg, epoch)
        m_used = ts.m_count
        order = rng.permutation(ts.m_count)
        loss_sum = 0.0
        for lo in range(0, ts.m_count, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                grads, batch_loss = tuple_batch_backward(
                    model, ds, ts.anchors[idx], ts.positives[idx],
                    ts.negatives[idx], spec)
            except NumericError as e:
                raise NumericError(
                    f"{e} at step {n_steps} (epoch {epoch})") from None
            if not math.isfinite(batch_loss):
                raise NumericError(
                    f"training loss diverged at step {n_steps} (epoch {epoch})")
            ws = model.weights
            if cfg.momentum > 0:
                for v, g in zip(velocity, grads):
                    v *= cfg.momentum
                    v += g
                new_ws = [w - cfg.lr * v for w, v in zip(ws, velocity)]
            else:
                new_ws = [w - cfg.lr * g for w, g in zip(ws, grads)]
            model.set_weights(new_ws)
            project(model)
            loss_sum += batch_loss * idx.size
            n_steps += 1
        epoch_losses.append(loss_sum / ts.m_count)
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 \
                and epoch + 1 < cfg.epochs:
            risk, se = _evaluate(model, cfg, spec, eval_spec, holdout)
            point = {"epoch": epoch + 1, "risk": risk, "std_error": se}
            if with_probe:
                point["probe_accuracy"] = _probe_accuracy(
                    model, cfg, ds, eval_spec, holdout)
            eval_points.append(point)

    final_risk, final_se = _evaluate(model, cfg, spec, eval_spec, holdout)
    probe_acc = _probe_accuracy(model, cfg, ds, eval_spec, holdout) \
        if with_probe else None
    if final_risk is not None:
        eval_points.append({"epoch": cfg.epochs, "risk": final_risk,
                            "std_error": final_se,
                            **({"probe_accuracy": probe_acc} if with_probe else {})})
    return TrainReport(
        config=asdict(cfg), epoch_losses=epoch_losses,
        eval_points=eval_points, final_risk=final_risk, final_risk_se=final_se,
        final_probe_accuracy=probe_acc, n_steps=n_steps, m_tuples_used=m_used,
        wall_seconds=time.perf_counter() - t0, model=model)


def _dataclass_replace(cfg: TrainConfig, **kw) -> TrainConfig:
    from dataclasses import replace
    return replace(cfg, **kw)


def compare_regimes(pool: LabeledDataset, n_disjoint: int, k: int,
                    m_grid, seeds, cfg: TrainConfig,
                    eval_spec: GaussianSpec | None = None,
                    holdout: LabeledDataset | None = None) -> list[dict]:
    """Paired comparison of the three tuple regimes on one pool.

    For each seed: draw n disjoint tuples from the pool and train on them
    (the i.i.d. regime); re-pool exactly the n*(k+2) samples those tuples
    touch, then train on M sub-sampled tuples from that smaller pool for
    each M in the grid; and, when the full enumeration of the re-pooled
    samples fits under the cap, train on all tuples. Model init is shared
    within a seed so the comparison is paired.
    """

    rows = []
    for seed in seeds:
        base = _dataclass_replace(cfg, k=k, seed=int(seed))
        chosen = disjoint_tuples(pool, k, n_disjoint,
                                 seed=_child_seed(seed, 10))

        used = np.sort(np.unique(np.concatenate(
            [chosen.anchors, chosen.positives, chosen.negatives.ravel()])))
        assert used.size == n_disjoint * (k + 2)
        sub_pool = pool.subset(used)

        iid_cfg = _dataclass_replace(base, regime=REGIME_IID)
        report = train(pool, iid_cfg, eval_spec=eval_spec, holdout=holdout,
                       tuples=chosen, with_probe=True)
        rows.append(_regime_row(REGIME_IID, chosen.m_count, seed, n_disjoint,
                                k, report))

        for m in m_grid:
            ts = subsample_tuples(sub_pool, k, int(m),
                                  seed=_child_seed(seed, 12, m))
            sub_cfg = _dataclass_replace(base, regime=REGIME_SUB,
                                         m_tuples=int(m),
                                         resample_per_epoch=False)
            report = train(sub_pool, sub_cfg, eval_spec=eval_spec,
                           holdout=holdout, tuples=ts, with_probe=True)
            rows.append(_regime_row(REGIME_SUB, int(m), seed, n_disjoint, k,
                                    report))

        total, _ = count_all_tuples(sub_pool, k)
        if total <= cfg.cap:
            ts = enumerate_all_tuples(sub_pool, k, cap=cfg.cap)
            all_cfg = _dataclass_replace(base, regime=REGIME_ALL)
            report = train(sub_pool, all_cfg, eval_spec=eval_spec,
                           holdout=holdout, tuples=ts, with_probe=True)
            rows.append(_regime_row(REGIME_ALL, ts.m_count, seed, n_disjoint,
                                    k, report))
    return rows


def _regime_row(regime: str, m_count: int, seed, n_disjoint: int, k: int,
                report: TrainReport) -> dict:
    return {"regime": regime, "m_count": m_count, "seed": int(seed),
            "n_disjoint": n_disjoint, "k": k,
            "final_train_loss": report.epoch_losses[-1],
            "final_risk": report.final_risk,
            "final_risk_se": report.final_risk_se,
            "probe_accuracy": report.final_probe_accuracy}


def sample_complexity_search(gspec: GaussianSpec, k: int, eps: float,
                             lo: int, hi: int, seeds, cfg: TrainConfig,
                             search_tol: int = 100, ref_mult: int = 4,
                             m_cap: int = 200000,
                             ref_epoch_mult: int = 3) -> dict:
    """Binary search for the pool size reaching a target excess risk.

    The reference risk comes from one model per configuration trained on
    a pool of ref_mult * hi samples with tripled epochs. A probe at pool
    size N trains on min(N^2, m_cap) sub-sampled tuples; its gap is the
    population risk minus the reference risk. Per seed, the search keeps
    gap(lo) > eps and gap(hi) <= eps and halves the bracket until its
    width is at most search_tol, returning the smallest tested N whose
    gap made the target. If even the full range fails, the seed reports
    not reached with the gap at hi.
    """

    if eps <= 0:
        raise ConfigError("eps must be positive")
    if not 1 <= lo < hi:
        raise ConfigError("need 1 <= lo < hi")
    spec = cfg.loss_spec()

    n_ref = ref_mult * hi
    ref_cfg = _dataclass_replace(
        cfg, k=k, regime=REGIME_SUB, m_tuples=min(n_ref * n_ref, m_cap),
        epochs=cfg.epochs * ref_epoch_mult, seed=_child_seed(cfg.seed, 90))
    ds_ref = generate_gaussian(gspec, n_ref, seed=_child_seed(cfg.seed, 91))
    ref_report = train(ds_ref, ref_cfg)
    ref_risk = population_risk_mc(
        ref_report.model, gspec, k, spec, num_draws=cfg.eval_draws,
        seed=_child_seed(cfg.seed, 92)).value

    def gap_at(n: int, seed: int, log: list) -> float:
        probe_cfg = _dataclass_replace(
            cfg, k=k, regime=REGIME_SUB, m_tuples=min(n * n, m_cap),
            seed=_child_seed(seed, 93, n))
        ds = generate_gaussian(gspec, n, seed=_child_seed(seed, 94, n))
        report = train(ds, probe_cfg)
        risk = population_risk_mc(
            report.model, gspec, k, spec, num_draws=cfg.eval_draws,
            seed=_child_seed(cfg.seed, 92)).value
        gap = risk - ref_risk
        log.append({"n": n, "gap": gap})
        return gap

    per_seed = []
    for seed in seeds:
        log: list = []
        gap_hi = gap_at(hi, seed, log)
        if gap_hi > eps:
            per_seed.append({"seed": int(seed), "reached": False,
                             "n_eps": None, "gap_at_hi": gap_hi,
                             "probes": log})
            continue
        gap_lo = gap_at(lo, seed, log)
        if gap_lo <= eps:
            per_seed.append({"seed": int(seed), "reached": True, "n_eps": lo,
                             "gap_at_hi": gap_hi, "probes": log})
            continue
        a, b = lo, hi
        while b - a > search_tol:
            mid = (a + b) // 2
            if gap_at(mid, seed, log) <= eps:
                b = mid
            else:
                a = mid
        per_seed.append({"seed": int(seed), "reached": True, "n_eps": b,
                         "gap_at_hi": gap_hi, "probes": log})

    reached = [r["n_eps"] for r in per_seed if r["reached"]]
    return {"k": k, "num_classes": gspec.num_classes, "eps": eps,
            "lo": lo, "hi": hi, "search_tol": search_tol,
            "reference_risk": ref_risk, "reference_n": n_ref,
            "per_seed": per_seed,
            "mean_n_eps": float(np.mean(reached)) if reached else None}
