"""Command-line interface: sample, estimate, bounds, experiment, train.

Every run validates its JSON config against the shipped schema, writes
its outputs under --out, and drops a manifest.json recording the config
hash, seeds and output names. Reruns with the same config and seed
produce byte-identical result files (the manifest's timestamps aside).

Exit codes: 0 success, 2 configuration error, 3 precondition failure,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys
from importlib import resources

import numpy as np

from . import __version__
from .bounds import BoundInputs, evaluate_theorem
from .dataset import (GaussianSpec, LabeledDataset, generate_gaussian,
                      load_idx, train_holdout_split)
from .errors import (ConfigError, NumericError, PreconditionError,
                     UscrlError)
from .loss import LossSpec, default_clip, tuple_losses
from .model import load_checkpoint, save_checkpoint
from .risk import (Exact, MonteCarlo, population_risk_mc, subsampled_risk,
                   ustat_overall, vstat_overall)
from .trainer import (TrainConfig, compare_regimes, sample_complexity_search,
                      train)
from .tuples import (DEFAULT_CAP, REGIME_ALL, REGIME_IID, REGIME_SUB,
                     enumerate_all_tuples, greedy_iid_tuples,
                     subsample_tuples, tuple_mass)

CSV_SCHEMAS = {
    "bounds_sweep": "bounds-sweep-v1",
    "regimes": "regimes-v1",
    "complexity": "complexity-v1",
}

CACHE_ENV = "USCRL_CACHE_DIR"


def _schema():
    with resources.files("uscrl").joinpath("config_schema.json").open() as f:
        return json.load(f)


def _validate_config(cfg: dict, section: str) -> None:
    import jsonschema

    schema = _schema()
    ref = {"$ref": f"#/$defs/{section}", "$defs": schema["$defs"]}
    validator = jsonschema.Draft202012Validator(ref)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config field {path}: {err.message}")


def _config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _gaussian_spec(ds_cfg: dict) -> GaussianSpec:
    return GaussianSpec.random(
        num_classes=ds_cfg["num_classes"],
        dim=ds_cfg.get("dim", 128),
        sigma=ds_cfg.get("sigma", 0.1),
        seed=ds_cfg.get("centers_seed", 0),
        priors=ds_cfg.get("priors"))


def _cache_key(ds_cfg: dict, seed: int) -> str:
    return _config_hash({"dataset": ds_cfg, "seed": seed})[:24]


def _load_pool(ds_cfg: dict, seed: int) -> LabeledDataset:
    if ds_cfg["type"] == "idx":
        return load_idx(ds_cfg["images"], ds_cfg["labels"],
                        num_classes=ds_cfg.get("num_classes"))
    if "n" not in ds_cfg:
        raise ConfigError("config field dataset.n: required to draw a pool")
    spec = _gaussian_spec(ds_cfg)
    cache_dir = os.environ.get(CACHE_ENV)
    path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"pool_{_cache_key(ds_cfg, seed)}.npz")
        if os.path.exists(path):
            blob = np.load(path)
            return LabeledDataset(blob["x"], blob["y"],
                                  int(blob["num_classes"]))
    ds = generate_gaussian(spec, ds_cfg["n"], seed=seed)
    if path:
        np.savez(path, x=ds.x, y=ds.y, num_classes=ds.num_classes)
    return ds


def _loss_spec(cfg: dict, k: int) -> LossSpec:
    lc = cfg.get("loss", {})
    clip = lc.get("clip")
    return LossSpec(kind=lc.get("kind", "logistic"),
                    clip=default_clip(k) if clip is None else clip,
                    margin=lc.get("margin", 1.0))


def _train_config(cfg: dict, k: int, seed: int) -> TrainConfig:
    over = dict(cfg.get("train", {}))
    if "hidden" in over:
        over["hidden"] = tuple(over["hidden"])
    if "activations" in over and over["activations"] is not None:
        over["activations"] = tuple(over["activations"])
    return TrainConfig(k=k, seed=seed, **over)


def _write_manifest(out_dir: str, subcommand: str, cfg: dict, seed: int,
                    outputs: list[str], started: str,
                    extra: dict | None = None) -> str:
    manifest = {
        "tool": "uscrl",
        "version": __version__,
        "subcommand": subcommand,
        "config_hash": _config_hash(cfg),
        "config": cfg,
        "seed": seed,
        "outputs": sorted(outputs),
        "csv_schemas": CSV_SCHEMAS,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_csv_cell(v) for v in row])


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def cmd_sample(cfg: dict, out_dir: str, seed: int, jobs: int) -> list[str]:
    ds = _load_pool(cfg["dataset"], seed)
    k = cfg["k"]
    regime = cfg["regime"]
    cap = cfg.get("cap", DEFAULT_CAP)
    if regime == REGIME_SUB:
        if "m_tuples" not in cfg:
            raise ConfigError("config field m_tuples: required for the "
                              "subsampled regime")
        ts = subsample_tuples(ds, k, cfg["m_tuples"], seed=seed)
    elif regime == REGIME_IID:
        ts = greedy_iid_tuples(ds, k, seed=seed)
    else:
        ts = enumerate_all_tuples(ds, k, cap=cap)
    ts.validate(ds)
    path = os.path.join(out_dir, "tuples.jsonl")
    with open(path, "w") as f:
        f.write(ts.to_jsonl())
    print(f"sampled {ts.m_count} tuple(s) [regime={regime}, k={k}]")
    return [path]


def cmd_estimate(cfg: dict, out_dir: str, seed: int, jobs: int) -> list[str]:
    k = cfg["k"]
    spec = _loss_spec(cfg, k)
    estimator = cfg["estimator"]
    model = load_checkpoint(cfg["checkpoint"])
    cap = cfg.get("cap", DEFAULT_CAP)
    mc_draws = cfg.get("mc_draws", 10000)

    if estimator == "population_mc":
        if cfg["dataset"]["type"] != "gaussian":
            raise ConfigError(
                "config field estimator: population_mc needs a gaussian "
                "dataset (an empirical pool has no population law)")
        gspec = _gaussian_spec(cfg["dataset"])
        est = population_risk_mc(model, gspec, k, spec, num_draws=mc_draws,
                                 seed=seed)
    else:
        ds = _load_pool(cfg["dataset"], seed)
        if model.in_dim != ds.dim:
            raise ConfigError(
                f"checkpoint expects input dim {model.in_dim}, pool has {ds.dim}")
        if estimator == "subsampled":
            if "m_tuples" not in cfg:
                raise ConfigError("config field m_tuples: required for the "
                                  "subsampled estimator")
            ts = subsample_tuples(ds, k, cfg["m_tuples"], seed=seed)
            est = subsampled_risk(model, ds, ts, spec)
        elif estimator == "ustat_exact":
            est = ustat_overall(model, ds, k, spec, mode=Exact(cap=cap))
        elif estimator == "ustat_mc":
            est = ustat_overall(model, ds, k, spec,
                                mode=MonteCarlo(mc_draws, seed=seed))
        elif estimator == "vstat_exact":
            est = vstat_overall(model, ds, k, spec, mode=Exact(cap=cap))
        elif estimator == "vstat_mc":
            est = vstat_overall(model, ds, k, spec,
                                mode=MonteCarlo(mc_draws, seed=seed))
        else:  # enumeration_mean: independent nu-weighted enumeration
            ts = enumerate_all_tuples(ds, k, cap=cap)
            if ts.m_count == 0:
                raise PreconditionError("no valid tuple to enumerate")
            losses = tuple_losses(model, ds, ts.anchors, ts.positives,
                                  ts.negatives, spec)
            masses = np.array([tuple_mass(ds, k, t) for t in ts])
            est_value = float(np.sum(losses * masses))
            from .risk import RiskEstimate
            est = RiskEstimate(est_value, "enumeration_mean", ts.m_count)

    path = os.path.join(out_dir, "estimate.json")
    with open(path, "w") as f:
        json.dump(est.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    return [path]


def _bound_inputs(cfg: dict, **overrides) -> BoundInputs:
    merged = {**cfg, **overrides}
    rho = merged.get("rho")
    if rho is None:
        if "num_classes" not in merged:
            raise ConfigError("config field rho: give rho or num_classes")
        c = merged["num_classes"]
        rho = [1.0 / c] * c
    return BoundInputs(
        n=merged["n"], rho=np.asarray(rho, dtype=float), k=merged["k"],
        delta=merged["delta"], loss_bound=merged["loss_bound"],
        class_k=merged.get("class_k"), m_tuples=merged.get("m_tuples"),
        family_params=merged.get("family_params", {}))


def cmd_bounds(cfg: dict, out_dir: str, seed: int, jobs: int) -> list[str]:
    theorem = cfg["theorem"]
    emp_rad = cfg.get("emp_rad")
    sweep = cfg.get("sweep")
    if not sweep:
        report = evaluate_theorem(theorem, _bound_inputs(cfg), emp_rad=emp_rad)
        path = os.path.join(out_dir, "bounds.json")
        with open(path, "w") as f:
            json.dump(report.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")
        return [path]

    params = sorted(sweep.keys())
    grids = [sweep[p] for p in params]
    combos = [[]]
    for grid in grids:
        combos = [c + [v] for c in combos for v in grid]
    rows = []
    term_names: list[str] = []
    for combo in combos:
        report = evaluate_theorem(
            theorem, _bound_inputs(cfg, **dict(zip(params, combo))),
            emp_rad=emp_rad)
        if not term_names:
            term_names = [name for name, _ in report.terms]
        terms = dict(report.terms)
        rows.append(list(combo)
                    + [report.n_tilde, report.lam]
                    + [terms[t] for t in term_names]
                    + [report.total, report.flags["vacuous"],
                       report.flags["lambda_ge_1"]])
    header = (params + ["n_tilde", "lambda"] + [f"term_{t}" for t in term_names]
              + ["total", "vacuous", "lambda_ge_1"])
    path = os.path.join(out_dir, "bounds.csv")
    _write_csv(path, header, rows)
    return [path]


def _regimes_worker(args):
    pool_blob, cfg, k, seed = args
    pool = LabeledDataset(pool_blob["x"], pool_blob["y"], pool_blob["c"])
    gspec = _gaussian_spec(cfg["dataset"])
    tcfg = _train_config(cfg, k, seed)
    return compare_regimes(pool, cfg["n_disjoint"], k, cfg["m_grid"],
                           [seed], tcfg, eval_spec=gspec)


def cmd_experiment_regimes(cfg: dict, out_dir: str, seed: int,
                           jobs: int) -> list[str]:
    pool = _load_pool(cfg["dataset"], seed)
    k = cfg["k"]
    blob = {"x": pool.x, "y": pool.y, "c": pool.num_classes}
    tasks = [(blob, cfg, k, int(s)) for s in cfg["seeds"]]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futures = [ex.submit(_regimes_worker, t) for t in tasks]
            chunks = []
            for i, fut in enumerate(futures):
                try:
                    chunks.append(fut.result())
                except UscrlError as e:
                    raise type(e)(f"job {i} (seed {tasks[i][3]}): {e}") from None
    else:
        chunks = []
        for i, t in enumerate(tasks):
            try:
                chunks.append(_regimes_worker(t))
            except UscrlError as e:
                raise type(e)(f"job {i} (seed {t[3]}): {e}") from None
    rows = [r for chunk in chunks for r in chunk]
    header = ["regime", "m_count", "seed", "n_disjoint", "k",
              "final_train_loss", "final_risk", "final_risk_se",
              "probe_accuracy"]
    path = os.path.join(out_dir, "regimes.csv")
    _write_csv(path, header, [[row[h] for h in header] for row in rows])
    return [path]


def cmd_experiment_complexity(cfg: dict, out_dir: str, seed: int,
                              jobs: int) -> list[str]:
    gspec = _gaussian_spec(cfg["dataset"])
    k = cfg["k"]
    tcfg = _train_config(cfg, k, seed)
    result = sample_complexity_search(
        gspec, k, cfg["eps"], cfg["lo"], cfg["hi"],
        [int(s) for s in cfg["seeds"]], tcfg,
        search_tol=cfg.get("search_tol", 100),
        ref_mult=cfg.get("ref_mult", 4),
        m_cap=cfg.get("m_cap", 200000))
    header = ["k", "num_classes", "eps", "seed", "reached", "n_eps",
              "gap_at_hi", "reference_risk", "mean_n_eps"]
    rows = []
    for r in result["per_seed"]:
        rows.append([k, gspec.num_classes, cfg["eps"], r["seed"],
                     r["reached"], r["n_eps"], r["gap_at_hi"],
                     result["reference_risk"], result["mean_n_eps"]])
    csv_path = os.path.join(out_dir, "complexity.csv")
    _write_csv(csv_path, header, rows)
    json_path = os.path.join(out_dir, "complexity.json")
    with open(json_path, "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
        f.write("\n")
    return [csv_path, json_path]


def cmd_train(cfg: dict, out_dir: str, seed: int, jobs: int) -> list[str]:
    k = cfg["k"]
    tcfg = _train_config(cfg, k, seed)
    eval_spec = None
    holdout = None
    if cfg["dataset"]["type"] == "gaussian":
        ds = _load_pool(cfg["dataset"], seed)
        eval_spec = _gaussian_spec(cfg["dataset"])
    else:
        full = _load_pool(cfg["dataset"], seed)
        frac = cfg.get("holdout_fraction")
        if frac:
            ds, holdout = train_holdout_split(full, frac, seed=seed)
        else:
            ds = full
    report = train(ds, tcfg, eval_spec=eval_spec, holdout=holdout,
                   with_probe=cfg.get("with_probe", False))
    prefix = os.path.join(out_dir, "checkpoint")
    ck_json, ck_bin = save_checkpoint(report.model, prefix)
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    return [path, ck_json, ck_bin]


_SUBCOMMANDS = {
    "sample": ("sample", cmd_sample),
    "estimate": ("estimate", cmd_estimate),
    "bounds": ("bounds", cmd_bounds),
    "experiment:regimes": ("experiment_regimes", cmd_experiment_regimes),
    "experiment:complexity": ("experiment_complexity", cmd_experiment_complexity),
    "train": ("train", cmd_train),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uscrl",
        description="Contrastive tuple sampling, risk estimation, bound "
                    "calculators and training over fixed labeled pools.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, help_text, extra=None):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes where supported")
        if extra:
            extra(p)
        return p

    add("sample", "draw or enumerate a tuple set, write JSON-lines")
    add("estimate", "evaluate a risk estimator for a checkpointed model")
    add("bounds", "evaluate a bound statement or sweep its parameters")
    exp = add("experiment", "run an experiment protocol",
              extra=lambda p: p.add_argument(
                  "protocol", choices=["regimes", "complexity"]))
    add("train", "train a representation model, write checkpoint and report")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    key = args.subcommand
    if key == "experiment":
        key = f"experiment:{args.protocol}"
    section, func = _SUBCOMMANDS[key]

    started = _now()
    try:
        with open(args.config) as f:
            try:
                cfg = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config is not valid JSON: {e}") from e
        _validate_config(cfg, section)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        os.makedirs(args.out, exist_ok=True)
        outputs = func(cfg, args.out, seed, args.jobs)
        manifest = _write_manifest(args.out, key, cfg, seed,
                                   [os.path.basename(p) for p in outputs],
                                   started)
        print(f"wrote {len(outputs)} output(s) and {manifest}")
        return 0
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PreconditionError as e:
        print(f"precondition error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4
    except UscrlError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
