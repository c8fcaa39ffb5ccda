"""Command line pipeline: split, calibrate the radius, train, verify, report.

Every stage writes JSON (and CSV where tabular) under an output directory
taken from ``--output-dir``, the config file, or ``TREEGUARD_OUTPUT_DIR``.
Exit status is 0 on success, 2 when some step hit a time or node limit and
1 on error.
"""
import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import hpo
from .data import DatasetManifest, apply_scaler, load_dataset, prepare_split, split_64_20_20
from .epsearch import SearchConfig, search_epsilon, write_trace
from .train import EXTERNAL_METHODS, METHODS, TrainConfig, fit_model
from .trees import Ensemble
from .verify import DEFAULT_MAX_NODES, evaluate_robustness

log = logging.getLogger("treeguard")

SCHEMA_VERSION = 1
OUTPUT_ENV = "TREEGUARD_OUTPUT_DIR"
EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2

SEARCH_FILE = os.path.join("search", "search.json")
TRAIN_FILE = os.path.join("train", "train.json")
VERIFY_FILE = os.path.join("verify", "verify.json")
SPLIT_FILE = os.path.join("split", "splits.json")


class StageError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = None
    output_dir: str = None
    depths: list = field(default_factory=lambda: [3, 4, 5, 7, 9])
    trees: list = field(default_factory=lambda: [5, 11, 25, 56, 125])
    methods: list = field(default_factory=lambda: list(METHODS))
    repetitions: int = 7
    grid_repetitions: int = None  # defaults to repetitions
    run_grid: bool = True
    eta_target: float = 0.1
    band: float = 0.02
    margin: float = 1e-6
    eps0: float = 0.05
    eps_hat: float = None  # skip calibration when given
    seed: int = 0
    hpo_budget: int = 50
    select_budget: int = 50
    space: dict = field(default_factory=dict)  # SearchSpace overrides
    search_time_limit: float = 600.0  # per grid cell / selection search
    config_time_limit: float = 600.0  # per HPO candidate
    verify_time_limit: float = None  # per verified sample
    max_nodes: int = DEFAULT_MAX_NODES

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.grid_repetitions is not None and self.grid_repetitions < 1:
            raise ValueError("grid_repetitions must be >= 1")
        if any(v < 1 for v in list(self.depths) + list(self.trees)):
            raise ValueError("grid values must be positive")
        for name in ("search_time_limit", "config_time_limit", "verify_time_limit"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}")
        if self.hpo_budget < 1 or self.select_budget < 1:
            raise ValueError("budgets must be >= 1")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def out(self, *parts):
        root = self.output_dir or os.environ.get(OUTPUT_ENV) or "results"
        return os.path.join(root, *parts)


# -- helpers ---------------------------------------------------------------------


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise StageError(f"{path}: schema version {obj.get('schema_version')} != {SCHEMA_VERSION}")
    return obj


def _write_csv(path, rows, columns):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in columns})


def strip_times(obj):
    """Drop every key mentioning ``seconds`` (recursively)."""
    if isinstance(obj, dict):
        return {k: strip_times(v) for k, v in obj.items() if "seconds" not in k}
    if isinstance(obj, list):
        return [strip_times(v) for v in obj]
    return obj


def _median(values):
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def _sub_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _rep_seeds(manifest, n):
    seeds = list(manifest.rep_seeds)[:n]
    return seeds + list(range(len(seeds), n)) if len(seeds) < n else seeds


def _load(cfg):
    if not cfg.dataset:
        raise StageError("no dataset manifest given")
    manifest = DatasetManifest.load(cfg.dataset)
    return manifest, load_dataset(manifest)


def _space(cfg):
    return hpo.SearchSpace.from_dict(cfg.space) if cfg.space else hpo.SearchSpace()


def _search_config(cfg, eps0=None):
    return SearchConfig(
        eta_target=cfg.eta_target, band=cfg.band, margin=cfg.margin,
        time_limit=cfg.search_time_limit, eps0=cfg.eps0 if eps0 is None else eps0,
        max_nodes=cfg.max_nodes,
    )


def _search_row(res):
    st = res.state
    return {
        "eps_hat": res.eps_hat,
        "eta": res.eta,
        "n_evals": res.n_evals,
        "reason": res.reason,
        "unreachable": res.unreachable,
        "timed_out": res.reason == "time" or any(t["timeouts"] for t in st.trace),
        "verifier_calls": st.calls,
        "verifier_seconds": st.verifier_seconds,
    }


# -- stages ----------------------------------------------------------------------


def cmd_split(cfg):
    manifest, d = _load(cfg)
    reps = []
    for r, seed in enumerate(_rep_seeds(manifest, cfg.repetitions)):
        sp = split_64_20_20(d, manifest.test_seed, seed)
        reps.append({"rep": r, **sp.to_dict()})
    _write_json(cfg.out(SPLIT_FILE), {
        "schema_version": SCHEMA_VERSION,
        "stage": "split",
        "dataset": manifest.name,
        "n_samples": d.n_samples,
        "n_features": d.n_features,
        "n_classes": d.n_classes,
        "classes": [str(c) for c in d.classes],
        "splits": reps,
    })
    return False


def cmd_search_eps(cfg, dataset=None, name=None):
    """Calibrate the radius on the 80/20 setting.

    Every grid cell trains a standard forest and searches its radius, warm
    started from the smallest cell of the same repetition. The radius handed to
    training is the median, over repetitions, of the radius found for an
    accuracy-tuned forest.
    """
    if dataset is None:
        manifest, dataset = _load(cfg)
        name, seeds, test_seed = manifest.name, _rep_seeds(manifest, cfg.repetitions), manifest.test_seed
    else:
        seeds, test_seed = list(range(cfg.repetitions)), 0
    os.makedirs(cfg.out("search", "traces"), exist_ok=True)
    partial = False
    grid_rows, select_rows = [], []
    cells = sorted((d, t) for d in cfg.depths for t in cfg.trees)
    cells.sort(key=lambda c: (c[0] * c[1], c))
    n_grid = cfg.grid_repetitions or cfg.repetitions
    for r, seed in enumerate(seeds):
        sp = split_64_20_20(dataset, test_seed, seed)
        train, valid, test = prepare_split(dataset, sp)
        merged, _, _ = prepare_split(dataset, sp, merge_valid=True)

        if cfg.eps_hat is None:
            space = _space(cfg)
            winner, trace = hpo.optimize(
                "RF", space, cfg.select_budget, (train.X, train.y), (valid.X, valid.y),
                dataset.n_classes, 0.0, seed=_sub_seed(cfg.seed, r, 101),
                final_weights=(1.0, 0.0), max_nodes=cfg.max_nodes,
                config_time_limit=cfg.config_time_limit,
            )
            hpo.write_trace(trace, cfg.out("search", "traces", f"select_rep{r}.hpo.jsonl"))
            if winner is None:
                raise StageError("no forest configuration finished during radius selection")
            model = fit_model(merged.X, merged.y, dataset.n_classes, winner.config)
            res = search_epsilon(model, test.X, test.y, _search_config(cfg))
            write_trace(res.state, cfg.out("search", "traces", f"select_rep{r}.jsonl"))
            row = {"rep": r, "config": winner.config.to_dict(), **_search_row(res)}
            partial |= row["timed_out"]
            select_rows.append(row)

        if not cfg.run_grid or r >= n_grid:
            continue
        eps0 = None
        for depth, n_trees in cells:
            tcfg = TrainConfig(method="RF", n_trees=n_trees, max_depth=depth, seed=_sub_seed(cfg.seed, r, depth, n_trees))
            model = fit_model(merged.X, merged.y, dataset.n_classes, tcfg)
            res = search_epsilon(model, test.X, test.y, _search_config(cfg, eps0))
            write_trace(res.state, cfg.out("search", "traces", f"grid_rep{r}_d{depth}_t{n_trees}.jsonl"))
            if eps0 is None:
                eps0 = min(max(res.eps_hat, 1e-6), 1.0)
            row = {"rep": r, "depth": depth, "n_trees": n_trees, **_search_row(res)}
            partial |= row["timed_out"]
            grid_rows.append(row)
            log.info("grid rep %d depth %d trees %d: eps %.6g eta %.3f (%s)", r, depth, n_trees,
                     res.eps_hat, res.eta, res.reason)

    eps_hat = cfg.eps_hat if cfg.eps_hat is not None else _median([s["eps_hat"] for s in select_rows])
    grid_rows.sort(key=lambda g: (g["depth"], g["n_trees"], g["rep"]))
    medians = []
    for depth, n_trees in sorted(set((g["depth"], g["n_trees"]) for g in grid_rows)):
        cell = [g for g in grid_rows if g["depth"] == depth and g["n_trees"] == n_trees]
        medians.append({
            "depth": depth, "n_trees": n_trees,
            "eps_hat": _median([g["eps_hat"] for g in cell]),
            "verifier_seconds": _median([g["verifier_seconds"] for g in cell]),
        })
    _write_json(cfg.out(SEARCH_FILE), {
        "schema_version": SCHEMA_VERSION,
        "stage": "search-eps",
        "dataset": name,
        "eps_hat": eps_hat,
        "eps_hat_source": "config" if cfg.eps_hat is not None else "selection",
        "selection": select_rows,
        "grid": grid_rows,
        "grid_medians": medians,
    })
    _write_csv(cfg.out("search", "grid.csv"), grid_rows,
               ["rep", "depth", "n_trees", "eps_hat", "eta", "n_evals", "reason", "timed_out",
                "verifier_calls", "verifier_seconds"])
    return partial


def _eps_from_search(cfg):
    if cfg.eps_hat is not None:
        return cfg.eps_hat
    path = cfg.out(SEARCH_FILE)
    if not os.path.exists(path):
        raise StageError(f"no radius given and no search report at {path}")
    eps = _read_json(path)["eps_hat"]
    if eps is None:
        raise StageError("search report holds no radius")
    return eps


def cmd_train(cfg, dataset=None, name=None):
    """Tune, train and test every method on every repetition."""
    eps_hat = _eps_from_search(cfg)
    if dataset is None:
        manifest, dataset = _load(cfg)
        name, seeds, test_seed = manifest.name, _rep_seeds(manifest, cfg.repetitions), manifest.test_seed
    else:
        seeds, test_seed = list(range(cfg.repetitions)), 0
    os.makedirs(cfg.out("train", "models"), exist_ok=True)
    os.makedirs(cfg.out("train", "hpo"), exist_ok=True)
    space = _space(cfg)
    rows = []
    partial = False
    for r, seed in enumerate(seeds):
        sp = split_64_20_20(dataset, test_seed, seed)
        train, valid, test = prepare_split(dataset, sp)
        for mi, method in enumerate(cfg.methods):
            row = {"method": method, "rep": r}
            start = time.perf_counter()
            winner, trace = hpo.optimize(
                method, space, cfg.hpo_budget, (train.X, train.y), (valid.X, valid.y),
                dataset.n_classes, eps_hat, seed=_sub_seed(cfg.seed, r, mi), max_nodes=cfg.max_nodes,
                config_time_limit=cfg.config_time_limit,
            )
            trace_ref = os.path.join("train", "hpo", f"{method}_rep{r}.jsonl")
            hpo.write_trace(trace, cfg.out(trace_ref))
            row["hpo_trace"] = trace_ref
            row["hpo_seconds"] = time.perf_counter() - start
            if winner is None:
                partial = True
                reasons = sorted(set(e.status for e in trace))
                row.update(status="omitted", reason="no candidate finished: " + ",".join(reasons))
                rows.append(row)
                log.warning("%s rep %d omitted: %s", method, r, row["reason"])
                continue
            model = winner.model
            model.meta.update({
                "dataset": name,
                "rep": r,
                "eps_hat": eps_hat,
                "split": sp.to_dict(),
                "scaler": [train.scaler[0].tolist(), train.scaler[1].tolist()],
            })
            model_ref = os.path.join("train", "models", f"{method}_rep{r}.json")
            model.save(cfg.out(model_ref))
            rep = evaluate_robustness(model, test.X, test.y, eps_hat, max_nodes=cfg.max_nodes,
                                      time_limit=cfg.verify_time_limit)
            partial |= rep.n_timeouts > 0
            row.update(
                status="ok", reason="", model=model_ref,
                accuracy=rep.accuracy, adversarial_accuracy=rep.adversarial_accuracy,
                n_timeouts=rep.n_timeouts, train_seconds=winner.train_seconds,
                verify_seconds=rep.verify_seconds, config=winner.config.to_dict(),
                valid_objectives=list(winner.objectives),
            )
            rows.append(row)
            log.info("%s rep %d: acc %.3f adv %.3f", method, r, rep.accuracy, rep.adversarial_accuracy)
    _write_json(cfg.out(TRAIN_FILE), {
        "schema_version": SCHEMA_VERSION,
        "stage": "train",
        "dataset": name,
        "eps_hat": eps_hat,
        "rows": rows,
        "medians": _method_medians(rows, cfg.methods),
    })
    return partial


def _method_medians(rows, methods):
    out = {}
    for m in list(methods) + [e for e in EXTERNAL_METHODS if e not in methods]:
        ok = [r for r in rows if r["method"] == m and r.get("status") == "ok"]
        out[m] = {
            "n": len(ok),
            "accuracy": _median([r["accuracy"] for r in ok]),
            "adversarial_accuracy": _median([r["adversarial_accuracy"] for r in ok]),
            "train_seconds": _median([r["train_seconds"] for r in ok]),
        }
    return out


def cmd_verify(cfg, dataset=None):
    """Re-verify every trained model on its test rows with per-sample timings."""
    train_report = _read_json(cfg.out(TRAIN_FILE))
    if dataset is None:
        _, dataset = _load(cfg)
    os.makedirs(cfg.out("verify", "samples"), exist_ok=True)
    rows = []
    partial = False
    for tr in train_report["rows"]:
        if tr.get("status") != "ok":
            continue
        model = Ensemble.load(cfg.out(tr["model"]))
        meta = model.meta
        test_idx = np.asarray(meta["split"]["test"], dtype=np.int64)
        X = apply_scaler(dataset.X[test_idx], meta["scaler"])
        y = dataset.y[test_idx]
        rep = evaluate_robustness(model, X, y, meta["eps_hat"], max_nodes=cfg.max_nodes,
                                  time_limit=cfg.verify_time_limit)
        partial |= rep.n_timeouts > 0
        ref = os.path.join("verify", "samples", f"{tr['method']}_rep{tr['rep']}.jsonl")
        with open(cfg.out(ref), "w") as fh:
            for rec in rep.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        times = [rec["wall_seconds"] for rec in rep.records if rec["verdict"] != "misclassified"]
        rows.append({
            "method": tr["method"], "rep": tr["rep"], "model": tr["model"], "samples": ref,
            "eps": meta["eps_hat"], "accuracy": rep.accuracy,
            "adversarial_accuracy": rep.adversarial_accuracy, "n_timeouts": rep.n_timeouts,
            "verify_seconds": rep.verify_seconds, "median_sample_seconds": _median(times),
        })
    _write_json(cfg.out(VERIFY_FILE), {
        "schema_version": SCHEMA_VERSION,
        "stage": "verify",
        "dataset": train_report.get("dataset"),
        "rows": rows,
    })
    return partial


_LONG_COLUMNS = ["stage", "dataset", "method", "rep", "depth", "n_trees", "metric", "value"]


def _long_rows(merged):
    out = []
    ds = merged.get("dataset")
    search = merged.get("search")
    if search:
        for g in search["grid"]:
            for metric in ("eps_hat", "eta", "n_evals", "verifier_seconds"):
                out.append({"stage": "search-eps", "dataset": ds, "method": "RF", "rep": g["rep"],
                            "depth": g["depth"], "n_trees": g["n_trees"], "metric": metric, "value": g[metric]})
        for s in search["selection"]:
            for metric in ("eps_hat", "eta", "verifier_seconds"):
                out.append({"stage": "search-eps", "dataset": ds, "method": "RF", "rep": s["rep"],
                            "metric": "selection_" + metric, "value": s[metric]})
    train = merged.get("train")
    if train:
        for r in train["rows"]:
            for metric in ("accuracy", "adversarial_accuracy", "train_seconds", "verify_seconds"):
                out.append({"stage": "train", "dataset": ds, "method": r["method"], "rep": r["rep"],
                            "metric": metric, "value": r.get(metric)})
        for m in EXTERNAL_METHODS:
            if not any(r["method"] == m for r in train["rows"]):
                for metric in ("accuracy", "adversarial_accuracy", "train_seconds"):
                    out.append({"stage": "train", "dataset": ds, "method": m, "metric": metric, "value": None})
    verify = merged.get("verify")
    if verify:
        for r in verify["rows"]:
            for metric in ("adversarial_accuracy", "verify_seconds", "median_sample_seconds"):
                out.append({"stage": "verify", "dataset": ds, "method": r["method"], "rep": r["rep"],
                            "metric": metric, "value": r.get(metric)})
    return out


def cmd_report(cfg, inputs=None, strip=False):
    """Merge stage outputs into ``report/report.json`` and ``report/long.csv``."""
    roots = inputs or [cfg.out()]
    merged = {"schema_version": SCHEMA_VERSION, "stage": "report"}
    found = False
    for root in roots:
        for key, rel in (("split", SPLIT_FILE), ("search", SEARCH_FILE), ("train", TRAIN_FILE), ("verify", VERIFY_FILE)):
            path = os.path.join(root, rel)
            if os.path.exists(path):
                obj = _read_json(path)
                merged[key] = obj
                merged.setdefault("dataset", obj.get("dataset"))
                found = True
    if not found:
        raise StageError(f"no stage outputs under {roots}")
    merged.pop("split", None)
    if "train" in merged:
        rows = merged["train"]["rows"]
        methods = list(dict.fromkeys(r["method"] for r in rows))
        merged["medians"] = _method_medians(rows, methods)
    rows = _long_rows(merged)
    if strip:
        merged = strip_times(merged)
        rows = [r for r in rows if "seconds" not in r["metric"]]
    _write_json(cfg.out("report", "report.json"), merged)
    _write_csv(cfg.out("report", "long.csv"), rows, _LONG_COLUMNS)
    return False


def cmd_experiment(cfg, strip=False):
    partial = cmd_split(cfg)
    partial |= cmd_search_eps(cfg)
    partial |= cmd_train(cfg)
    partial |= cmd_verify(cfg)
    cmd_report(cfg, strip=strip)
    return partial


# -- argument parsing ---------------------------------------------------------


def _int_list(s):
    return [int(v) for v in s.split(",") if v]


def _str_list(s):
    return [v for v in s.split(",") if v]


def build_parser():
    p = argparse.ArgumentParser(prog="treeguard", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON file with ExperimentConfig fields")
        sp.add_argument("--dataset", help="dataset manifest (JSON)")
        sp.add_argument("--output-dir", help=f"output root (default ${OUTPUT_ENV} or ./results)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--reps", type=int, dest="repetitions")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override any config field, value parsed as JSON")
        return sp

    common(sub.add_parser("split", help="write the per-repetition train/valid/test indices"))
    s = common(sub.add_parser("search-eps", help="calibrate the perturbation radius"))
    s.add_argument("--depths", type=_int_list)
    s.add_argument("--trees", type=_int_list)
    s.add_argument("--no-grid", action="store_false", dest="run_grid", default=None)
    s.add_argument("--eta-target", type=float)
    s.add_argument("--select-budget", type=int)
    t = common(sub.add_parser("train", help="tune, train and test every method"))
    t.add_argument("--methods", type=_str_list)
    t.add_argument("--budget", type=int, dest="hpo_budget")
    t.add_argument("--eps-hat", type=float)
    common(sub.add_parser("verify", help="verify the trained models on their test rows"))
    r = common(sub.add_parser("report", help="merge stage outputs into CSV and JSON"))
    r.add_argument("--inputs", nargs="+", help="output roots to merge (default: the output dir)")
    r.add_argument("--strip-times", action="store_true", help="omit all timing fields")
    e = common(sub.add_parser("experiment", help="run every stage"))
    e.add_argument("--depths", type=_int_list)
    e.add_argument("--trees", type=_int_list)
    e.add_argument("--no-grid", action="store_false", dest="run_grid", default=None)
    e.add_argument("--methods", type=_str_list)
    e.add_argument("--budget", type=int, dest="hpo_budget")
    e.add_argument("--select-budget", type=int)
    e.add_argument("--eps-hat", type=float)
    e.add_argument("--eta-target", type=float)
    e.add_argument("--strip-times", action="store_true", help="omit all timing fields from the report")
    return p


_NOT_CONFIG = {"command", "config", "set", "verbose", "inputs", "strip_times"}


def config_from_args(args):
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        base = os.path.dirname(os.path.abspath(args.config))
        if raw.get("dataset") and not os.path.isabs(raw["dataset"]):
            raw["dataset"] = os.path.join(base, raw["dataset"])
    for k, v in vars(args).items():
        if k not in _NOT_CONFIG and v is not None:
            raw[k] = v
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            raw[key] = json.loads(value)
        except json.JSONDecodeError:
            raw[key] = value
    return ExperimentConfig.from_dict(raw)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        cmd = args.command
        if cmd == "split":
            partial = cmd_split(cfg)
        elif cmd == "search-eps":
            partial = cmd_search_eps(cfg)
        elif cmd == "train":
            partial = cmd_train(cfg)
        elif cmd == "verify":
            partial = cmd_verify(cfg)
        elif cmd == "report":
            partial = cmd_report(cfg, inputs=args.inputs, strip=args.strip_times)
        else:
            partial = cmd_experiment(cfg, strip=args.strip_times)
    except (StageError, ValueError, OSError, KeyError) as exc:
        print(f"treeguard {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_PARTIAL if partial else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
