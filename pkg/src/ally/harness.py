"""Experiment engine: the pool-based active learning loop across
strategies and seeds, with learning-curve, ablation and redundancy
reports.

Each (strategy, seed) cell is independent: the pool is rebuilt from the
dataset spec, the initial labeled set is drawn with the cell seed, and
every round retrains from a fresh initialization. Round r's curve point
reports the test metric of the model trained on the labeled set of size
n_initial + r * budget, then the query batch for the next round is
selected and moved.
"""
from __future__ import annotations

import csv as csvlib
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import dualhead, numerics, pdcl, selection
from .data import DatasetSpec, Pool
from .dualhead import DualHeadConfig
from .numerics import MLPArchitecture, ModelParams
from .pdcl import PDCLConfig, TrainReport

CURVE_COLUMNS = ("strategy", "seed", "round", "n_labeled",
                 "metric_name", "metric_value", "k")


class ConfigError(ValueError):
    """Invalid experiment configuration or config file."""


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    pdcl: PDCLConfig = field(default_factory=PDCLConfig)
    dual_head: DualHeadConfig = field(default_factory=DualHeadConfig)
    strategies: tuple[str, ...] = ("ally", "random")
    budget: int = 200
    n_initial: int = 100
    n_rounds: int = 3
    k_clusters: int = 10
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"
    redundancy_factor: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.k_clusters > self.budget:
            raise ConfigError("k_clusters must not exceed the budget")
        for s in self.strategies:
            if s not in selection.STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}")
        if self.budget < 1 or self.n_rounds < 1 or self.n_initial < 1:
            raise ConfigError("budget, n_rounds and n_initial must be >= 1")


@dataclass
class CurvePoint:
    strategy: str
    seed: int
    round: int
    n_labeled: int
    metric_name: str
    metric_value: float
    k: int

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class RoundResult:
    pool: Pool
    curve_point: CurvePoint
    train_report: TrainReport
    params: ModelParams
    dual_head_trained: bool
    n_selected: int
    n_duplicate_of_labeled: int


def subseed(*parts: int) -> int:
    """Deterministic child seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def build_arch(config: ExperimentConfig, pool: Pool) -> MLPArchitecture:
    if pool.labels is None:
        raise ConfigError("experiment pools need stored labels as the oracle")
    if pool.is_classification:
        out_dim = int(pool.labels.max()) + 1
    else:
        out_dim = pool.labels.shape[1] if pool.labels.ndim == 2 else 1
    return MLPArchitecture(pool.dim, tuple(config.hidden_dims), out_dim,
                           config.activation)


def build_pool(config: ExperimentConfig, seed: int) -> Pool:
    pool = data_mod.load_dataset(config.dataset)
    if config.redundancy_factor > 1:
        pool = data_mod.clone_redundant(pool, config.redundancy_factor)
    return data_mod.split_initial(pool, config.n_initial, subseed(seed, 1))


def evaluate_metric(params: ModelParams, test_x: np.ndarray,
                    test_y: np.ndarray) -> tuple[str, float]:
    _, outputs, _ = numerics.forward(params, test_x)
    if np.issubdtype(np.asarray(test_y).dtype, np.integer):
        return "accuracy", float(np.mean(outputs.argmax(axis=1) == test_y))
    targets = np.asarray(test_y, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    from .losses import mse

    return "mse", float(mse(outputs, targets).values.mean())


def _select_batch(
    strategy: str,
    pool: Pool,
    params: ModelParams,
    dual: pdcl.DualState,
    config: ExperimentConfig,
    seed: int,
    round_idx: int,
    b_eff: int,
) -> tuple[selection.QueryBatch, bool]:
    """Returns the batch (positions into the unlabeled set) and whether a
    dual head was trained for it."""
    if strategy == "random":
        return selection.random_select(len(pool.unlabeled_idx), b_eff,
                                       subseed(seed, 5, round_idx)), False
    emb_unlabeled, _, _ = numerics.forward(params, pool.unlabeled_x)
    if strategy == "coreset":
        emb_labeled, _, _ = numerics.forward(params, pool.labeled_x)
        return selection.coreset_select(emb_labeled, emb_unlabeled, b_eff), False

    emb_labeled, _, _ = numerics.forward(params, pool.labeled_x)
    head_cfg = replace(config.dual_head, rng_seed=subseed(seed, 3, round_idx))
    head = dualhead.train_dual_head(emb_labeled, dual.lambdas, head_cfg)
    predicted = dualhead.predict_duals(head, emb_unlabeled)
    if strategy == "top_dual":
        return selection.top_dual_select(predicted, b_eff), True
    k = min(config.k_clusters, b_eff)
    return selection.ally_select(emb_unlabeled, predicted, b_eff, k,
                                 subseed(seed, 4, round_idx)), True


def al_round(
    pool: Pool,
    config: ExperimentConfig,
    strategy: str,
    seed: int,
    round_idx: int,
) -> RoundResult:
    """One active learning round: retrain from scratch, score, select, move.

    Parameters from earlier rounds are deliberately not reused; every round
    re-initializes with a round-specific seed.
    """
    if len(pool.unlabeled_idx) < 1:
        raise ValueError("no unlabeled samples left to query")
    if pool.test_features is None:
        raise ConfigError("pool has no test split to evaluate on")
    arch = build_arch(config, pool)
    train_seed = subseed(seed, 2, round_idx)
    params, dual, report = pdcl.pdcl_train(
        pool.labeled_x, pool.labeled_y, arch, config.pdcl, train_seed
    )
    metric_name, metric_value = evaluate_metric(
        params, pool.test_features, pool.test_labels
    )
    point = CurvePoint(strategy, seed, round_idx, len(pool.labeled_idx),
                       metric_name, metric_value, config.k_clusters)

    b_eff = min(config.budget, len(pool.unlabeled_idx))
    batch, head_trained = _select_batch(
        strategy, pool, params, dual, config, seed, round_idx, b_eff
    )
    rows = pool.unlabeled_idx[batch.indices]
    n_dup = 0
    if pool.origin is not None:
        labeled_origins = set(pool.origin[pool.labeled_idx].tolist())
        n_dup = int(sum(pool.origin[r] in labeled_origins for r in rows))
    new_pool = data_mod.move_to_labeled(pool, rows)
    return RoundResult(new_pool, point, report, params, head_trained,
                       len(rows), n_dup)


def run_cell(config: ExperimentConfig, strategy: str,
             seed: int) -> tuple[list[CurvePoint], dict]:
    pool = build_pool(config, seed)
    points: list[CurvePoint] = []
    rounds_meta = []
    for r in range(config.n_rounds):
        if len(pool.unlabeled_idx) == 0:
            break
        result = al_round(pool, config, strategy, seed, r)
        pool = result.pool
        points.append(result.curve_point)
        rounds_meta.append({
            "round": r,
            "violation_fraction": result.train_report.violation_fraction,
            "stopped_epoch": result.train_report.stopped_epoch,
            "dual_head_trained": result.dual_head_trained,
            "n_selected": result.n_selected,
            "n_duplicate_of_labeled": result.n_duplicate_of_labeled,
        })
    return points, {"strategy": strategy, "seed": seed, "status": "ok",
                    "rounds": rounds_meta}


def summarize(points: list[CurvePoint]) -> list[dict]:
    """Across-seed mean and standard deviation per (strategy, k, round)."""
    groups: dict[tuple, list[CurvePoint]] = {}
    for p in points:
        groups.setdefault((p.strategy, p.k, p.round), []).append(p)
    rows = []
    for (strategy, k, rnd) in sorted(groups):
        members = groups[(strategy, k, rnd)]
        values = np.array([m.metric_value for m in members])
        rows.append({
            "strategy": strategy, "k": k, "round": rnd,
            "n_labeled": members[0].n_labeled,
            "metric_name": members[0].metric_name,
            "mean": float(values.mean()),
            "std": float(values.std()),
            "n_seeds": len(members),
        })
    return rows


def _atomic_write(path: str, contents: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(contents)
    os.replace(tmp, path)


def write_curves_csv(points: list[CurvePoint], path: str) -> None:
    import io

    buf = io.StringIO()
    writer = csvlib.DictWriter(buf, fieldnames=CURVE_COLUMNS)
    writer.writeheader()
    for p in points:
        row = p.as_row()
        row["metric_value"] = f"{row['metric_value']:.12g}"
        writer.writerow(row)
    _atomic_write(path, buf.getvalue().encode())


def write_summary_csv(rows: list[dict], path: str) -> None:
    import io

    buf = io.StringIO()
    cols = ("strategy", "k", "round", "n_labeled", "metric_name",
            "mean", "std", "n_seeds")
    writer = csvlib.DictWriter(buf, fieldnames=cols)
    writer.writeheader()
    for row in rows:
        out = dict(row)
        out["mean"] = f"{out['mean']:.12g}"
        out["std"] = f"{out['std']:.12g}"
        writer.writerow(out)
    _atomic_write(path, buf.getvalue().encode())


def read_curves_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csvlib.DictReader(f))
    for row in rows:
        row["seed"] = int(row["seed"])
        row["round"] = int(row["round"])
        row["n_labeled"] = int(row["n_labeled"])
        row["metric_value"] = float(row["metric_value"])
        row["k"] = int(row["k"])
    return rows


def config_to_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)

    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.integer, np.floating)):
            return obj.item()
        return obj

    return clean(d)


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ExperimentResult:
    points: list[CurvePoint]
    summary: list[dict]
    meta: dict
    output_dir: str | None


def run_experiment(config: ExperimentConfig, write: bool = True,
                   render: bool = True) -> ExperimentResult:
    """Run every (strategy, seed) cell; failed cells are recorded and the
    rest still complete."""
    start = time.monotonic()
    all_points: list[CurvePoint] = []
    cells = []
    for strategy in config.strategies:
        for seed in config.seeds:
            try:
                points, cell_meta = run_cell(config, strategy, seed)
                all_points.extend(points)
            except ConfigError:
                raise
            except Exception as exc:  # noqa: BLE001 - cell isolation
                cell_meta = {"strategy": strategy, "seed": seed,
                             "status": f"failed: {exc}", "rounds": []}
            cells.append(cell_meta)
    summary = summarize(all_points)
    meta = {
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
        "wall_time_s": time.monotonic() - start,
        "cells": cells,
    }
    out_dir = None
    if write:
        out_dir = config.output_dir
        os.makedirs(out_dir, exist_ok=True)
        write_curves_csv(all_points, os.path.join(out_dir, "curves.csv"))
        write_summary_csv(summary, os.path.join(out_dir, "curves_summary.csv"))
        _atomic_write(os.path.join(out_dir, "meta.json"),
                      json.dumps(meta, indent=2).encode())
        if render and all_points:
            from . import plots

            plots.render_learning_curves(
                [p.as_row() for p in all_points],
                os.path.join(out_dir, "learning_curves.png"),
            )
    return ExperimentResult(all_points, summary, meta, out_dir)


def sweep_clusters(config: ExperimentConfig, k_values,
                   write: bool = True) -> ExperimentResult:
    """Cluster-count ablation for the diversity mechanism.

    The endpoints k = 1 and k = budget are always included. Only the
    dual-variable strategy is swept; seeds are shared across k values.
    """
    ks = sorted(set(int(k) for k in k_values) | {1, config.budget})
    for k in ks:
        if k > config.budget:
            raise ConfigError(f"k = {k} exceeds the budget {config.budget}")
    all_points: list[CurvePoint] = []
    cells = []
    start = time.monotonic()
    for k in ks:
        sub = replace(config, k_clusters=k, strategies=("ally",))
        result = run_experiment(sub, write=False)
        all_points.extend(result.points)
        cells.extend(result.meta["cells"])
    summary = summarize(all_points)
    meta = {
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
        "k_values": ks,
        "wall_time_s": time.monotonic() - start,
        "cells": cells,
    }
    out_dir = None
    if write:
        out_dir = config.output_dir
        os.makedirs(out_dir, exist_ok=True)
        write_curves_csv(all_points, os.path.join(out_dir, "curves.csv"))
        write_summary_csv(summary, os.path.join(out_dir, "curves_summary.csv"))
        _atomic_write(os.path.join(out_dir, "meta.json"),
                      json.dumps(meta, indent=2).encode())
        if all_points:
            from . import plots

            plots.render_learning_curves(
                [p.as_row() for p in all_points],
                os.path.join(out_dir, "learning_curves.png"),
            )
    return ExperimentResult(all_points, summary, meta, out_dir)


def _strategy_gap(points: list[CurvePoint], seed: int) -> float:
    """Mean over rounds of (ally metric - random metric) for one seed."""
    ally = {p.round: p.metric_value for p in points
            if p.strategy == "ally" and p.seed == seed}
    rand = {p.round: p.metric_value for p in points
            if p.strategy == "random" and p.seed == seed}
    rounds = sorted(set(ally) & set(rand))
    return float(np.mean([ally[r] - rand[r] for r in rounds]))


def sweep_redundancy(config: ExperimentConfig, factor: int,
                     write: bool = True) -> dict:
    """Compare the dual-variable strategy against random sampling on the
    original pool and on a pool where every sample is cloned `factor`
    times. Reports the per-seed accuracy gap on each pool and how many
    selected samples were exact duplicates of already-labeled rows."""
    if factor < 2:
        raise ConfigError("redundancy factor must be >= 2")
    start = time.monotonic()
    variants = {}
    for name, f in (("original", 1), ("cloned", factor)):
        sub = replace(config, strategies=("ally", "random"),
                      redundancy_factor=f,
                      output_dir=os.path.join(config.output_dir, name))
        variants[name] = run_experiment(sub, write=write)
    gap_rows = []
    for seed in config.seeds:
        row = {"seed": seed}
        for name in ("original", "cloned"):
            row[f"gap_{name}"] = _strategy_gap(variants[name].points, seed)
        row["gap_shrank"] = row["gap_cloned"] < row["gap_original"]
        gap_rows.append(row)
    dup_counts = {
        name: int(sum(r["n_duplicate_of_labeled"]
                      for cell in variants[name].meta["cells"]
                      if cell["status"] == "ok" and cell["strategy"] == "ally"
                      for r in cell["rounds"]))
        for name in ("original", "cloned")
    }
    report = {
        "factor": factor,
        "gaps": gap_rows,
        "n_seeds_gap_shrank": int(sum(r["gap_shrank"] for r in gap_rows)),
        "duplicate_selections": dup_counts,
        "wall_time_s": time.monotonic() - start,
    }
    if write:
        os.makedirs(config.output_dir, exist_ok=True)
        import io

        buf = io.StringIO()
        writer = csvlib.DictWriter(
            buf, fieldnames=("seed", "gap_original", "gap_cloned", "gap_shrank"))
        writer.writeheader()
        for row in gap_rows:
            writer.writerow(row)
        _atomic_write(os.path.join(config.output_dir, "redundancy_summary.csv"),
                      buf.getvalue().encode())
        _atomic_write(os.path.join(config.output_dir, "redundancy_report.json"),
                      json.dumps(report, indent=2).encode())
    return report


# --- config file handling -------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines; blank lines and # comments are ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _as_int(key, v):
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {v!r}") from None


def _as_float(key, v):
    try:
        return float(v)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {v!r}") from None


def _as_int_list(key, v):
    return tuple(_as_int(key, part) for part in str(v).split(",") if part.strip() != "")


def _as_str_list(key, v):
    return tuple(part.strip() for part in str(v).split(",") if part.strip())


def build_config(values: dict[str, str]) -> ExperimentConfig:
    """Build an ExperimentConfig from flat key/value pairs."""
    v = dict(values)

    def pop(key, default=None):
        return v.pop(key, default)

    source = pop("dataset.source", "synth_blobs")
    try:
        dataset = DatasetSpec(
            source=source,
            rng_seed=_as_int("dataset.rng_seed", pop("dataset.rng_seed", 0)),
            normalization=pop("dataset.normalization", "none"),
            images_path=pop("dataset.images_path"),
            labels_path=pop("dataset.labels_path"),
            test_images_path=pop("dataset.test_images_path"),
            test_labels_path=pop("dataset.test_labels_path"),
            csv_path=pop("dataset.csv_path"),
            target_columns=_as_str_list("dataset.target_columns",
                                        pop("dataset.target_columns", "")),
            feature_columns=(
                _as_str_list("dataset.feature_columns", fc)
                if (fc := pop("dataset.feature_columns")) is not None else None
            ),
            test_fraction=_as_float("dataset.test_fraction",
                                    pop("dataset.test_fraction", 0.2)),
            n_per_class=_as_int("dataset.n_per_class", pop("dataset.n_per_class", 100)),
            n_classes=_as_int("dataset.n_classes", pop("dataset.n_classes", 4)),
            dim=_as_int("dataset.dim", pop("dataset.dim", 2)),
            spread=_as_float("dataset.spread", pop("dataset.spread", 0.5)),
            n_test_per_class=_as_int("dataset.n_test_per_class",
                                     pop("dataset.n_test_per_class", 50)),
            n_samples=_as_int("dataset.n_samples", pop("dataset.n_samples", 500)),
            noise=_as_float("dataset.noise", pop("dataset.noise", 0.1)),
            n_test=_as_int("dataset.n_test", pop("dataset.n_test", 200)),
        )
        pdcl_cfg = PDCLConfig(
            eta_p=_as_float("pdcl.eta_p", pop("pdcl.eta_p", 0.005)),
            eta_d=_as_float("pdcl.eta_d", pop("pdcl.eta_d", 0.05)),
            T=_as_int("pdcl.T", pop("pdcl.T", 200)),
            T_p=_as_int("pdcl.T_p", pop("pdcl.T_p", 1)),
            epsilon=_as_float("pdcl.epsilon", pop("pdcl.epsilon", 0.2)),
            patience=_as_int("pdcl.patience", pop("pdcl.patience", 6)),
            validation_fraction=_as_float(
                "pdcl.validation_fraction", pop("pdcl.validation_fraction", 0.1)),
            batch_size=_as_int("pdcl.batch_size", pop("pdcl.batch_size", 64)),
        )
        head_cfg = DualHeadConfig(
            hidden_dims=_as_int_list("dual_head.hidden_dims",
                                     pop("dual_head.hidden_dims", "64,32,16")),
            lr=_as_float("dual_head.lr", pop("dual_head.lr", 0.01)),
            epochs=_as_int("dual_head.epochs", pop("dual_head.epochs", 400)),
        )
        config = ExperimentConfig(
            dataset=dataset,
            hidden_dims=_as_int_list("arch.hidden_dims", pop("arch.hidden_dims", "64,64")),
            activation=pop("arch.activation", "relu"),
            pdcl=pdcl_cfg,
            dual_head=head_cfg,
            strategies=_as_str_list("strategies", pop("strategies", "ally,random")),
            budget=_as_int("budget", pop("budget", 200)),
            n_initial=_as_int("n_initial", pop("n_initial", 100)),
            n_rounds=_as_int("n_rounds", pop("n_rounds", 3)),
            k_clusters=_as_int("k_clusters", pop("k_clusters", 10)),
            seeds=_as_int_list("seeds", pop("seeds", "0")),
            output_dir=pop("output_dir", "out"),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if v:
        raise ConfigError(f"unknown config keys: {sorted(v)}")
    return config


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return build_config(parse_config_text(text))
