"""Seeded experiment runs, metrics files and summaries.

Layout of an output directory::

    config.txt               rendered configuration
    test_*                   the same for frozen-policy evaluation
    metrics_seed<S>.csv      one per seed: header line, then one row per slot
    summary.json             final-window statistics per seed and across seeds
    checkpoints/seed<S>_user<K>[_actor|_critic].ckpt

Numbers are written with 17 significant digits, so files are byte-identical
across reruns of the same configuration.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import neural as nn
from . import orchestration as orch
from .config import ExperimentConfig, load_config, render
from .env import init_network
from .errors import InvalidParameterError
from .wmmse import exhaustive_benchmark

log = logging.getLogger(__name__)

BASE_COLUMNS = orch.MetricsLog.BASE
FMT = "%.17g"


# ---------------------------------------------------------------- metrics files

def metrics_path(out, seed, kind="metrics") -> Path:
    return Path(out) / f"{kind}_seed{seed}.csv"


def write_metrics(path, log_: orch.MetricsLog):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(log_.columns) + "\n")
        np.savetxt(fh, log_.data, fmt=FMT, delimiter=",")


def read_metrics(path) -> tuple[list[str], np.ndarray]:
    """Columns and data of a metrics file; checks the fixed schema."""
    with open(path, encoding="ascii") as fh:
        columns = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    n_user = len(columns) - len(BASE_COLUMNS)
    K = n_user // 3
    expected = orch.MetricsLog(max(K, 1), 1).columns
    if tuple(columns[:len(BASE_COLUMNS)]) != BASE_COLUMNS or n_user % 3 or columns != expected:
        raise InvalidParameterError(f"{path}: unexpected metrics header")
    if data.shape[0] == 0:
        raise InvalidParameterError(f"{path}: no rows")
    if data.shape[1] != len(columns):
        raise InvalidParameterError(f"{path}: rows do not match the header")
    if np.any(np.diff(data[:, 0]) <= 0):
        raise InvalidParameterError(f"{path}: slot indices must increase")
    return columns, data


# ---------------------------------------------------------------- summaries

def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` values (fewer at the start)."""
    x = np.asarray(x, dtype=float)
    if not 1 <= window <= len(x):
        raise InvalidParameterError(f"window {window} must lie in [1, {len(x)}]")
    if window == 1:
        return x.copy()
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _ffill(x):
    x = np.asarray(x, dtype=float)
    valid = ~np.isnan(x)
    pos = np.where(valid, np.arange(len(x)), -1)
    np.maximum.accumulate(pos, out=pos)
    return np.where(pos >= 0, x[np.maximum(pos, 0)], np.nan)


def _db(p):
    return 10 * math.log10(p) if p > 0 else None


@dataclass
class RunSummary:
    file: str
    slots: int
    sum_rate: float  # mean over the final window
    sum_log_rate: float
    benchmark: float | None
    ratio: float | None
    mean_power: list
    mean_power_db: list
    ma_sum_rate: np.ndarray = field(repr=False)
    ma_sum_log_rate: np.ndarray = field(repr=False)

    def record(self) -> dict:
        out = asdict(self)
        del out["ma_sum_rate"], out["ma_sum_log_rate"]
        return out


@dataclass
class Summary:
    window: int
    runs: list

    def mean(self, name):
        vals = [getattr(r, name) for r in self.runs]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    def record(self) -> dict:
        return {"window": self.window, "runs": [r.record() for r in self.runs],
                "mean": {k: self.mean(k) for k in ("sum_rate", "sum_log_rate", "benchmark",
                                                   "ratio")}}

    def to_json(self) -> str:
        return json.dumps(self.record(), indent=2, sort_keys=True) + "\n"

    def curves_csv(self) -> str:
        """Plot-ready moving averages: slot, then sum-rate and sum-log-rate per run."""
        n = min(len(r.ma_sum_rate) for r in self.runs)
        cols = ["slot"] + [f"{m}_{i}" for i in range(len(self.runs))
                           for m in ("ma_sum_rate", "ma_sum_log_rate")]
        data = [np.arange(n)]
        for r in self.runs:
            data += [r.ma_sum_rate[:n], r.ma_sum_log_rate[:n]]
        rows = np.column_stack(data)
        lines = [",".join(cols)] + [",".join(FMT % v for v in row) for row in rows]
        return "\n".join(lines) + "\n"


def summarize_run(path, window: int) -> RunSummary:
    columns, data = read_metrics(path)
    col = {c: data[:, i] for i, c in enumerate(columns)}
    T = len(data)
    if window > T:
        raise InvalidParameterError(f"{path}: window {window} exceeds the {T} recorded slots")
    tail = slice(T - window, T)
    bench = _ffill(col["benchmark"])[tail]
    bench_mean = float(bench.mean()) if not np.any(np.isnan(bench)) else None
    sr = float(col["sum_rate"][tail].mean())
    K = (len(columns) - len(BASE_COLUMNS)) // 3
    power = [float(col[f"power_{k}"][tail].mean()) for k in range(K)]
    return RunSummary(
        file=Path(path).name, slots=T, sum_rate=sr,
        sum_log_rate=float(col["sum_log_rate"][tail].mean()),
        benchmark=bench_mean, ratio=sr / bench_mean if bench_mean else None,
        mean_power=power, mean_power_db=[_db(p) for p in power],
        ma_sum_rate=moving_average(col["sum_rate"], window),
        ma_sum_log_rate=moving_average(col["sum_log_rate"], window))


def summarize(paths, window: int) -> Summary:
    """Final-window means, benchmark ratios and per-user power over metrics files.

    Power is averaged over the final window in linear units; the dB figures are
    ``10 log10`` of those means.  The benchmark is carried forward between the
    slots where it was computed.
    """
    paths = [paths] if isinstance(paths, (str, Path)) else list(paths)
    if not paths:
        raise InvalidParameterError("need at least one metrics file")
    return Summary(window, [summarize_run(p, window) for p in paths])


# ---------------------------------------------------------------- runs

def _check_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise InvalidParameterError(f"output directory {out} is not writable")
    return out


def _checkpoint_files(out, seed, k, agent):
    base = Path(out) / "checkpoints" / f"seed{seed}_user{k}"
    if agent == "dqn":
        return [base.with_suffix(".ckpt")]
    return [base.parent / f"{base.name}_actor.ckpt", base.parent / f"{base.name}_critic.ckpt"]


def save_models(out, seed, models, config: ExperimentConfig):
    specs = [s for s in orch.model_specs(config.net, config.train) if s is not None]
    (Path(out) / "checkpoints").mkdir(parents=True, exist_ok=True)
    for k, model in enumerate(models):
        parts = [model] if config.train.agent == "dqn" else list(model)
        for path, spec, w in zip(_checkpoint_files(out, seed, k, config.train.agent), specs,
                                 parts):
            nn.save_checkpoint(path, spec, w)


def load_models(out, seed, config: ExperimentConfig) -> list:
    specs = [s for s in orch.model_specs(config.net, config.train) if s is not None]
    models = []
    for k in range(config.net.K):
        files = _checkpoint_files(out, seed, k, config.train.agent)
        parts = [nn.load_checkpoint(p, s) for p, s in zip(files, specs)]
        models.append(parts[0] if len(parts) == 1 else tuple(parts))
    return models


def train_seed(config: ExperimentConfig, seed: int) -> Path:
    res = orch.run_training(config.net, config.train, seed)
    path = metrics_path(config.out, seed)
    write_metrics(path, res.log)
    if config.checkpoints:
        save_models(config.out, seed, res.models, config)
    log.info("seed %d: %d slots, final sum-rate %.4g", seed, len(res.log),
             res.log.column("sum_rate")[-config.window:].mean())
    return path


def evaluate_seed(config: ExperimentConfig, seed: int) -> Path:
    models = load_models(config.out, seed, config)
    res = orch.run_test(models, config.net, config.train, config.T_test, seed,
                        benchmark=config.benchmark)
    path = metrics_path(config.out, seed, "test")
    write_metrics(path, res.log)
    return path


def _run_seeds(fn, config, jobs):
    if jobs > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(min(jobs, len(config.seeds))) as pool:
            return list(pool.map(fn, [config] * len(config.seeds), config.seeds))
    return [fn(config, s) for s in config.seeds]


def _execute(fn, config: ExperimentConfig, jobs: int, prefix: str, window: int) -> int:
    try:
        out = _check_out(config.out)
        (out / f"{prefix}config.txt").write_text(render(config), encoding="utf-8")
        paths = _run_seeds(fn, config, jobs)
        # join barrier: the summary only reads finished metrics files
        summary = summarize(paths, window)
        (out / f"{prefix}summary.json").write_text(summary.to_json(), encoding="utf-8")
    except Exception as exc:  # noqa: BLE001 - any component failure maps to a nonzero exit
        log.error("%s failed: %s: %s", fn.__name__, type(exc).__name__, exc)
        return 1
    return 0


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> int:
    """Train every seed, write metrics, checkpoints and ``summary.json``.  Returns an exit status."""
    return _execute(train_seed, config, jobs, "", config.window)


def run_evaluation(config: ExperimentConfig, jobs: int = 1) -> int:
    """Evaluate saved checkpoints with frozen policies for ``T_test`` slots."""
    return _execute(evaluate_seed, config, jobs, "test_",
                    min(config.window, config.T_test))


def benchmark_report(config: ExperimentConfig) -> list[dict]:
    """Exhaustive-search benchmark on each seed's initial network."""
    rows = []
    for seed in config.seeds:
        state = init_network(config.net, orch.seed_streams(seed)["channel"])
        b = exhaustive_benchmark(state, config.net)
        rows.append({"seed": seed, "sum_rate": b.sum_rate,
                     "assignment": [int(a) for a in b.assignment],
                     "powers": [float(p) for p in b.powers], "n_solves": b.n_solves})
    return rows


def account_report(config: ExperimentConfig, bits: int = 11, mode: str = "table") -> dict:
    rec = orch.info_exchange_account(config.net, config.train.G, config.train.T_Fed, bits,
                                     mode=mode)
    return asdict(rec)


def config_of(out) -> ExperimentConfig:
    """Configuration saved next to a run's metrics."""
    return load_config(Path(out) / "config.txt")
