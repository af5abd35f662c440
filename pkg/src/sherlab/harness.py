"""Experiment orchestration: JSON configs, multi-seed runs, percentile
aggregation, and CSV/SVG emission."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, envs
from .curriculum import MODES, SherConfig, count_nonneg, run_sher
from .runlog import CYCLE_COLUMNS, RunLog

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ENV_VAR = "SHERLAB_OUTPUT"
AGGREGATE_METRICS = ("success_rate", "nonneg_reward_cum")
PERCENTILES = (33.0, 50.0, 67.0)

_SHER_FIELDS = {f.name for f in fields(SherConfig)} - {"env", "mode", "seed", "max_cycles"}
_CURRICULUM_KEYS = ("k", "c", "critic_alpha")

__all__ = [
    "ExperimentConfig", "load_config", "config_hash", "sher_config", "run_seed",
    "run_experiment", "aggregate_runs", "aggregate_csv", "smooth", "render_svg",
    "count_nonneg", "default_output_root",
]


@dataclass
class ExperimentConfig:
    env: str = "hand"
    mode: str = "sher"
    seeds: list = field(default_factory=lambda: [0])
    budget: int = 400
    agent: dict = field(default_factory=dict)
    curriculum: dict = field(default_factory=dict)
    env_overrides: dict = field(default_factory=dict)
    output_dir: Optional[str] = None
    workers: int = 1
    smoothing_window: int = 10
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        unknown = set(self.agent) - _SHER_FIELDS
        if unknown:
            raise ValueError(f"unknown agent overrides: {sorted(unknown)}")
        unknown = set(self.curriculum) - set(_CURRICULUM_KEYS)
        if unknown:
            raise ValueError(f"unknown curriculum overrides: {sorted(unknown)}")
        if self.env not in envs.load_presets():
            raise ValueError(f"unknown env preset {self.env!r}")
        if self.workers < 1 or self.smoothing_window < 1:
            raise ValueError("workers and smoothing_window must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "schema_version" not in d:
            raise ValueError("config must declare schema_version")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def config_hash(config: ExperimentConfig) -> str:
    """Hash of everything that affects a seed's results."""
    d = config.to_dict()
    for key in ("seeds", "output_dir", "workers", "smoothing_window"):
        d.pop(key)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def sher_config(config: ExperimentConfig, seed: int) -> SherConfig:
    env_cfg = envs.preset(config.env, **config.env_overrides)
    kw = dict(config.agent)
    kw.update(config.curriculum)
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    return SherConfig(env=env_cfg, mode=config.mode, seed=int(seed), max_cycles=config.budget, **kw)


def run_seed(config: ExperimentConfig, seed: int) -> RunLog:
    return run_sher(sher_config(config, seed))


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV_VAR, "runs"))


def _output_dir(config: ExperimentConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    return default_output_root() / f"{config.env}_{config.mode}_{config_hash(config)[:10]}"


def _check_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc


def _seed_path(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}.csv"


def _write_seed(out: Path, seed: int, runlog: RunLog) -> None:
    _seed_path(out, seed).write_text(runlog.to_csv())
    extra = out / "extras"
    extra.mkdir(exist_ok=True)
    (extra / f"seed_{seed}_episodes.csv").write_text(runlog.episodes_csv())
    (extra / f"seed_{seed}_timing.csv").write_text(runlog.timing_csv())
    (extra / f"seed_{seed}_run.json").write_text(json.dumps(
        {"switches": runlog.switches, "complete": runlog.complete, "meta": runlog.meta},
        indent=2, sort_keys=True))


def _cached(out: Path, seed: int, digest: str) -> Optional[RunLog]:
    manifest = out / "manifest.json"
    path = _seed_path(out, seed)
    if not (manifest.exists() and path.exists()):
        return None
    try:
        doc = json.loads(manifest.read_text())
    except ValueError:
        return None
    if doc.get("config_hash") != digest or seed not in doc.get("seeds", []):
        return None
    runlog = RunLog.from_csv(path.read_text())
    side = out / "extras" / f"seed_{seed}_run.json"
    if side.exists():
        info = json.loads(side.read_text())
        runlog.switches = info.get("switches", [])
        runlog.complete = info.get("complete", False)
        runlog.meta = info.get("meta", {})
    return runlog


def _run_one(args):
    config, seed = args
    return seed, run_seed(config, seed)


def run_experiment(config: ExperimentConfig) -> list:
    """Run every seed (reusing results already on disk for the same config),
    write per-seed CSVs, the aggregate CSV and the manifest.

    Returns the RunLogs in seed order.
    """
    out = _output_dir(config)
    _check_writable(out)
    digest = config_hash(config)
    logs = {}
    todo = []
    for seed in config.seeds:
        cached = _cached(out, seed, digest)
        if cached is not None:
            log.info("seed %d: reusing %s", seed, _seed_path(out, seed))
            logs[seed] = cached
        else:
            todo.append(seed)
    if config.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(todo))) as pool:
            for seed, runlog in pool.map(_run_one, [(config, s) for s in todo]):
                logs[seed] = runlog
                _write_seed(out, seed, runlog)
    else:
        for seed in todo:
            logs[seed] = run_seed(config, seed)
            _write_seed(out, seed, logs[seed])
    ordered = [logs[s] for s in config.seeds]
    (out / "aggregate.csv").write_text(aggregate_csv(aggregate_runs(ordered)))
    sc = sher_config(config, config.seeds[0])
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": digest,
        "code_version": __version__,
        "seeds": list(config.seeds),
        "config": config.to_dict(),
        "resolved": {"k": sc.k, "c": sc.c, "critic_alpha": sc.critic_alpha,
                     "episodes_per_cycle": sc.episodes_per_cycle,
                     "train_steps_per_cycle": sc.train_steps_per_cycle},
        "completed": {str(s): logs[s].complete for s in config.seeds},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return ordered


def _padded(logs: Sequence[RunLog], name: str, length: int) -> np.ndarray:
    cols = []
    for lg in logs:
        v = [float(x) for x in lg.column(name)]
        if not v:
            raise ValueError("cannot aggregate an empty run")
        cols.append(v + [v[-1]] * (length - len(v)))
    return np.array(cols)


def aggregate_runs(logs: Sequence[RunLog]) -> dict:
    """Per-cycle 33rd/50th/67th percentiles across runs (shorter runs are
    padded with their last value)."""
    if not logs:
        raise ValueError("aggregate_runs needs at least one log")
    length = max(len(lg.rows) for lg in logs)
    longest = max(logs, key=lambda lg: len(lg.rows))
    result = {"cycle": np.arange(length), "runs": len(logs),
              "samples": _padded([longest], "samples", length)[0]}
    for name in AGGREGATE_METRICS:
        data = _padded(logs, name, length)
        lo, med, hi = np.percentile(data, PERCENTILES, axis=0, method="linear")
        result[name] = {"p33": lo, "median": med, "p67": hi}
    return result


def smooth(values, window: int = 10) -> np.ndarray:
    """Trailing moving average; the first points average what is available."""
    v = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def aggregate_csv(agg: dict, window: Optional[int] = None) -> str:
    """Tidy CSV of an aggregate; ``window`` smooths every curve on the way out."""
    header = ["cycle", "samples"]
    cols = [agg["cycle"], agg["samples"]]
    for name in AGGREGATE_METRICS:
        for q in ("median", "p33", "p67"):
            header.append(f"{name}_{q}")
            series = agg[name][q]
            cols.append(smooth(series, window) if window else series)
    lines = [",".join(header)]
    for i in range(len(agg["cycle"])):
        lines.append(",".join([str(int(cols[0][i])), str(int(cols[1][i]))]
                              + [repr(float(c[i])) for c in cols[2:]]))
    return "\n".join(lines) + "\n"


def read_aggregate_dir(directory) -> list:
    """RunLogs from every ``seed_*.csv`` in a directory, sorted by seed."""
    d = Path(directory)
    paths = sorted(d.glob("seed_*.csv"), key=lambda p: int(p.stem.split("_", 1)[1]))
    if not paths:
        raise FileNotFoundError(f"no seed_*.csv files in {d}")
    return [RunLog.from_csv(p.read_text()) for p in paths]


def render_svg(x, median, lo, hi, title: str, width: int = 480, height: int = 300) -> str:
    """Minimal line chart: median line over a shaded percentile band."""
    x = np.asarray(x, dtype=float)
    median, lo, hi = (np.asarray(a, dtype=float) for a in (median, lo, hi))
    pad = 40
    x0, x1 = float(x.min()), float(x.max())
    if x1 <= x0:
        x1 = x0 + 1.0
    y0, y1 = float(min(lo.min(), median.min())), float(max(hi.max(), median.max()))
    if y1 <= y0:
        y1 = y0 + 1.0

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def py(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    band = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, hi)]
    band += [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[::-1], lo[::-1])]
    line = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, median))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{title}</text>\n'
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
        f'fill="none" stroke="#999"/>\n'
        f'<polygon points="{" ".join(band)}" fill="#9ecae1" stroke="none"/>\n'
        f'<polyline points="{line}" fill="none" stroke="#08519c" stroke-width="1.5"/>\n'
        f'<text x="{pad}" y="{height - 10}" font-family="sans-serif" font-size="10">'
        f'cycles {x0:g} to {x1:g}; y {y0:.3g} to {y1:.3g}</text>\n'
        "</svg>\n"
    )
