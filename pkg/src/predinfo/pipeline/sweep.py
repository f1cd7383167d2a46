"""Information-plane sweeps over noise level, cell type, seed and noise mode.

Config files are flat ``key = value`` text; lists are comma separated and
``#`` starts a comment.  Keys are the :class:`SweepConfig` field names.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from statistics import median

import numpy as np

from .. import bho, diffcore, gib, miest, rnn
from .data import ingest
from .plot import write_frontier_csv

MODES = ("train_with_noise", "posthoc_noise")


def default_sigmas(n: int = 16) -> tuple[float, ...]:
    return tuple(float(s) for s in np.logspace(-3.0, 0.5, n))


@dataclass(frozen=True)
class SweepConfig:
    sigmas: tuple[float, ...] = field(default_factory=default_sigmas)
    cells: tuple[str, ...] = ("vanilla",)
    seeds: tuple[int, ...] = (0, 1, 2)
    modes: tuple[str, ...] = MODES
    source: str = "bho"  # "bho" or a dataset file path
    hidden_dim: int = 16
    objective: str = "mle"
    scale: str = "desk"  # desk | paper
    train_steps: int = 0  # 0 keeps the scale preset
    critic_steps: int = 0  # likewise
    critic_layers: tuple[int, ...] = ()
    t_past: int = 18
    t_future: int = 18
    total_len: int = 100
    split_index: int = 82
    n_train: int = 8192
    n_val: int = 2048
    n_test: int = 4096
    data_seed: int = 1234
    past_critic: bool = False
    workers: int = 1
    omega: float = bho.BHOParams.omega
    gamma: float = bho.BHOParams.gamma
    D: float = bho.BHOParams.D
    dt: float = bho.BHOParams.dt

    def __post_init__(self):
        for name in ("sigmas", "cells", "seeds", "modes"):
            if not getattr(self, name):
                raise ValueError(f"sweep grid {name!r} is empty")
        if any(not s > 0 for s in self.sigmas):
            raise ValueError("every evaluated sigma must be > 0")
        bad = set(self.modes) - set(MODES)
        if bad:
            raise ValueError(f"unknown modes {sorted(bad)}")
        bad = set(self.cells) - set(rnn.CELLS)
        if bad:
            raise ValueError(f"unknown cells {sorted(bad)}")
        if self.scale not in ("desk", "paper"):
            raise ValueError("scale must be 'desk' or 'paper'")
        bho.WindowSpec(self.t_past, self.t_future, self.total_len, self.split_index)

    @property
    def window(self) -> bho.WindowSpec:
        return bho.WindowSpec(self.t_past, self.t_future, self.total_len, self.split_index)

    @property
    def bho_params(self) -> bho.BHOParams:
        return bho.BHOParams(self.omega, self.gamma, self.D, self.dt)

    def train_config(self, seed: int, train_noise: bool) -> rnn.TrainConfig:
        kw = dict(objective=self.objective, seed=seed, train_noise=train_noise)
        if self.train_steps:
            kw["steps"] = self.train_steps
        return rnn.TrainConfig.paper_scale(**kw) if self.scale == "paper" else rnn.TrainConfig(**kw)

    def critic_config(self) -> miest.EarlyStopConfig:
        kw = {}
        if self.critic_steps:
            kw["max_steps"] = self.critic_steps
        if self.critic_layers:
            kw["layers"] = self.critic_layers
        return miest.EarlyStopConfig(**kw) if self.scale == "paper" else miest.EarlyStopConfig.desk_scale(**kw)


def _parse_value(kind: str, text: str):
    text = text.strip()
    if kind.startswith("tuple"):
        inner = kind[kind.index("[") + 1 : kind.index(",")].strip()
        return tuple(_parse_value(inner, t) for t in text.split(",") if t.strip())
    if kind == "bool":
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    return {"int": int, "float": float, "str": str}[kind](text)


def parse_config(text: str, **overrides) -> SweepConfig:
    kinds = {f.name: f.type for f in fields(SweepConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(kinds[key], val)
    values.update(overrides)
    return SweepConfig(**values)


def load_config(path, **overrides) -> SweepConfig:
    return parse_config(Path(path).read_text(), **overrides)


def format_config(cfg: SweepConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# jobs


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    source: rnn.SequenceSource
    dataset_id: str


def _crop(seqs, length: int, rng) -> np.ndarray:
    out = []
    for s in seqs:
        start = rng.integers(len(s) - length + 1)
        out.append(s[start : start + length])
    return np.stack(out)


@functools.lru_cache(maxsize=4)
def load_splits(cfg: SweepConfig) -> Splits:
    """Evaluation data shared by every job of a sweep (common random numbers)."""
    rng = np.random.default_rng(cfg.data_seed)
    length = cfg.total_len
    if cfg.source == "bho":
        src = bho.BHOSource(cfg.bho_params, length)
        train, val, test = (src.sample(n, rng) for n in (cfg.n_train, cfg.n_val, cfg.n_test))
        return Splits(train, val, test, src, "bho")
    ds = ingest(cfg.source, length)
    parts = [_crop(ds.split(s), length, rng) for s in ("train", "val", "test")]
    return Splits(*parts, rnn.CropSource(ds.split("train"), length), Path(cfg.source).name)


def _sigma_seed(cfg: SweepConfig, seed: int, sigma_index: int) -> list[int]:
    return [cfg.data_seed, seed, sigma_index]


def _estimate(cfg, splits, model, sigma, k, seed, **meta) -> miest.InfoPlanePoint:
    rng = np.random.default_rng(_sigma_seed(cfg, seed, k))
    reps = [rnn.collect_representations(model, d, cfg.window, sigma, rng) for d in (splits.train, splits.val, splits.test)]
    protocol = miest.EstimateProtocol(critic=cfg.critic_config(), past_critic=cfg.past_critic,
                                      seed=int(np.random.SeedSequence(_sigma_seed(cfg, seed, k)).generate_state(1)[0]))
    return miest.estimate_plane_point(*reps, protocol, seed=seed, dataset_id=splits.dataset_id, **meta)


def _train(cfg, splits, cell, seed, sigma, train_noise, out_dir, model_id):
    model = rnn.RNNModel.create(rnn.RNNConfig(cell=cell, hidden_dim=cfg.hidden_dim, input_dim=splits.train.shape[2],
                                              noise_sigma=sigma, seed=seed))
    rnn.train(model, splits.source, cfg.train_config(seed, train_noise))
    if out_dir is not None:
        rnn.save_checkpoint(model, Path(out_dir) / "models" / f"{model_id}.ckpt", meta={"model_id": model_id})
    return model


NUMERICAL_FAILURES = (rnn.TrainingDiverged, diffcore.NonFiniteError, FloatingPointError, np.linalg.LinAlgError)


def run_job(cfg: SweepConfig, cell: str, seed: int, mode: str, sigma_idx: tuple[int, ...], out_dir=None):
    """Train the job's model(s) and estimate one plane point per sigma.

    Returns ``(points, failures)``; numerical failures are recorded, not raised.
    """
    splits = load_splits(cfg)
    points, failures = [], []
    base = None
    for k in sigma_idx:
        sigma = cfg.sigmas[k]
        try:
            if mode == "posthoc_noise":
                model_id = f"{cell}-h{cfg.hidden_dim}-det-seed{seed}"
                if base is None:
                    base = _train(cfg, splits, cell, seed, 0.0, False, out_dir, model_id)
                model, train_sigma = base, 0.0
            else:
                model_id = f"{cell}-h{cfg.hidden_dim}-sigma{sigma:.4g}-seed{seed}"
                model = _train(cfg, splits, cell, seed, sigma, True, out_dir, model_id)
                train_sigma = sigma
            points.append(_estimate(cfg, splits, model, sigma, k, seed, model_id=model_id, cell=cell,
                                    train_noise_sigma=train_sigma, mode=mode))
        except NUMERICAL_FAILURES as exc:
            failures.append({"cell": cell, "seed": seed, "mode": mode, "sigma": sigma, "error": f"{type(exc).__name__}: {exc}"})
            if mode == "posthoc_noise" and base is None:
                break  # the shared model never trained; every sigma would fail the same way
    return points, failures


def plan_jobs(cfg: SweepConfig) -> list[tuple]:
    jobs = []
    all_idx = tuple(range(len(cfg.sigmas)))
    for cell in cfg.cells:
        for seed in cfg.seeds:
            for mode in cfg.modes:
                if mode == "posthoc_noise":
                    jobs.append((cell, seed, mode, all_idx))
                else:
                    jobs.extend((cell, seed, mode, (k,)) for k in all_idx)
    return jobs


def _sort_key(p: miest.InfoPlanePoint):
    return (p.cell, p.mode, p.eval_noise_sigma, p.seed)


@dataclass
class SweepResult:
    points: list[miest.InfoPlanePoint]
    failures: list[dict]
    points_csv: Path | None = None
    frontier_csv: Path | None = None


def run_sweep(cfg: SweepConfig, out_dir=None, progress=None) -> SweepResult:
    """Run every (cell, sigma, seed, mode) point of the grid.

    With ``out_dir`` the resolved config, a manifest, model checkpoints,
    ``points.csv`` (sorted, so byte-identical across reruns) and for BHO data
    ``frontier.csv`` are written there.
    """
    jobs = plan_jobs(cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "models").mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(format_config(cfg))
    started = time.time()
    points, failures = [], []

    def collect(res):
        pts, fails = res
        points.extend(pts)
        failures.extend(fails)
        if progress is not None:
            for p in pts:
                progress(p)

    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            futures = [pool.submit(run_job, cfg, *job, out_dir) for job in jobs]
            for fut in futures:
                collect(fut.result())
    else:
        for job in jobs:
            collect(run_job(cfg, *job, out_dir))
    points.sort(key=_sort_key)
    result = SweepResult(points, failures)
    if out_dir is not None:
        result.points_csv = out_dir / "points.csv"
        miest.write_points_csv(points, result.points_csv)
        if cfg.source == "bho":
            spectrum = gib.ib_spectrum(bho.window_covariances(cfg.bho_params, cfg.window))
            result.frontier_csv = out_dir / "frontier.csv"
            write_frontier_csv(gib.frontier_table(spectrum), result.frontier_csv)
        manifest = {
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
            "elapsed_s": round(time.time() - started, 1),
            "jobs": len(jobs),
            "points": len(points),
            "failures": failures,
            "config": dataclasses.asdict(cfg),
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return result


# ---------------------------------------------------------------------------
# audits


def dpi_violations(points, slack: float = 0.1) -> list[miest.InfoPlanePoint]:
    """Points whose future information exceeds the past upper bound by more than ``slack``."""
    return [p for p in points if not p.unbounded and p.i_future_nce > p.i_past_upper + slack]


def median_future_by_sigma(points) -> dict[float, dict[str, float]]:
    groups: dict[float, dict[str, list[float]]] = {}
    for p in points:
        if math.isfinite(p.i_future_nce):
            groups.setdefault(p.eval_noise_sigma, {}).setdefault(p.mode, []).append(p.i_future_nce)
    return {s: {m: median(v) for m, v in modes.items()} for s, modes in sorted(groups.items())}
