"""Shared fixtures: cached desk-scale training runs and the criterion report.

Training the acceptance models takes a while on one CPU, so finished runs are
stored under ``.acceptance_cache/`` (override with ``TILAB_ACCEPTANCE_CACHE``).
The cache key hashes the full config together with the source of every module
that influences training, so any code or config change retrains.  Delete the
directory to force a fresh run.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import tilab
from tilab.checkpoint import load_checkpoint, save_checkpoint
from tilab.estimator import AttentionOnlyTransformer
from tilab.mechanistic import InductionRecord, induction_timeline, make_probe_set
from tilab.numerics import spawn_rng
from tilab.train import RegimeConfig, load_hierarchy, run_training, steepest_drop_iteration

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("TILAB_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
CONFIGS = ROOT / "configs"
SEEDS = (0, 1, 2, 3, 4)
TIMELINE_PROBES = 200
_SOURCES = ("model.py", "train.py", "taskgen.py", "optim.py", "estimator.py", "numerics.py", "mechanistic.py",
            "checkpoint.py")

CRITERIA: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def desk_config(name: str, seed: int) -> RegimeConfig:
    data = json.loads((CONFIGS / f"{name}.json").read_text())
    data = {k: v for k, v in data.items() if k in RegimeConfig.__dataclass_fields__}
    data["seed"] = seed
    return RegimeConfig.from_dict(data)


def _cache_key(cfg: RegimeConfig) -> str:
    h = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    src = Path(tilab.__file__).parent
    for name in _SOURCES:
        h.update((src / name).read_bytes())
    h.update(str(TIMELINE_PROBES).encode())
    return h.hexdigest()[:16]


@dataclass
class CachedRun:
    config: RegimeConfig
    model: AttentionOnlyTransformer
    losses: np.ndarray
    hierarchy: object
    timeline: InductionRecord | None

    def steepest_drop_iteration(self) -> int:
        return steepest_drop_iteration(self.losses, self.config.eval_every)


def _model_factory(arch):
    return lambda p: AttentionOnlyTransformer.from_params(p, arch)


def _train_into(cfg: RegimeConfig, d: Path) -> None:
    tmp = d.with_name(d.name + ".partial")
    tmp.mkdir(parents=True, exist_ok=True)
    run = run_training(cfg, keep_checkpoints=cfg.regime.startswith("icl"))
    extra = {"losses": np.asarray(run.losses)}
    if run.hierarchy is not None:
        extra["hierarchy/items"] = run.hierarchy.items
        extra["hierarchy/ranks"] = run.hierarchy.ranks.astype(np.float64)
    save_checkpoint(tmp / "final.tlc", run.params, run.model.arch_, cfg.seed, {"config": cfg.to_dict()}, extra)
    if run.checkpoints:
        probes = make_probe_set(TIMELINE_PROBES, spawn_rng(cfg.seed, 99), cfg.n_items, cfg.D)
        rec = induction_timeline(run.checkpoints, probes, cfg.n_layers - 1, _model_factory(run.model.arch_),
                                 cfg.P, cfg.D)
        rec.to_csv(tmp / "timeline.csv")
    tmp.rename(d)


def _read_timeline(path: Path, layer: int) -> InductionRecord:
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    its = sorted({int(r[0]) for r in rows})
    H = int(rows[:, 2].max()) + 1
    strengths = rows[:, 3].reshape(len(its), H)
    return InductionRecord(its, strengths, layer, TIMELINE_PROBES)


def cached_run(name: str, seed: int) -> CachedRun:
    cfg = desk_config(name, seed)
    d = CACHE / f"{name}-seed{seed}-{_cache_key(cfg)}"
    if not d.exists():
        _train_into(cfg, d)
    ck = load_checkpoint(d / "final.tlc")
    arch = ck["arch"]
    model = AttentionOnlyTransformer.from_params(ck["params"], arch)
    timeline = _read_timeline(d / "timeline.csv", cfg.n_layers - 1) if (d / "timeline.csv").exists() else None
    return CachedRun(cfg, model, ck["extra"]["losses"], load_hierarchy(ck), timeline)
