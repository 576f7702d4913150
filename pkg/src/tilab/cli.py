"""Command-line runner: ``tilab train | eval | analyze | probe``.

Every invocation writes into a fresh directory (never overwriting) with a
``manifest.json`` listing the produced files, their sha256 hashes and wall
clock timings.  Configs are flat JSON objects whose keys are the
:class:`~tilab.train.RegimeConfig` fields plus a few analysis toggles.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, svg
from .checkpoint import CheckpointError, load_checkpoint
from .estimator import AttentionOnlyTransformer
from .evaluation import distance_curve, effect_stats, evaluate_all_pairs
from .mechanistic import (
    ablation_keep_pair,
    ablation_sweep_single,
    induction_timeline,
    make_probe_set,
    pca_final_hidden,
    select_anchor,
    write_ablation_csv,
)
from .numerics import spawn_rng
from .probe import (
    CONDITIONS,
    BackendConfigError,
    generate_probe_set,
    load_probe_set,
    make_backend,
    read_answer_log,
    run_probe,
    save_probe_set,
    score_probe,
    write_answer_log,
)
from .taskgen import encode_batch
from .train import RegimeConfig, TrainingDiverged, frozen, load_hierarchy, run_training

log = logging.getLogger("tilab")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_BACKEND = 0, 2, 3, 4, 5

# keys accepted in a config file on top of the RegimeConfig fields
ANALYSIS_KEYS = {"induction": False, "ablation": False, "pca": False, "svg": False, "probe_episodes": 200}


class ConfigError(ValueError):
    pass


class BackendFailure(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def new_run_dir(parent, stem: str) -> Path:
    """``parent/stem-NNN`` with the first unused index; never reuses a directory."""
    parent = Path(parent)
    parent.mkdir(parents=True, exist_ok=True)
    k = 0
    while True:
        d = parent / f"{stem}-{k:03d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            k += 1


class RunManifest:
    """Config echo, produced files with content hashes, timings, version."""

    def __init__(self, directory: Path, command: str, config: dict):
        self.directory = Path(directory)
        self.command = command
        self.config = config
        self.files: list[Path] = []
        self.info: dict = {}
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def add(self, *paths) -> None:
        self.files.extend(Path(p) for p in paths)

    def time(self, name: str, seconds: float) -> None:
        self.timings[name] = round(seconds, 3)

    def write(self) -> Path:
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        entries = [{"path": str(p.relative_to(self.directory)) if p.is_relative_to(self.directory) else str(p),
                    "sha256": sha256_file(p)} for p in self.files]
        data = {"version": __version__, "command": self.command, "config": self.config, "files": entries,
                "info": self.info, "timings": self.timings}
        path = self.directory / "manifest.json"
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return path


def verify_manifest(path) -> list[str]:
    """Files listed in a manifest that are missing or whose hash differs."""
    path = Path(path)
    data = json.loads(path.read_text())
    bad = []
    for e in data["files"]:
        p = Path(e["path"])
        p = p if p.is_absolute() else path.parent / p
        if not p.exists() or sha256_file(p) != e["sha256"]:
            bad.append(e["path"])
    return bad


# ---------------------------------------------------------------- config


def _coerce(name: str, raw: str, typ):
    text = raw.strip()
    try:
        if typ in (bool, "bool"):
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if "int" in str(typ) and "None" in str(typ) and text.lower() == "none":
            return None
        if "int" in str(typ):
            return int(text)
        if "float" in str(typ):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None


def load_config(path=None, overrides: dict | None = None) -> tuple[RegimeConfig, dict]:
    """Parse a flat JSON config plus ``key=value`` overrides.

    Returns the regime config and the analysis toggles.  Unknown keys raise
    :class:`ConfigError` naming the key.
    """
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    types = {f.name: f.type for f in fields(RegimeConfig)}
    types.update({k: type(v).__name__ for k, v in ANALYSIS_KEYS.items()})
    for k, v in (overrides or {}).items():
        if k not in types:
            raise ConfigError(f"{k}: unknown configuration key")
        data[k] = _coerce(k, v, types[k]) if isinstance(v, str) else v
    analysis = dict(ANALYSIS_KEYS)
    for k in list(data):
        if k in ANALYSIS_KEYS:
            analysis[k] = data.pop(k)
    try:
        cfg = RegimeConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, analysis


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


# ---------------------------------------------------------------- models from checkpoints


def model_from_checkpoint(ck: dict) -> AttentionOnlyTransformer:
    arch = ck["arch"]
    return AttentionOnlyTransformer.from_params(ck["params"], arch)


def _checkpoints(run_dir: Path) -> list[Path]:
    return sorted((run_dir / "checkpoints").glob("ckpt_*.tlc"))


def _final_checkpoint(target: Path) -> Path:
    if target.is_file():
        return target
    ckpts = _checkpoints(target)
    if not ckpts:
        raise FileNotFoundError(f"{target}: expected checkpoints/ckpt_<iteration>.tlc files, found none")
    return ckpts[-1]


def _write(path: Path, text: str, manifest: RunManifest) -> Path:
    path.write_text(text)
    manifest.add(path)
    return path


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    sets = _parse_sets(args.set)
    for key in ("regime", "iterations", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            sets[key] = str(val)
    cfg, analysis = load_config(args.config, sets)
    run_dir = new_run_dir(args.out or "runs", f"{cfg.regime}-seed{cfg.seed}")
    ck_dir = run_dir / "checkpoints"
    ck_dir.mkdir()
    echo = {**cfg.to_dict(), **analysis}
    man = RunManifest(run_dir, "train", echo)
    _write(run_dir / "config.json", json.dumps(echo, indent=2, sort_keys=True) + "\n", man)
    t = time.perf_counter()

    def progress(it, run):
        log.info("iteration %d loss %.5f", it, float(np.mean(run.losses[-cfg.eval_every:])))

    try:
        run = run_training(cfg, checkpoint_dir=ck_dir, keep_checkpoints=False, progress=progress)
    except TrainingDiverged as exc:
        man.info["diverged"] = str(exc)
        man.add(*sorted(ck_dir.glob("*.tlc")))
        man.write()
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    man.time("train", time.perf_counter() - t)
    man.add(*run.write_curves(run_dir))
    man.add(*(Path(p) for p in run.checkpoint_paths))
    if analysis["svg"]:
        ends, means = run.window_losses()
        _write(run_dir / "loss.svg", svg.lines(list(ends), {"loss": means}, "training loss", "iteration", "MSE"), man)
    man.write()
    for which in ("induction", "ablation", "pca"):
        if analysis[which] and not (which in ("induction", "ablation") and cfg.regime == "iwl"):
            _analyze(run_dir, which, analysis["probe_episodes"], analysis["svg"], cfg.seed)
    print(run_dir)
    return EXIT_OK


def _eval_kind(cfg: dict, transfer: bool) -> str:
    regime = cfg["regime"]
    if regime == "linreg_pretrain" and not transfer:
        raise ConfigError("regime: linreg_pretrain checkpoints are evaluated with --transfer")
    return "iwl" if regime == "iwl" else "icl"


def cmd_eval(args) -> int:
    ck_path = _final_checkpoint(Path(args.checkpoint))
    ck = load_checkpoint(ck_path)
    cfg = ck["meta"].get("config", {})
    kind = _eval_kind(cfg, args.transfer)
    n_items, P, D = cfg.get("n_items", 7), cfg.get("P", 32), cfg.get("D", 64)
    seed = cfg.get("seed", 0) if args.seed is None else args.seed
    model = model_from_checkpoint(ck)
    if args.transfer:
        model = frozen(model)
    before = model.params_.flatten().copy()
    out = new_run_dir(args.out if args.out else ck_path.parent.parent, "eval")
    man = RunManifest(out, "eval", {"checkpoint": str(ck_path), "transfer": args.transfer, "episodes": args.episodes,
                                    "seed": seed, "kind": kind})
    t = time.perf_counter()
    rep = evaluate_all_pairs(model, kind, args.episodes, spawn_rng(seed, 3, 10**6),
                             hierarchy=load_hierarchy(ck), n_items=n_items, P=P, D=D)
    man.time("evaluate", time.perf_counter() - t)
    if args.transfer and not np.array_equal(before, model.params_.flatten()):
        raise AssertionError("transfer evaluation changed the parameters")
    rep.to_csv(out / "pairs.csv")
    man.add(out / "pairs.csv")
    curve = distance_curve(rep)
    _write(out / "distance.csv", "distance,accuracy\n" + "".join(f"{d},{a!r}\n" for d, a in curve.items()), man)
    _write(out / "effects.txt", effect_stats(rep).summary() +
           "".join(f"class_{k}: {v:.6f}\n" for k, v in rep.class_accuracy().items()), man)
    if args.svg:
        n = rep.n_items
        m = np.full((n, n), np.nan)
        for (i, j) in rep.cells():
            m[i - 1, j - 1] = rep.accuracy((i, j))
        names = [chr(ord("A") + k) if n <= 26 else str(k + 1) for k in range(n)]
        _write(out / "pairs.svg", svg.heatmap(m, names, names, "accuracy by (first, second) item"), man)
    man.write()
    print(out)
    return EXIT_OK


def _analyze(run_dir: Path, which: str, n_probes: int, want_svg: bool, seed: int) -> Path:
    ckpts = _checkpoints(run_dir)
    if not ckpts:
        raise FileNotFoundError(f"{run_dir}: expected checkpoints/ckpt_<iteration>.tlc files, found none")
    final = load_checkpoint(ckpts[-1])
    cfg = final["meta"].get("config", {})
    n_items, P, D = cfg.get("n_items", 7), cfg.get("P", 32), cfg.get("D", 64)
    out = new_run_dir(run_dir, f"analysis-{which}")
    man = RunManifest(out, f"analyze {which}", {"run": str(run_dir), "probe_episodes": n_probes, "seed": seed})
    model = model_from_checkpoint(final)
    layer = final["arch"].n_layers - 1
    probes = make_probe_set(n_probes, spawn_rng(seed, 11), n_items, D)
    t = time.perf_counter()
    if which == "induction":
        if len(ckpts) < 2:
            raise FileNotFoundError(f"{run_dir}: induction timeline needs at least two checkpoints "
                                    f"(checkpoints/ckpt_<iteration>.tlc)")
        loaded = [load_checkpoint(p) for p in ckpts]
        series = [(c["meta"]["iteration"], c["params"]) for c in loaded]
        arch = final["arch"]
        rec = induction_timeline(series, probes, layer,
                                 lambda p: AttentionOnlyTransformer.from_params(p, arch),
                                 P, D)
        rows = []
        for lyr in range(arch.n_layers):
            rows.append(rec if lyr == layer else induction_timeline(
                series, probes, lyr,
                lambda p: AttentionOnlyTransformer.from_params(p, arch), P, D))
        with open(out / "induction.csv", "w") as fh:
            fh.write("iteration,layer,head,strength\n")
            for r in rows:
                for it, lyr, h, v in r.rows():
                    fh.write(f"{it},{lyr},{h},{v!r}\n")
        man.add(out / "induction.csv")
        man.info["first_crossing_0.5"] = rec.first_crossing(0.5)
        if want_svg:
            _write(out / "induction.svg", svg.lines(rec.iterations, {f"head {h}": rec.strengths[:, h]
                                                                      for h in range(rec.strengths.shape[1])},
                                                    "induction strength", "iteration", "strength"), man)
    elif which == "ablation":
        X, y = encode_batch(probes, P, D)
        baseline = model.sign_accuracy(X, y)
        single = ablation_sweep_single(model, probes, layer, P, D)
        anchor = select_anchor(single, baseline)
        pairs = ablation_keep_pair(model, probes, layer, anchor, P, D)
        write_ablation_csv(out / "ablation_single.csv", single)
        write_ablation_csv(out / "ablation_keep_pair.csv", pairs)
        man.add(out / "ablation_single.csv", out / "ablation_keep_pair.csv")
        man.info.update({"anchor_head": anchor, "baseline_accuracy": baseline, "layer": layer})
        if want_svg:
            for name, outs in (("single", single), ("keep_pair", pairs)):
                _write(out / f"ablation_{name}.svg",
                       svg.scatter([o.strength for o in outs], [o.accuracy for o in outs],
                                   labels=[o.spec for o in outs], title=f"ablation ({name})",
                                   xlabel="induction strength", ylabel="accuracy"), man)
    elif which == "pca":
        kind = "iwl" if cfg.get("regime") == "iwl" else "icl"
        res = pca_final_hidden(model, kind, spawn_rng(seed, 12), 20, hierarchy=load_hierarchy(final),
                               n_items=n_items, P=P, D=D)
        res.to_csv(out / "pca.csv")
        res.ratios_to_file(out / "pca_ratios.txt")
        man.add(out / "pca.csv", out / "pca_ratios.txt")
        if want_svg:
            _write(out / "pca.svg", svg.scatter(res.projections[:, 0], res.projections[:, 1], res.signed_distance,
                                                [f"{i},{j}" for i, j in res.cells], "query representations",
                                                "PC1", "PC2"), man)
    else:
        raise ConfigError(f"analysis: unknown kind {which!r}")
    man.time(which, time.perf_counter() - t)
    man.write()
    return out


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    cfg = json.loads((run_dir / "config.json").read_text()) if (run_dir / "config.json").exists() else {}
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = _analyze(run_dir, args.which, args.probes, args.svg, seed)
    print(out)
    return EXIT_OK


def cmd_probe(args) -> int:
    out = new_run_dir(args.out or "runs", f"probe-{args.action}")
    seed = 0 if args.seed is None else args.seed
    man = RunManifest(out, f"probe {args.action}", {k: v for k, v in vars(args).items()
                                                     if k not in ("func",) and not callable(v)})
    if args.action == "generate":
        conds = CONDITIONS if args.condition == "all" else [args.condition]
        qs = []
        for k, c in enumerate(conds):
            qs += generate_probe_set(c, args.n, spawn_rng(seed, 20, k), n_items=args.n_items,
                                     start_id=k * args.n)
        save_probe_set(out / "questions.jsonl", qs)
        man.add(out / "questions.jsonl")
    elif args.action == "run":
        options = _parse_sets(args.backend_option)
        if args.backend == "coin_oracle":
            options.setdefault("seed", seed)
        if "max_tokens" in options:
            options["max_tokens"] = int(options["max_tokens"])
        if "requests_per_second" in options:
            options["requests_per_second"] = float(options["requests_per_second"])
        if "extra_body" in options:
            options["extra_body"] = json.loads(options["extra_body"])
        backend = make_backend(args.backend, **options)
        qs = load_probe_set(args.questions)
        recs = run_probe(qs, backend, concurrency_limit=args.concurrency, retries=args.retries)
        write_answer_log(out / "answers.csv", recs)
        man.add(out / "answers.csv")
        failed = sum(r.error is not None for r in recs)
        man.info["failed_requests"] = failed
        _write(out / "score.csv", score_probe(recs).table(), man)
        if failed == len(recs) and recs:
            man.write()
            raise BackendFailure(f"all {failed} requests failed")
    else:
        recs = read_answer_log(args.answers)
        _write(out / "score.csv", score_probe(recs).table(), man)
    man.write()
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tilab", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="parent directory for new run directories (default runs/; eval defaults to the run directory)")
    p.add_argument("--threads", type=int, help="cap BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--regime", choices=["iwl", "icl_adjacent", "icl_all_pairs", "linreg_pretrain"])
    t.add_argument("--iterations", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="all-pairs evaluation of a checkpoint or run directory")
    e.add_argument("checkpoint")
    e.add_argument("--transfer", action="store_true", help="zero-shot TI evaluation of a frozen model")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--svg", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="mechanistic analyses of a run directory")
    a.add_argument("run")
    a.add_argument("which", choices=["induction", "ablation", "pca"])
    a.add_argument("--probes", type=int, default=200)
    a.add_argument("--svg", action="store_true")
    a.set_defaults(func=cmd_analyze)

    pr = sub.add_parser("probe", help="language-model probe harness")
    psub = pr.add_subparsers(dest="action", required=True)
    g = psub.add_parser("generate")
    g.add_argument("--condition", choices=[*CONDITIONS, "all"], default="all")
    g.add_argument("-n", type=int, default=1000, help="base questions per condition")
    g.add_argument("--n-items", type=int, default=20)
    r = psub.add_parser("run")
    r.add_argument("questions")
    r.add_argument("--backend", default="linear_oracle")
    r.add_argument("--backend-option", action="append", metavar="KEY=VALUE")
    r.add_argument("--concurrency", type=int, default=4)
    r.add_argument("--retries", type=int, default=3)
    s = psub.add_parser("score")
    s.add_argument("answers")
    for q in (g, r, s):
        q.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (ConfigError, BackendConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except BackendFailure as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
