"""Training regimes: MSE objective, Adam, evaluation during training, checkpoints."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._validation import check_positive_int
from .checkpoint import load_checkpoint, save_checkpoint
from .estimator import AttentionOnlyTransformer
from .evaluation import evaluate_all_pairs
from .model import ModelParams, loss_and_grad
from .numerics import spawn_rng
from .optim import AdamState
from .taskgen import REGIMES, EpisodeSampler, Hierarchy, sample_hierarchy

# stream keys for spawn_rng(seed, key, ...)
_INIT, _DATA, _HIERARCHY, _EVAL = 0, 1, 2, 3

FULL_SCALE_ITERATIONS = {"iwl": 14_000, "icl_adjacent": 40_000, "icl_all_pairs": 40_000, "linreg_pretrain": 50_000}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RegimeConfig:
    """Everything needed to reproduce a training run (desk-scale defaults)."""

    regime: str = "iwl"
    iterations: int = 5000
    batch_size: int = 64
    eval_every: int = 100
    checkpoint_every: int = 100
    eval_episodes: int = 8
    n_items: int = 7
    P: int = 32
    D: int = 64
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int | None = None
    scale_attention: bool = False
    learning_rate: float = 1e-3
    weight_decay: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    noise_std: float = 0.1
    context_len: int = 12
    seed: int = 42

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime: unknown value {self.regime!r}; expected one of {REGIMES}")
        for name in ("iterations", "batch_size", "eval_every", "checkpoint_every", "eval_episodes",
                     "n_layers", "n_heads", "P", "D", "context_len"):
            try:
                check_positive_int(getattr(self, name), name)
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{name}: {exc}") from None
        check_positive_int(self.n_items, "n_items", 2)
        if self.D % 2:
            raise ValueError("D: content dim must be even")
        n_ctx = self.context_len if self.regime == "linreg_pretrain" else 2 * (self.n_items - 1)
        if 2 * n_ctx + 1 > self.P:
            raise ValueError(f"P: {2 * n_ctx + 1} tokens exceed positional capacity {self.P}")

    @classmethod
    def full_scale(cls, regime: str, **overrides) -> "RegimeConfig":
        """Full-scale settings (P=64, D=1024, 8 heads, batch 128)."""
        base = dict(regime=regime, iterations=FULL_SCALE_ITERATIONS[regime], batch_size=128, P=64, D=1024,
                    n_heads=8, seed=42)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RegimeConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"{unknown[0]}: unknown configuration key")
        return cls(**data)

    def estimator(self) -> AttentionOnlyTransformer:
        return AttentionOnlyTransformer(
            n_layers=self.n_layers, n_heads=self.n_heads, head_dim=self.head_dim,
            scale_attention=self.scale_attention, learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            batch_size=self.batch_size, max_iter=self.iterations, random_state=self.seed,
        )


def mse_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("mse_loss needs equal, non-empty prediction and target vectors")
    d = p - t
    return float(np.mean(d * d))


def backward(params: ModelParams, X, y, ablation=None, scale: float = 1.0) -> ModelParams:
    """Gradient of the batch MSE with respect to every parameter."""
    return loss_and_grad(params, np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64),
                         ablation, scale)[1]


def window_losses(losses, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean loss per consecutive window; returns (window end iterations, means)."""
    n = len(losses) // window
    means = np.asarray(losses[: n * window], dtype=np.float64).reshape(n, window).mean(axis=1)
    return np.arange(1, n + 1) * window, means


def steepest_drop_iteration(losses, window: int) -> int:
    """End iteration of the window with the largest mean-loss decrease from the previous window."""
    ends, means = window_losses(losses, window)
    if len(means) < 2:
        raise ValueError("need at least two loss windows")
    drops = means[:-1] - means[1:]
    return int(ends[1 + int(np.argmax(drops))])


@dataclass
class TrainingRun:
    config: RegimeConfig
    model: AttentionOnlyTransformer
    losses: list[float]
    evals: list[dict] = field(default_factory=list)
    checkpoints: list[tuple[int, ModelParams]] = field(default_factory=list)
    checkpoint_paths: list[str] = field(default_factory=list)
    hierarchy: Hierarchy | None = None

    @property
    def params(self) -> ModelParams:
        return self.model.params_

    def window_losses(self, window: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        return window_losses(self.losses, self.config.eval_every if window is None else window)

    def steepest_drop_iteration(self, window: int | None = None) -> int:
        return steepest_drop_iteration(self.losses, self.config.eval_every if window is None else window)

    def write_curves(self, directory) -> list[Path]:
        d = Path(directory)
        loss_path = d / "loss.csv"
        with open(loss_path, "w") as fh:
            fh.write("iteration,loss\n")
            for i, v in enumerate(self.losses):
                fh.write(f"{i},{v!r}\n")
        acc_path = d / "accuracy.csv"
        with open(acc_path, "w") as fh:
            fh.write("iteration,pair_class,accuracy\n")
            for e in self.evals:
                fh.write(f"{e['iteration']},{e['pair_class']},{e['accuracy']!r}\n")
        return [loss_path, acc_path]


def _eval_during_training(est, cfg: RegimeConfig, hierarchy, iteration: int) -> list[dict]:
    rng = spawn_rng(cfg.seed, _EVAL, iteration)
    if cfg.regime == "iwl":
        rep = evaluate_all_pairs(est, "iwl", max(1, cfg.eval_episodes // 4), rng, hierarchy=hierarchy,
                                 P=cfg.P, D=cfg.D)
    else:
        rep = evaluate_all_pairs(est, "icl", cfg.eval_episodes, rng, n_items=cfg.n_items, P=cfg.P, D=cfg.D)
    out = [{"iteration": iteration, "pair_class": k, "accuracy": v} for k, v in rep.class_accuracy().items()]
    out.append({"iteration": iteration, "pair_class": "all", "accuracy": rep.overall()})
    return out


def _save_state(path, est, cfg, data_rng, hierarchy, losses) -> None:
    extra = {f"adam_m/{i}": a for i, a in enumerate(est.optimizer_.m.arrays())}
    extra.update({f"adam_v/{i}": a for i, a in enumerate(est.optimizer_.v.arrays())})
    extra["losses"] = np.asarray(losses, dtype=np.float64)
    if hierarchy is not None:
        extra["hierarchy/items"] = hierarchy.items
        extra["hierarchy/ranks"] = hierarchy.ranks.astype(np.float64)
    meta = {
        "iteration": est.n_iter_,
        "adam_t": est.optimizer_.t,
        "rng_state": data_rng.bit_generator.state,
        "config": cfg.to_dict(),
    }
    save_checkpoint(path, est.params_, est.arch_, seed=cfg.seed, meta=meta, extra=extra)


def load_hierarchy(ckpt: dict) -> Hierarchy | None:
    extra = ckpt["extra"]
    if "hierarchy/items" not in extra:
        return None
    return Hierarchy(items=extra["hierarchy/items"], ranks=extra["hierarchy/ranks"].astype(int))


def run_training(cfg: RegimeConfig, checkpoint_dir=None, resume_from=None, stop_after: int | None = None,
                 keep_checkpoints: bool = True, progress=None) -> TrainingRun:
    """Train one model under ``cfg``.

    Each iteration samples a batch for the regime, takes one Adam step and
    records the pre-update loss.  Parameters are snapshotted every
    ``checkpoint_every`` iterations (and at iteration 0 and the end); with a
    ``checkpoint_dir`` the snapshots are also written to disk with the full
    optimizer and sampler state, so ``resume_from`` continues bit-exactly.
    ``stop_after`` ends the loop early (used to test resumption).
    """
    data_rng = spawn_rng(cfg.seed, _DATA)
    hierarchy = None
    if cfg.regime == "iwl":
        hierarchy = sample_hierarchy(cfg.n_items, cfg.D // 2, spawn_rng(cfg.seed, _HIERARCHY))
    est = cfg.estimator()
    token_dim = cfg.P + cfg.D
    est.initialize(token_dim, spawn_rng(cfg.seed, _INIT))
    run = TrainingRun(cfg, est, est.loss_curve_, hierarchy=hierarchy)

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck["meta"]["config"] != cfg.to_dict():
            raise ValueError("checkpoint was written under a different configuration")
        est.params_ = ck["params"]
        n = len(est.params_.arrays())
        m = ModelParams(*(ck["extra"][f"adam_m/{i}"] for i in range(n)))
        v = ModelParams(*(ck["extra"][f"adam_v/{i}"] for i in range(n)))
        m.b_out = m.b_out.reshape(())
        v.b_out = v.b_out.reshape(())
        est.optimizer_ = AdamState(m, v, ck["meta"]["adam_t"])
        est.n_iter_ = ck["meta"]["iteration"]
        est.loss_curve_[:] = list(ck["extra"]["losses"])
        data_rng.bit_generator.state = ck["meta"]["rng_state"]
        if hierarchy is not None:
            hierarchy = load_hierarchy(ck)
            run.hierarchy = hierarchy

    sampler = EpisodeSampler(cfg.regime, cfg.n_items, cfg.P, cfg.D, cfg.noise_std, cfg.context_len,
                             fixed_hierarchy=hierarchy, rng=data_rng)

    def snapshot():
        it = est.n_iter_
        if keep_checkpoints:
            run.checkpoints.append((it, est.params_.copy()))
        if checkpoint_dir is not None:
            path = os.path.join(checkpoint_dir, f"ckpt_{it:07d}.tlc")
            _save_state(path, est, cfg, data_rng, hierarchy, est.loss_curve_)
            run.checkpoint_paths.append(path)

    if est.n_iter_ == 0:
        snapshot()
    end = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    while est.n_iter_ < end:
        X, y = sampler.batch(cfg.batch_size)
        try:
            est._step(X, y)
        except FloatingPointError as exc:
            if checkpoint_dir is not None:
                _save_state(os.path.join(checkpoint_dir, "diverged.tlc"), est, cfg, data_rng, hierarchy,
                            est.loss_curve_)
            raise TrainingDiverged(str(exc)) from exc
        it = est.n_iter_
        if it % cfg.eval_every == 0:
            run.evals.extend(_eval_during_training(est, cfg, hierarchy, it))
            if progress is not None:
                progress(it, run)
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            snapshot()
    return run


class FrozenTransformer(AttentionOnlyTransformer):
    """Evaluation-only view of trained parameters; any training call raises."""

    def fit(self, X, y):
        raise RuntimeError("transfer evaluation forbids parameter updates")

    def partial_fit(self, X, y):
        raise RuntimeError("transfer evaluation forbids parameter updates")

    _step = partial_fit


def transfer_eval_setup(run: TrainingRun, P: int | None = None, D: int | None = None) -> FrozenTransformer:
    """Frozen copy of a regression-pretrained model for zero-shot TI evaluation."""
    cfg = run.config
    P = cfg.P if P is None else P
    D = cfg.D if D is None else D
    if P + D != run.model.arch_.token_dim or D % 2:
        raise ValueError(f"TI tokens need dim {P + D} with even D; model expects {run.model.arch_.token_dim}")
    return frozen(run.model)


def frozen(est: AttentionOnlyTransformer) -> FrozenTransformer:
    out = FrozenTransformer(**est.get_params())
    out.arch_ = est.arch_
    out.params_ = est.params_
    out.optimizer_ = est.optimizer_
    out.loss_curve_ = list(est.loss_curve_)
    out.n_iter_ = est.n_iter_
    return out


def save_manifest(path, cfg: RegimeConfig, files: list[str]) -> None:
    with open(path, "w") as fh:
        json.dump({"version": 1, "config": cfg.to_dict(), "seed": cfg.seed, "curves": files}, fh,
                  indent=2, sort_keys=True)
