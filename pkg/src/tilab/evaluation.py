"""Behavioral evaluation over all ordered item pairs.

A *model* here is anything with ``predict(X) -> predictions`` for a token
batch; :class:`~tilab.estimator.AttentionOnlyTransformer` qualifies, and tests
plug in hand-built oracles.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from ._validation import check_positive_int
from .model import classify
from .taskgen import (
    Episode,
    Hierarchy,
    build_icl_episode,
    build_iwl_episode,
    encode_batch,
    ordered_pairs_by_rank,
    sample_hierarchy,
    unit_gaussian,
)

CSV_HEADER = ("first_item_rank", "second_item_rank", "signed_distance", "accuracy", "n_trials")


@dataclass
class EvalReport:
    """Correct/trial counts per ordered (first_rank, second_rank) cell."""

    n_items: int
    regime: str
    n_episodes: int
    correct: dict = field(default_factory=dict)
    trials: dict = field(default_factory=dict)
    ties: int = 0

    def add(self, cell: tuple[int, int], correct: int, trials: int) -> None:
        self.correct[cell] = self.correct.get(cell, 0) + int(correct)
        self.trials[cell] = self.trials.get(cell, 0) + int(trials)

    def accuracy(self, cell: tuple[int, int]) -> float:
        return self.correct[cell] / self.trials[cell]

    def cells(self) -> list[tuple[int, int]]:
        return sorted(self.trials)

    def overall(self, cells=None) -> float:
        cells = self.cells() if cells is None else list(cells)
        n = sum(self.trials[c] for c in cells)
        return sum(self.correct[c] for c in cells) / n

    def pair_class(self, cell: tuple[int, int]) -> str:
        return pair_class(cell, self.n_items)

    def class_accuracy(self) -> dict[str, float]:
        groups: dict[str, list] = {}
        for c in self.cells():
            groups.setdefault(self.pair_class(c), []).append(c)
        return {k: self.overall(v) for k, v in sorted(groups.items())}

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = replace(self, correct=dict(self.correct), trials=dict(self.trials),
                      n_episodes=self.n_episodes + other.n_episodes, ties=self.ties + other.ties)
        for c in other.cells():
            out.add(c, other.correct[c], other.trials[c])
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for (i, j) in self.cells():
                w.writerow([i, j, j - i, repr(self.accuracy((i, j))), self.trials[(i, j)]])

    @classmethod
    def from_csv(cls, path, regime: str = "unknown") -> "EvalReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        n_items = max(max(int(r["first_item_rank"]), int(r["second_item_rank"])) for r in rows)
        rep = cls(n_items=n_items, regime=regime, n_episodes=0)
        for r in rows:
            n = int(r["n_trials"])
            rep.add((int(r["first_item_rank"]), int(r["second_item_rank"])),
                    round(float(r["accuracy"]) * n), n)
        return rep


def pair_class(cell: tuple[int, int], n_items: int) -> str:
    """``adjacent``, ``terminal`` (non-adjacent, contains rank 1 or N) or ``internal``."""
    i, j = cell
    if abs(i - j) == 1:
        return "adjacent"
    if {i, j} & {1, n_items}:
        return "terminal"
    return "internal"


def _with_query(e: Episode, q: tuple[int, int]) -> Episode:
    h = e.hierarchy
    sign = 1.0 if h.ranks[q[1]] > h.ranks[q[0]] else -1.0
    content = np.concatenate([e.items[q[0]], e.items[q[1]]])
    return replace(e, query_input=content, target=sign, query=q)


def _all_pair_episodes(base: Episode, h: Hierarchy):
    out = []
    for ri, rj in ordered_pairs_by_rank(h.n_items):
        out.append(((ri, rj), _with_query(base, (h.item_of_rank(ri), h.item_of_rank(rj)))))
    return out


def evaluate_all_pairs(model, regime: str, n_episodes: int, rng: np.random.Generator,
                       hierarchy: Hierarchy | None = None, n_items: int = 7, P: int = 32,
                       D: int = 64, batch_episodes: int = 16) -> EvalReport:
    """Accuracy of ``model`` on every ordered pair.

    ``regime="iwl"`` scores the fixed ``hierarchy`` under a fresh random
    distractor context per episode; ``regime="icl"`` samples a new hierarchy
    per episode, shows all adjacent pairs in context and queries every
    ordered pair against that context.
    """
    check_positive_int(n_episodes, "n_episodes")
    if regime not in ("iwl", "icl"):
        raise ValueError(f"regime must be 'iwl' or 'icl', got {regime!r}")
    if regime == "iwl":
        if hierarchy is None:
            raise ValueError("IWL evaluation needs the training hierarchy")
        n_items = hierarchy.n_items
    report = EvalReport(n_items=n_items, regime=regime, n_episodes=n_episodes)
    n_pairs = 2 * (n_items - 1)
    pending: list = []

    def flush():
        X, y = encode_batch([e for _, e in pending], P, D)
        pred = np.asarray(model.predict(X))
        report.ties += int(np.sum(pred == 0))
        hits = classify(pred) == np.sign(y)
        for (cell, _), ok in zip(pending, hits):
            report.add(cell, int(ok), 1)
        pending.clear()

    for k in range(n_episodes):
        if regime == "iwl":
            pool = unit_gaussian(2 * n_pairs, D // 2, rng)
            base = build_iwl_episode(hierarchy, n_pairs, pool, rng)
            h = hierarchy
        else:
            h = sample_hierarchy(n_items, D // 2, rng)
            base = build_icl_episode(h, "adjacent_only", rng)
        pending.extend(_all_pair_episodes(base, h))
        if (k + 1) % batch_episodes == 0:
            flush()
    if pending:
        flush()
    return report


def distance_curve(report: EvalReport) -> dict[int, float]:
    """Trial-weighted accuracy per |distance| 1..N-1."""
    expected = set(ordered_pairs_by_rank(report.n_items))
    missing = expected - set(report.cells())
    if missing:
        raise ValueError(f"report is missing {len(missing)} cells, e.g. {sorted(missing)[0]}")
    curve = {}
    for d in range(1, report.n_items):
        cells = [c for c in expected if abs(c[0] - c[1]) == d]
        curve[d] = report.overall(cells)
    return curve


@dataclass
class EffectStats:
    """Summary statistics; ``None`` marks a statistic that is undefined for the report."""

    distance_effect: float | None
    terminal_advantage: float | None
    memorization_gap: float | None
    terminal_by_distance: dict = field(default_factory=dict)

    def summary(self) -> str:
        def fmt(v):
            return "absent" if v is None else f"{v:.6f}"

        lines = [
            f"distance_effect: {fmt(self.distance_effect)}",
            f"terminal_advantage: {fmt(self.terminal_advantage)}",
            f"memorization_gap: {fmt(self.memorization_gap)}",
        ]
        for d, v in sorted(self.terminal_by_distance.items()):
            lines.append(f"terminal_advantage_at_distance_{d}: {v:.6f}")
        return "\n".join(lines) + "\n"


def effect_stats(report: EvalReport) -> EffectStats:
    """Distance effect, distance-matched terminal advantage and memorization gap.

    * distance effect: Spearman correlation of pooled accuracy with distance
      over distances 2..N-1;
    * terminal advantage: at each distance 2..N-3, accuracy of cells holding
      rank 1 or rank N minus accuracy of the other cells, averaged over those
      distances;
    * memorization gap: accuracy at distance 1 minus accuracy at distance 2.
    """
    n = report.n_items
    if n < 4:
        raise ValueError("effect statistics need at least four items")
    curve = distance_curve(report)
    ds = list(range(2, n))
    accs = [curve[d] for d in ds]
    if len(ds) >= 2 and np.ptp(accs) > 0:
        distance_effect = float(spearmanr(ds, accs).statistic)
    else:
        distance_effect = None

    by_d = {}
    for d in range(2, n - 2):
        cells = [c for c in report.cells() if abs(c[0] - c[1]) == d]
        term = [c for c in cells if {c[0], c[1]} & {1, n}]
        internal = [c for c in cells if not {c[0], c[1]} & {1, n}]
        if term and internal:
            by_d[d] = report.overall(term) - report.overall(internal)
    terminal_advantage = float(np.mean(list(by_d.values()))) if by_d else None
    return EffectStats(distance_effect, terminal_advantage, curve[1] - curve[2], by_d)
