"""Induction strength, head ablations and PCA of query representations."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .evaluation import _all_pair_episodes, pair_class
from .model import classify, keep_only
from .numerics import PCA
from .taskgen import (
    Episode,
    Hierarchy,
    build_icl_episode,
    build_iwl_episode,
    encode_batch,
    matching_label_position,
    sample_hierarchy,
    unit_gaussian,
)


def label_positions(n_context: int) -> np.ndarray:
    return np.arange(1, 2 * n_context, 2)


def induction_strength(attention: np.ndarray, episode: Episode, layer: int) -> np.ndarray:
    """Per-head induction strength of the query token for one episode.

    ``attention`` is an (L, H, T, T) array of attention weights for a single
    sequence.  Strength is the weight on the label token that follows the
    context copy of the query pair minus the mean weight on the other label
    tokens.
    """
    correct = matching_label_position(episode)
    labels = label_positions(episode.n_context)
    others = labels[labels != correct]
    row = np.asarray(attention)[layer, :, -1, :]
    return row[:, correct] - row[:, others].mean(axis=1)


def make_probe_set(n_episodes: int, rng: np.random.Generator, n_items: int = 7, D: int = 64) -> list[Episode]:
    """Adjacent-query ICL episodes with fresh hierarchies (query always in context)."""
    return [build_icl_episode(sample_hierarchy(n_items, D // 2, rng), "adjacent_only", rng)
            for _ in range(n_episodes)]


def _strengths(model, probes: list[Episode], X: np.ndarray, layer: int) -> np.ndarray:
    _, trace = model.trace(X)
    rows = [induction_strength(trace.attention[:, b], e, layer) for b, e in enumerate(probes)]
    return np.mean(rows, axis=0)


def mean_induction_strength(model, probes: list[Episode], layer: int, P: int = 32, D: int = 64) -> np.ndarray:
    X, _ = encode_batch(probes, P, D)
    return _strengths(model, probes, X, layer)


@dataclass
class InductionRecord:
    iterations: list[int]
    strengths: np.ndarray  # (n_checkpoints, n_heads)
    layer: int
    n_probes: int

    def max_head(self) -> np.ndarray:
        return self.strengths.max(axis=1)

    def first_crossing(self, threshold: float = 0.5) -> int | None:
        hits = np.flatnonzero(self.max_head() > threshold)
        return None if hits.size == 0 else self.iterations[int(hits[0])]

    def rows(self):
        for it, s in zip(self.iterations, self.strengths):
            for h, v in enumerate(s):
                yield it, self.layer, h, float(v)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "layer", "head", "strength"])
            for it, layer, h, v in self.rows():
                w.writerow([it, layer, h, repr(v)])


def induction_timeline(checkpoints, probes: list[Episode], layer: int, model_factory,
                       P: int = 32, D: int = 64) -> InductionRecord:
    """Mean per-head strength at each ``(iteration, params)`` checkpoint.

    ``model_factory(params)`` must return an object with a ``trace`` method.
    The same probe episodes are used at every checkpoint.
    """
    checkpoints = list(checkpoints)
    if len(checkpoints) < 2:
        raise ValueError("a timeline needs at least two checkpoints")
    X, _ = encode_batch(probes, P, D)
    its, rows = [], []
    for it, params in checkpoints:
        its.append(int(it))
        rows.append(_strengths(model_factory(params), probes, X, layer))
    return InductionRecord(its, np.array(rows), layer, len(probes))


@dataclass
class AblationOutcome:
    spec: str
    ablated: frozenset
    accuracy: float
    head: int | None = None
    strength: float | None = None


def _accuracy(model, X, y, ablation) -> float:
    return float(np.mean(classify(model.predict(X, ablation=ablation)) == np.sign(y)))


def ablation_sweep_single(model, probes: list[Episode], layer: int, P: int = 32, D: int = 64,
                          strengths: np.ndarray | None = None) -> list[AblationOutcome]:
    """Adjacent-query accuracy with each head of ``layer`` removed in turn."""
    X, y = encode_batch(probes, P, D)
    if strengths is None:
        strengths = _strengths(model, probes, X, layer)
    out = []
    for h in range(model.arch_.n_heads):
        abl = frozenset({(layer, h)})
        out.append(AblationOutcome(f"ablate L{layer}H{h}", abl, _accuracy(model, X, y, abl), h, float(strengths[h])))
    return out


def select_anchor(single: list[AblationOutcome], baseline: float) -> int:
    """Head whose removal costs the most accuracy (lowest index on ties)."""
    drops = [baseline - o.accuracy for o in single]
    return single[int(np.argmax(drops))].head


def ablation_keep_pair(model, probes: list[Episode], layer: int, anchor: int, P: int = 32, D: int = 64,
                       strengths: np.ndarray | None = None) -> list[AblationOutcome]:
    """Accuracy keeping only ``{anchor, h}`` in ``layer``, for every ``h != anchor``."""
    H = model.arch_.n_heads
    if not 0 <= anchor < H:
        raise IndexError(f"anchor head {anchor} out of range for {H} heads")
    X, y = encode_batch(probes, P, D)
    if strengths is None:
        strengths = _strengths(model, probes, X, layer)
    out = []
    for h in range(H):
        if h == anchor:
            continue
        abl = frozenset(keep_only(layer, {anchor, h}, model.arch_.n_layers, H))
        out.append(AblationOutcome(f"keep L{layer}H{anchor}+H{h}", abl, _accuracy(model, X, y, abl), h, float(strengths[h])))
    return out


def keep_set_accuracy(model, probes: list[Episode], layer: int, keep, P: int = 32, D: int = 64) -> float:
    X, y = encode_batch(probes, P, D)
    abl = keep_only(layer, keep, model.arch_.n_layers, model.arch_.n_heads)
    return _accuracy(model, X, y, abl)


def write_ablation_csv(path, outcomes: list[AblationOutcome]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["spec", "accuracy", "head", "strength"])
        for o in outcomes:
            w.writerow([o.spec, repr(o.accuracy), "" if o.head is None else o.head,
                        "" if o.strength is None else repr(o.strength)])


@dataclass
class RepresentationPCA:
    """PCA of averaged final-layer query residuals, one row per ordered pair."""

    pca: PCA
    projections: np.ndarray
    cells: list[tuple[int, int]]
    n_items: int
    representations: np.ndarray = field(repr=False, default=None)

    @property
    def signed_distance(self) -> np.ndarray:
        return np.array([j - i for i, j in self.cells])

    @property
    def labels(self) -> np.ndarray:
        return np.sign(self.signed_distance)

    def classes(self) -> list[str]:
        return [pair_class(c, self.n_items) for c in self.cells]

    def to_csv(self, path) -> None:
        k = self.projections.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["first_rank", "second_rank", "signed_distance"] + [f"pc{i + 1}" for i in range(k)])
            for (i, j), row in zip(self.cells, self.projections):
                w.writerow([i, j, j - i] + [repr(float(v)) for v in row])

    def ratios_to_file(self, path) -> None:
        with open(path, "w") as fh:
            for i, r in enumerate(self.pca.explained_variance_ratio_):
                fh.write(f"pc{i + 1} {float(r)!r}\n")


def pca_final_hidden(model, regime: str, rng: np.random.Generator, n_contexts: int = 20,
                     hierarchy: Hierarchy | None = None, n_items: int = 7, P: int = 32, D: int = 64,
                     n_components: int | None = None) -> RepresentationPCA:
    """PCA over the 42 (for N=7) ordered-pair query representations.

    Each pair's representation is the final-layer residual of the query token
    averaged over ``n_contexts`` contexts: fresh distractor contexts around the
    fixed hierarchy for ``regime="iwl"``, fresh hierarchies with the standard
    adjacent-pair context for ``regime="icl"``.
    """
    if regime not in ("iwl", "icl"):
        raise ValueError("regime must be 'iwl' or 'icl'")
    if regime == "iwl":
        if hierarchy is None:
            raise ValueError("IWL PCA needs the training hierarchy")
        n_items = hierarchy.n_items
    n_pairs = 2 * (n_items - 1)
    total = None
    cells = None
    for _ in range(n_contexts):
        if regime == "iwl":
            h = hierarchy
            base = build_iwl_episode(h, n_pairs, unit_gaussian(2 * n_pairs, D // 2, rng), rng)
        else:
            h = sample_hierarchy(n_items, D // 2, rng)
            base = build_icl_episode(h, "adjacent_only", rng)
        items = _all_pair_episodes(base, h)
        X, _ = encode_batch([e for _, e in items], P, D)
        rep = model.transform(X)
        total = rep if total is None else total + rep
        cells = [c for c, _ in items]
    reps = total / n_contexts
    k = min(len(cells) - 1, reps.shape[1]) if n_components is None else n_components
    fitted = PCA(n_components=k).fit(reps)
    return RepresentationPCA(fitted, fitted.transform(reps), cells, n_items, reps)


def threshold_accuracy(values: np.ndarray, labels: np.ndarray) -> tuple[float, float, int]:
    """Best single-threshold sign classifier on a 1-D projection.

    Returns ``(accuracy, threshold, orientation)``; orientation +1 predicts
    positive above the threshold.
    """
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels)
    order = np.sort(values)
    cuts = np.concatenate([[order[0] - 1.0], (order[:-1] + order[1:]) / 2, [order[-1] + 1.0]])
    best = (-1.0, 0.0, 1)
    for c in cuts:
        for o in (1, -1):
            pred = np.where(o * (values - c) > 0, 1, -1)
            acc = float(np.mean(pred == labels))
            if acc > best[0]:
                best = (acc, float(c), o)
    return best


def fixed_rule_accuracy(values, labels, subset, threshold: float, orientation: int) -> float:
    """Accuracy of a given threshold rule on a subset of rows."""
    values = np.asarray(values)[subset]
    labels = np.asarray(labels)[subset]
    pred = np.where(orientation * (values - threshold) > 0, 1, -1)
    return float(np.mean(pred == labels))
