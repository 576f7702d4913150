"""Hierarchies, episodes and token encodings for the four task regimes.

Conventions
-----------
* Rank 1 is the largest item ("A").  ``signed_distance(i, j) = rank(j) - rank(i)``
  so the pair (A, G) in a seven-item hierarchy has distance +6.
* Items are unit-normalized Gaussian vectors of dimension ``D // 2``; a pair
  token's content is the concatenation of its two items.
* Label tokens carry their +/-1 (or real regression output) on content
  dimension 0 and zeros elsewhere.
* Tokens are ``[one-hot position (P) | content (D)]``.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from ._validation import check_positive_int

REGIMES = ("iwl", "icl_adjacent", "icl_all_pairs", "linreg_pretrain")
LABEL_DIM = 0
ITEM_NAMES = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"


@dataclass(frozen=True)
class Hierarchy:
    """N item embeddings plus their latent ranks (``ranks[i]`` is item i's rank)."""

    items: np.ndarray
    ranks: np.ndarray

    def __post_init__(self):
        n = len(self.items)
        if n < 2:
            raise ValueError("a hierarchy needs at least two items")
        if sorted(int(r) for r in self.ranks) != list(range(1, n + 1)):
            raise ValueError("ranks must be a permutation of 1..N")

    @property
    def n_items(self) -> int:
        return len(self.items)

    def item_of_rank(self, rank: int) -> int:
        return int(np.flatnonzero(self.ranks == rank)[0])

    def name(self, i: int) -> str:
        return ITEM_NAMES[int(self.ranks[i]) - 1]


@dataclass
class Episode:
    """One training or evaluation sequence before token encoding.

    For TI regimes ``context_pairs`` holds ``(first, second)`` row indices into
    ``items`` and ``query`` the query pair.  ``context_inputs`` / ``query_input``
    are the content vectors actually encoded (pair concatenations, or regression
    inputs).
    """

    context_inputs: np.ndarray
    context_labels: np.ndarray
    query_input: np.ndarray
    target: float
    regime: str
    items: np.ndarray | None = None
    context_pairs: np.ndarray | None = None
    query: tuple[int, int] | None = None
    hierarchy: Hierarchy | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_context(self) -> int:
        return len(self.context_labels)


def unit_gaussian(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_hierarchy(n_items: int, embed_dim: int, rng: np.random.Generator) -> Hierarchy:
    check_positive_int(n_items, "n_items", 2)
    check_positive_int(embed_dim, "embed_dim", 1)
    items = unit_gaussian(n_items, embed_dim, rng)
    ranks = rng.permutation(n_items) + 1
    return Hierarchy(items=items, ranks=ranks)


def signed_distance(h: Hierarchy, i: int, j: int) -> int:
    if i == j:
        raise ValueError("signed distance needs two distinct items")
    return int(h.ranks[j]) - int(h.ranks[i])


def query_label(h: Hierarchy, i: int, j: int) -> int:
    return 1 if signed_distance(h, i, j) > 0 else -1


def ordered_pairs_by_rank(n_items: int) -> list[tuple[int, int]]:
    """All N(N-1) ordered (rank, rank) pairs, 1-based, in lexicographic order."""
    return list(permutations(range(1, n_items + 1), 2))


def adjacent_pairs(h: Hierarchy) -> list[tuple[int, int]]:
    """The 2(N-1) ordered adjacent pairs as item indices, ordered by rank."""
    out = []
    for r in range(1, h.n_items):
        a, b = h.item_of_rank(r), h.item_of_rank(r + 1)
        out += [(a, b), (b, a)]
    return out


def _pair_content(items: np.ndarray, pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    return np.concatenate([items[pairs[:, 0]], items[pairs[:, 1]]], axis=1)


def build_iwl_episode(
    fixed_h: Hierarchy,
    n_context_pairs: int,
    distractor_pool: np.ndarray,
    rng: np.random.Generator,
    query: tuple[int, int] | None = None,
) -> Episode:
    """Context of random distractor pairs with coin-flip labels; adjacent query.

    ``query`` overrides the random adjacent query (evaluation uses this to
    sweep every ordered pair).
    """
    pool = np.asarray(distractor_pool, dtype=np.float64)
    if pool.ndim != 2 or len(pool) < 2:
        raise ValueError("distractor pool needs at least two embeddings")
    n = fixed_h.n_items
    items = np.concatenate([fixed_h.items, pool], axis=0)
    firsts = rng.integers(0, len(pool), size=n_context_pairs)
    seconds = (firsts + rng.integers(1, len(pool), size=n_context_pairs)) % len(pool)
    ctx = np.stack([firsts, seconds], axis=1) + n
    labels = rng.choice(np.array([-1.0, 1.0]), size=n_context_pairs)
    if query is None:
        adj = adjacent_pairs(fixed_h)
        query = adj[int(rng.integers(len(adj)))]
    q = (int(query[0]), int(query[1]))
    return Episode(
        context_inputs=_pair_content(items, ctx),
        context_labels=labels,
        query_input=_pair_content(items, [q])[0],
        target=float(query_label(fixed_h, *q)),
        regime="iwl",
        items=items,
        context_pairs=ctx,
        query=q,
        hierarchy=fixed_h,
    )


def build_icl_episode(
    h: Hierarchy,
    query_policy: str,
    rng: np.random.Generator,
    query: tuple[int, int] | None = None,
) -> Episode:
    """All ordered adjacent pairs with true labels, shuffled, then a query.

    ``query_policy`` is ``"adjacent_only"`` (query drawn from the context pairs)
    or ``"all_pairs"`` (uniform over every ordered pair).
    """
    if query_policy not in ("adjacent_only", "all_pairs"):
        raise ValueError(f"unknown query policy {query_policy!r}")
    adj = adjacent_pairs(h)
    order = rng.permutation(len(adj))
    ctx = np.array([adj[k] for k in order], dtype=int)
    labels = np.array([query_label(h, a, b) for a, b in ctx], dtype=np.float64)
    if query is None:
        if query_policy == "adjacent_only":
            query = adj[int(rng.integers(len(adj)))]
        else:
            n = h.n_items
            a = int(rng.integers(n))
            b = int((a + rng.integers(1, n)) % n)
            query = (a, b)
    q = (int(query[0]), int(query[1]))
    regime = "icl_adjacent" if query_policy == "adjacent_only" else "icl_all_pairs"
    return Episode(
        context_inputs=_pair_content(h.items, ctx),
        context_labels=labels,
        query_input=_pair_content(h.items, [q])[0],
        target=float(query_label(h, *q)),
        regime=regime,
        items=h.items,
        context_pairs=ctx,
        query=q,
        hierarchy=h,
    )


def build_linreg_episode(
    context_len: int,
    input_dim: int,
    noise_std: float,
    rng: np.random.Generator,
    weight_std: float | None = None,
) -> Episode:
    """In-context regression: ``y = W x + eps`` with ``W`` redrawn per episode.

    Inputs have per-coordinate variance ``2 / input_dim`` so their norm matches
    a TI pair token (two unit vectors).  The default weight scale gives
    ``Var(Wx) = 1``, matching the +/-1 TI labels.  The target is the noiseless
    ``W x_query``.
    """
    check_positive_int(context_len, "context_len", 1)
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    x_std = np.sqrt(2.0 / input_dim)
    w_std = np.sqrt(0.5) if weight_std is None else weight_std
    W = rng.standard_normal(input_dim) * w_std
    xs = rng.standard_normal((context_len + 1, input_dim)) * x_std
    clean = xs @ W
    noise = rng.standard_normal(context_len) * noise_std if noise_std > 0 else np.zeros(context_len)
    return Episode(
        context_inputs=xs[:-1],
        context_labels=clean[:-1] + noise,
        query_input=xs[-1],
        target=float(clean[-1]),
        regime="linreg_pretrain",
        meta={"weight": W, "noise": noise},
    )


def sequence_length(n_context: int) -> int:
    return 2 * n_context + 1


def encode_episode(e: Episode, P: int, D: int) -> np.ndarray:
    """Token matrix of shape (T, P + D): pair/x, label/y, ..., query."""
    n = e.n_context
    T = sequence_length(n)
    if T > P:
        raise ValueError(f"{T} tokens exceed positional capacity P={P}")
    if e.context_inputs.shape[1] != D or e.query_input.shape[0] != D:
        raise ValueError("episode content width does not match D")
    tokens = np.zeros((T, P + D))
    tokens[np.arange(T), np.arange(T)] = 1.0
    tokens[0 : 2 * n : 2, P:] = e.context_inputs
    tokens[1 : 2 * n : 2, P + LABEL_DIM] = e.context_labels
    tokens[2 * n, P:] = e.query_input
    return tokens


def encode_batch(episodes, P: int, D: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([encode_episode(e, P, D) for e in episodes])
    y = np.array([e.target for e in episodes])
    return X, y


def matching_label_position(e: Episode) -> int:
    """Token index of the label that follows the context copy of the query pair."""
    if e.context_pairs is None or e.query is None:
        raise ValueError("episode has no pair structure")
    hits = np.flatnonzero((e.context_pairs[:, 0] == e.query[0]) & (e.context_pairs[:, 1] == e.query[1]))
    if hits.size == 0:
        raise ValueError("query pair does not occur in the context")
    return 2 * int(hits[0]) + 1


class EpisodeSampler:
    """Draws training batches for one regime.

    IWL runs fix a single hierarchy for the sampler's lifetime; the ICL regimes
    draw a fresh hierarchy per episode, and regression draws a fresh weight.
    """

    def __init__(self, regime: str, n_items: int = 7, P: int = 32, D: int = 64,
                 noise_std: float = 0.1, context_len: int | None = None,
                 fixed_hierarchy: Hierarchy | None = None, rng=None):
        if regime not in REGIMES:
            raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
        if D % 2:
            raise ValueError("content dim D must be even (two items per pair token)")
        self.regime = regime
        self.n_items = n_items
        self.P, self.D = P, D
        self.noise_std = noise_std
        self.n_pairs = 2 * (n_items - 1)
        self.context_len = self.n_pairs if context_len is None else context_len
        self.rng = rng
        self.hierarchy = fixed_hierarchy
        if regime == "iwl" and self.hierarchy is None:
            self.hierarchy = sample_hierarchy(n_items, D // 2, rng)

    def episode(self) -> Episode:
        rng = self.rng
        if self.regime == "iwl":
            pool = unit_gaussian(2 * self.n_pairs, self.D // 2, rng)
            return build_iwl_episode(self.hierarchy, self.n_pairs, pool, rng)
        if self.regime == "linreg_pretrain":
            return build_linreg_episode(self.context_len, self.D, self.noise_std, rng)
        h = sample_hierarchy(self.n_items, self.D // 2, rng)
        policy = "adjacent_only" if self.regime == "icl_adjacent" else "all_pairs"
        return build_icl_episode(h, policy, rng)

    def batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        return encode_batch([self.episode() for _ in range(batch_size)], self.P, self.D)


def save_episode_batch(path, X: np.ndarray, y: np.ndarray) -> None:
    """Write a token batch as a text fixture (JSON header + float64 hex rows).

    Values are stored with ``float.hex`` so the round trip is exact.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    buf = io.StringIO()
    buf.write(json.dumps({"format": "tilab-episodes", "version": 1, "shape": list(X.shape)}) + "\n")
    for i in range(X.shape[0]):
        buf.write(y[i].hex() + "\n")
        for row in X[i]:
            buf.write(" ".join(v.hex() for v in row) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_episode_batch(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "tilab-episodes":
            raise ValueError(f"{path} is not an episode fixture")
        n, T, d = header["shape"]
        X = np.empty((n, T, d))
        y = np.empty(n)
        for i in range(n):
            y[i] = float.fromhex(fh.readline().strip())
            for t in range(T):
                X[i, t] = [float.fromhex(v) for v in fh.readline().split()]
    return X, y
