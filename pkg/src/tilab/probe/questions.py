"""Transitive-inference word problems with optional geometric scaffolds."""
from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

CONDITIONS = ("congruent", "incongruent", "random_strings", "permuted")
SCAFFOLDS = ("baseline", "number_line", "circle")
SCAFFOLD_TEXT = {
    "baseline": None,
    "number_line": "Imagine all items lie on a number line from smallest to largest.",
    "circle": "Imagine all items lie on a circle from smallest to largest.",
}
INSTRUCTION = "Answer yes or no"


def load_item_pool(path=None) -> list[str]:
    """Size-ordered item names, smallest first (comment lines skipped)."""
    if path is None:
        text = resources.files("tilab.probe").joinpath("data/size_ranked_items.txt").read_text()
    else:
        text = Path(path).read_text()
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


def random_strings(n: int, rng: np.random.Generator, length: int = 6) -> list[str]:
    alphabet = np.array(list(string.ascii_letters + string.digits))
    out: list[str] = []
    seen = set()
    while len(out) < n:
        s = "".join(rng.choice(alphabet, size=length))
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


@dataclass
class Premise:
    larger: str
    smaller: str
    phrasing: str  # "larger" -> "<larger> is larger than <smaller>"

    def text(self) -> str:
        if self.phrasing == "larger":
            return f"{self.larger} is larger than {self.smaller}."
        return f"{self.smaller} is smaller than {self.larger}."


@dataclass
class ProbeQuestion:
    """One rendered instance; the three scaffolds of a base question share ``base_id``.

    ``chain`` lists the items largest first, which is the order the premises
    assert (not necessarily real-world order).
    """

    id: str
    base_id: int
    condition: str
    scaffold: str
    chain: list[str]
    premises: list[Premise]
    query: tuple[str, str]
    answer: str
    prompt: str = ""

    @property
    def query_distance(self) -> int:
        return abs(self.chain.index(self.query[0]) - self.chain.index(self.query[1]))

    def record(self) -> dict:
        d = asdict(self)
        d["query"] = list(self.query)
        return d

    @classmethod
    def from_record(cls, d: dict) -> "ProbeQuestion":
        d = dict(d)
        d["premises"] = [Premise(**p) for p in d["premises"]]
        d["query"] = tuple(d["query"])
        return cls(**d)


def render_prompt(q: ProbeQuestion) -> str:
    """Premises (in the question's stored order), scaffold sentence, query, instruction."""
    parts = [p.text() for p in q.premises]
    if SCAFFOLD_TEXT[q.scaffold]:
        parts.append(SCAFFOLD_TEXT[q.scaffold])
    parts.append(f"Is {q.query[0]} larger than {q.query[1]}?")
    parts.append(INSTRUCTION)
    return "\n".join(parts)


def _chain(condition: str, n_items: int, pool: list[str], rng: np.random.Generator) -> list[str]:
    if condition == "random_strings":
        return random_strings(n_items, rng)
    if len(pool) < n_items:
        raise ValueError(f"item pool has {len(pool)} entries, need {n_items}")
    picked = np.sort(rng.choice(len(pool), size=n_items, replace=False))
    by_size = [pool[i] for i in picked]  # smallest first
    if condition == "congruent":
        return by_size[::-1]
    if condition == "incongruent":
        return by_size
    if condition == "permuted":
        return [by_size[i] for i in rng.permutation(n_items)]
    raise ValueError(f"unknown condition {condition!r}")


def generate_probe_set(condition: str, n_questions: int, rng: np.random.Generator, n_items: int = 20,
                       pool: list[str] | None = None, start_id: int = 0) -> list[ProbeQuestion]:
    """``n_questions`` base questions, each rendered under all three scaffolds.

    The query distance is uniform over 1..n_items-1 and the query order is a
    coin flip, so yes and no answers are balanced in expectation.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    pool = load_item_pool() if pool is None else pool
    out = []
    for k in range(n_questions):
        chain = _chain(condition, n_items, pool, rng)
        premises = [Premise(chain[i], chain[i + 1], "larger" if rng.random() < 0.5 else "smaller")
                    for i in range(n_items - 1)]
        premises = [premises[i] for i in rng.permutation(len(premises))]
        d = int(rng.integers(1, n_items))
        i = int(rng.integers(0, n_items - d))
        hi, lo = chain[i], chain[i + d]
        query, answer = ((hi, lo), "yes") if rng.random() < 0.5 else ((lo, hi), "no")
        base = start_id + k
        for scaffold in SCAFFOLDS:
            q = ProbeQuestion(f"{condition}-{base:05d}-{scaffold}", base, condition, scaffold, chain,
                              premises, query, answer)
            q.prompt = render_prompt(q)
            out.append(q)
    return out


def closure_answer(premises: list[Premise], query: tuple[str, str]) -> str:
    """Brute-force transitive closure of the premises; 'yes' iff query[0] > query[1]."""
    items = sorted({p.larger for p in premises} | {p.smaller for p in premises})
    idx = {s: i for i, s in enumerate(items)}
    n = len(items)
    gt = np.zeros((n, n), dtype=bool)
    for p in premises:
        gt[idx[p.larger], idx[p.smaller]] = True
    for k in range(n):
        gt |= gt[:, [k]] & gt[[k], :]
    a, b = idx[query[0]], idx[query[1]]
    if gt[a, b] == gt[b, a]:
        raise ValueError("premises do not order the query items")
    return "yes" if gt[a, b] else "no"


def save_probe_set(path, questions: list[ProbeQuestion]) -> None:
    with open(path, "w") as fh:
        for q in questions:
            fh.write(json.dumps(q.record(), sort_keys=True) + "\n")


def load_probe_set(path) -> list[ProbeQuestion]:
    with open(path) as fh:
        return [ProbeQuestion.from_record(json.loads(ln)) for ln in fh if ln.strip()]
