"""Run probe questions against a backend and score the answers."""
from __future__ import annotations

import csv
import logging
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .backends import BackendError
from .questions import SCAFFOLDS, ProbeQuestion

log = logging.getLogger(__name__)

_ANSWER = re.compile(r"^[\W_]*(yes|no)\b", re.IGNORECASE)
LOG_HEADER = ("id", "condition", "scaffold", "raw_answer", "parsed", "correct")


def parse_answer(text) -> str:
    """Map any backend string to exactly one of ``yes``, ``no`` or ``invalid``."""
    if not isinstance(text, str):
        return "invalid"
    m = _ANSWER.match(text)
    return m.group(1).lower() if m else "invalid"


@dataclass
class AnswerRecord:
    id: str
    base_id: int
    condition: str
    scaffold: str
    raw_answer: str
    parsed: str
    correct: bool
    error: str | None = None


def _ask(backend, q: ProbeQuestion, retries: int, backoff: float, max_backoff: float, sleep) -> AnswerRecord:
    delay = backoff
    last = None
    for attempt in range(retries + 1):
        try:
            raw = backend.answer(q.prompt)
            parsed = parse_answer(raw)
            return AnswerRecord(q.id, q.base_id, q.condition, q.scaffold, raw, parsed, parsed == q.answer)
        except BackendError as exc:
            last = exc
            if not exc.transient or attempt == retries:
                break
            sleep(min(delay, max_backoff))
            delay *= 2
    log.warning("question %s failed: %s", q.id, last)
    return AnswerRecord(q.id, q.base_id, q.condition, q.scaffold, "", "invalid", False, error=str(last))


def run_probe(questions: list[ProbeQuestion], backend, concurrency_limit: int = 4, retries: int = 3,
              backoff: float = 1.0, max_backoff: float = 30.0, sleep=time.sleep) -> list[AnswerRecord]:
    """One answer record per question, in question order whatever the completion order."""
    if concurrency_limit < 1:
        raise ValueError("concurrency_limit must be >= 1")
    with ThreadPoolExecutor(max_workers=concurrency_limit) as pool:
        futures = [pool.submit(_ask, backend, q, retries, backoff, max_backoff, sleep) for q in questions]
        return [f.result() for f in futures]


def write_answer_log(path, records: list[AnswerRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in records:
            w.writerow([r.id, r.condition, r.scaffold, r.raw_answer, r.parsed, int(r.correct)])


def read_answer_log(path) -> list[AnswerRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [AnswerRecord(r["id"], int(r["id"].split("-")[-2]), r["condition"], r["scaffold"], r["raw_answer"],
                         r["parsed"], r["correct"] == "1") for r in rows]


def sem(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n)


@dataclass
class CellScore:
    accuracy: float
    n: int
    sem: float
    n_invalid: int


@dataclass
class Contrast:
    """Paired difference ``a - b`` over base questions answered under both scaffolds."""

    condition: str
    a: str
    b: str
    delta: float
    n: int
    sem: float


@dataclass
class ProbeResult:
    cells: dict = field(default_factory=dict)  # (condition, scaffold) -> CellScore
    deltas: dict = field(default_factory=dict)  # (condition, scaffold) -> Contrast vs baseline
    line_minus_circle: dict = field(default_factory=dict)  # condition -> Contrast
    absent: list = field(default_factory=list)

    def table(self) -> str:
        lines = ["condition,scaffold,accuracy,n,sem,n_invalid,delta_vs_baseline,delta_sem"]
        for (c, s), cell in sorted(self.cells.items()):
            d = self.deltas.get((c, s))
            lines.append(f"{c},{s},{cell.accuracy!r},{cell.n},{cell.sem!r},{cell.n_invalid},"
                         f"{'' if d is None else repr(d.delta)},{'' if d is None else repr(d.sem)}")
        lines.append("")
        lines.append("condition,number_line_minus_circle,n,sem")
        for c, d in sorted(self.line_minus_circle.items()):
            lines.append(f"{c},{d.delta!r},{d.n},{d.sem!r}")
        for c, s in self.absent:
            lines.append(f"# absent: {c},{s}")
        return "\n".join(lines) + "\n"


def paired_contrast(records: list[AnswerRecord], condition: str, a: str, b: str) -> Contrast | None:
    by = {}
    for r in records:
        if r.condition == condition and r.scaffold in (a, b):
            by.setdefault(r.base_id, {})[r.scaffold] = float(r.correct)
    diffs = [v[a] - v[b] for v in by.values() if a in v and b in v]
    if not diffs:
        return None
    n = len(diffs)
    mean = sum(diffs) / n
    var = sum((x - mean) ** 2 for x in diffs) / (n - 1) if n > 1 else 0.0
    return Contrast(condition, a, b, mean, n, math.sqrt(var / n))


def score_probe(records: list[AnswerRecord]) -> ProbeResult:
    """Per-cell accuracy and SEM, paired scaffold deltas, and the line-minus-circle contrast.

    Invalid answers count as incorrect and are also tallied separately.
    """
    res = ProbeResult()
    conditions = sorted({r.condition for r in records})
    for c in conditions:
        for s in SCAFFOLDS:
            rows = [r for r in records if r.condition == c and r.scaffold == s]
            if not rows:
                res.absent.append((c, s))
                continue
            n = len(rows)
            p = sum(r.correct for r in rows) / n
            res.cells[(c, s)] = CellScore(p, n, sem(p, n), sum(r.parsed == "invalid" for r in rows))
        for s in SCAFFOLDS:
            d = paired_contrast(records, c, s, "baseline")
            if d is not None:
                res.deltas[(c, s)] = d
        d = paired_contrast(records, c, "number_line", "circle")
        if d is not None:
            res.line_minus_circle[c] = d
    return res
