"""Answer backends: an HTTP chat-completions client and three deterministic oracles.

Every backend exposes ``answer(prompt) -> str``.  The oracles read the
premises and the query back out of the prompt text, so they exercise the
same surface a live model sees.
"""
from __future__ import annotations

import hashlib
import os
import re
import threading
import time
from dataclasses import dataclass, field

import httpx

from .questions import Premise, closure_answer

_LARGER = re.compile(r"^(.+) is larger than (.+)\.$")
_SMALLER = re.compile(r"^(.+) is smaller than (.+)\.$")
_QUERY = re.compile(r"^Is (.+) larger than (.+)\?$")


class BackendError(RuntimeError):
    """A request failed; ``transient`` errors are retried by the runner."""

    def __init__(self, msg: str, transient: bool = True):
        super().__init__(msg)
        self.transient = transient


class BackendConfigError(ValueError):
    pass


def parse_prompt(prompt: str) -> tuple[list[Premise], tuple[str, str]]:
    premises, query = [], None
    for line in prompt.splitlines():
        line = line.strip()
        if m := _LARGER.match(line):
            premises.append(Premise(m.group(1), m.group(2), "larger"))
        elif m := _SMALLER.match(line):
            premises.append(Premise(m.group(2), m.group(1), "smaller"))
        elif m := _QUERY.match(line):
            query = (m.group(1), m.group(2))
    if query is None:
        raise ValueError("prompt has no query line")
    return premises, query


def _chain_from_premises(premises: list[Premise]) -> list[str]:
    """Largest-first order implied by a chain of adjacent premises."""
    below = {p.larger: p.smaller for p in premises}
    smallers = set(below.values())
    top = [x for x in below if x not in smallers]
    if len(top) != 1:
        raise ValueError("premises do not form a single chain")
    chain = [top[0]]
    while chain[-1] in below:
        chain.append(below[chain[-1]])
    return chain


class LinearOracle:
    """Answers from the order the premises imply."""

    name = "linear_oracle"

    def answer(self, prompt: str) -> str:
        premises, query = parse_prompt(prompt)
        return closure_answer(premises, query)


class CircularOracle:
    """Places the chain on a circle and compares along the shorter arc.

    Going from smallest toward largest is the "larger" direction; for a pair
    more than half the circle apart the short arc wraps past the ends, so the
    answer flips relative to the linear order.  Exact half-way ties fall back
    to the linear answer.
    """

    name = "circular_oracle"

    def answer(self, prompt: str) -> str:
        premises, (a, b) = parse_prompt(prompt)
        chain = _chain_from_premises(premises)
        n = len(chain)
        step = (chain.index(b) - chain.index(a)) % n  # steps from a toward smaller items to reach b
        if 2 * step == n:
            return closure_answer(premises, (a, b))
        return "yes" if step < n - step else "no"


@dataclass
class CoinOracle:
    """Fair coin keyed on (seed, prompt): stateless and order-independent."""

    seed: int = 0
    name: str = "coin_oracle"

    def answer(self, prompt: str) -> str:
        h = hashlib.sha256(f"{self.seed}\x00{prompt}".encode()).digest()
        return "yes" if h[0] & 1 else "no"


@dataclass
class HttpBackend:
    """OpenAI-style chat-completions client.

    The API key is read from the environment variable named by ``api_key_env``
    at construction; it is never stored in config files or written to logs.
    ``extra_body`` carries provider-specific knobs (thinking budgets,
    reasoning effort, verbosity).
    """

    endpoint: str
    model: str
    api_key_env: str = "TILAB_API_KEY"
    max_tokens: int = 3
    timeout: float = 60.0
    requests_per_second: float | None = None
    extra_body: dict = field(default_factory=dict)
    name: str = "http_api"

    def __post_init__(self):
        key = os.environ.get(self.api_key_env)
        if not key:
            raise BackendConfigError(f"environment variable {self.api_key_env} is not set")
        self._headers = {"Authorization": f"Bearer {key}"}
        self._lock = threading.Lock()
        self._next_slot = 0.0
        self._client = httpx.Client(timeout=self.timeout)

    def _throttle(self) -> None:
        if not self.requests_per_second:
            return
        with self._lock:
            now = time.monotonic()
            wait = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + 1.0 / self.requests_per_second
        if wait > 0:
            time.sleep(wait)

    def answer(self, prompt: str) -> str:
        self._throttle()
        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}],
                "max_tokens": self.max_tokens, **self.extra_body}
        try:
            r = self._client.post(self.endpoint, json=body, headers=self._headers)
        except httpx.TransportError as exc:
            raise BackendError(f"transport error: {exc}") from exc
        if r.status_code == 429 or r.status_code >= 500:
            raise BackendError(f"HTTP {r.status_code}")
        if r.status_code >= 400:
            raise BackendError(f"HTTP {r.status_code}: {r.text[:200]}", transient=False)
        try:
            return r.json()["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, ValueError) as exc:
            raise BackendError(f"unexpected response shape: {exc}", transient=False) from exc


def make_backend(name: str, **options):
    if name == "linear_oracle":
        return LinearOracle()
    if name == "circular_oracle":
        return CircularOracle()
    if name == "coin_oracle":
        return CoinOracle(seed=int(options.get("seed", 0)))
    if name == "http_api":
        allowed = {"endpoint", "model", "api_key_env", "max_tokens", "timeout", "requests_per_second", "extra_body"}
        unknown = set(options) - allowed - {"seed"}
        if unknown:
            raise BackendConfigError(f"unknown http_api option {sorted(unknown)[0]!r}")
        for key in ("endpoint", "model"):
            if not options.get(key):
                raise BackendConfigError(f"http_api backend needs {key!r}")
        return HttpBackend(**{k: v for k, v in options.items() if k in allowed})
    raise BackendConfigError(f"unknown backend {name!r}")
