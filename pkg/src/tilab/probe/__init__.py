"""Prompt-probe harness for transitive inference in language models."""
from .backends import (
    BackendConfigError,
    BackendError,
    CircularOracle,
    CoinOracle,
    HttpBackend,
    LinearOracle,
    make_backend,
    parse_prompt,
)
from .questions import (
    CONDITIONS,
    SCAFFOLDS,
    ProbeQuestion,
    closure_answer,
    generate_probe_set,
    load_item_pool,
    load_probe_set,
    render_prompt,
    save_probe_set,
)
from .runner import (
    AnswerRecord,
    ProbeResult,
    parse_answer,
    read_answer_log,
    run_probe,
    score_probe,
    write_answer_log,
)
