"""Constrained machine translation through iterative translate-and-revise prompting.

The package prompts a chat backend to translate under explicit constraints,
detects unsatisfied constraints with deterministic rules, and re-prompts for
revision until every constraint holds or the iteration budget runs out. It
ships importers for common constrained-translation corpus formats, corpus
metrics (BLEU, CCR, SAR, SMR), deterministic mock backends for offline runs,
and a CLI wiring it all together.
"""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    ConstraintPair,
    Corpus,
    CorpusFormatError,
    TranslationUnit,
    ValidationIssue,
    load_corpus,
    subsample_constraints,
    validate_corpus,
    write_corpus,
)
from .detector import (  # noqa: F401
    ConstraintStatus,
    DetectionResult,
    XmlStructureSignature,
    check_well_formed,
    detect_uncompleted,
    match_lexical,
    normalize,
    structure_signature,
)
from .gateway import (  # noqa: F401
    BackendConfig,
    ChatGateway,
    ChatRequest,
    ChatResponse,
    HttpBackend,
    MemoTrapBackend,
    MockScript,
    ReplayBackend,
    Usage,
    fingerprint,
    meter,
)
from .memo_trap import MemoTrapParams  # noqa: F401
from .metrics import MetricReport, bleu, ccr, evaluate_traces, sar, smr  # noqa: F401
from .pipeline import (  # noqa: F401
    IterationRecord,
    RevisionPipeline,
    RevisionTrace,
    RunConfig,
    read_traces,
    write_traces,
)
from .prompting import (  # noqa: F401
    BUILTIN_TEMPLATES,
    EnsemblePolicy,
    PromptTemplate,
    RenderedPrompt,
    render_revise,
    render_translate,
    select_template,
)
