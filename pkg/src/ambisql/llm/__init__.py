from .gateway import (
    BackendConfig,
    BackendConfigError,
    Gateway,
    GenerationError,
    GenerationRequest,
    ReplayMissError,
    ResponseCache,
    ScriptedBackend,
    ScriptMissError,
    ScriptRule,
    TransportError,
    generate,
    open_cache,
)
from .parsing import ParsedInterpretations, SQLExtractionError, extract_sql, parse_interpretations, split_sql_statements
from .prompts import PROMPT_KINDS, SENTINEL, TemplateError, render_prompt

__all__ = [
    "BackendConfig",
    "BackendConfigError",
    "Gateway",
    "GenerationError",
    "GenerationRequest",
    "ParsedInterpretations",
    "PROMPT_KINDS",
    "ReplayMissError",
    "ResponseCache",
    "SENTINEL",
    "SQLExtractionError",
    "ScriptMissError",
    "ScriptRule",
    "ScriptedBackend",
    "TemplateError",
    "TransportError",
    "extract_sql",
    "generate",
    "open_cache",
    "parse_interpretations",
    "render_prompt",
    "split_sql_statements",
]
