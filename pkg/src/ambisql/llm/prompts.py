"""Prompt templates for every generation stage.

All templates except ``END_TO_END`` are reproduced verbatim; the ``{slot}``
markers stand where the original prompt shows an ellipsis.  The end-to-end
baseline template is our own wording built around the instruction to emit
several queries for an ambiguous question.
"""
from __future__ import annotations

import string
from typing import Any, Mapping

DEFAULT_INTERP = "default_interp"
INFILL = "infill"
TEXT2SQL = "text2sql"
SELF_CORRECT = "self_correct"
SYNONYM_REWRITE = "synonym_rewrite"
END_TO_END = "end_to_end"

PROMPT_KINDS = (DEFAULT_INTERP, INFILL, TEXT2SQL, SELF_CORRECT, SYNONYM_REWRITE, END_TO_END)

# Infilling target when nothing is missing (the instruction below asks for the
# longer "All possible interpretations are covered."; parsers accept both).
SENTINEL = "All interpretations are covered."
SENTINEL_PHRASES = ("all interpretations are covered", "all possible interpretations are covered")

SYNONYM_REWRITE_TEMPLATE = """Your task is to rewrite the question using a given word or phrase.

Examples:
Question: Show titles of songs and names of singers.
Please rewrite using "stage name":
Give me titles of songs and stage names of singers.

Question: Show the name of the conductor that has conducted the most number of orchestras.
Please rewrite using "director":
List the name of the director who has conducted the most number of orchestras.

Question: Return the id of the document with the fewest paragraphs.
Please rewrite using "passages":
What is the id of the document with the fewest passages?

Please provide rewritten question for the following instance. Do not add any explanation or description, output only the rewritten question.

Question:  {question}
Please rewrite using "{synonym}":"""

DEFAULT_INTERP_TEMPLATE = """You are tasked with analyzing questions and providing their possible interpretations. The questions are related to database queries and may be ambiguous or unambiguous.

Your task:
- List every distinct way the question could be understood
- Be thorough and consider all possible meanings
- Explore different ways the question could be interpreted
- Don't limit yourself to obvious interpretations

Important:
- List each interpretation on a separate line
- Do not include explanations or reasoning
- Focus on semantically different interpretations
- Be specific and precise in wording

Given the following database context:
{db_dump}

Provide interpretations for this question:
{question}"""

INFILL_TEMPLATE = """The task is to review the provided context, question, and existing interpretations, and determine if any additional interpretations are missing. If there are missing interpretations, list them on separate lines without explanations. If all interpretations have already been covered, simply state: "All possible interpretations are covered."

Given the following context: {db_dump}

Question: {question}

Existing interpretations: {interpretations}

Provide any missing interpretations or confirm that all possible interpretations are covered."""

TEXT2SQL_TEMPLATE = """The task is to write SQL queries based on the provided questions in English. Questions can take the form of an instruction or command. Do not include any explanations, and do not select extra columns beyond those requested in the question.

Given the following SQLite database schema: {db_dump}

Answer the following: {question}"""

SELF_CORRECT_TEMPLATE = """The task is to review the provided context, question, and candidate interpretations, and based on this information provide the interpretations that accurately reflect the meaning (or one of the possible meanings) of the question. If any of the candidate interpretations are correct, provide them as a list of interpretations. If there are missing interpretations, provide them as well. Avoid providing interpretations that are incorrect or duplicates. Do not provide any explanations.

Given the following context: {db_dump}

Question: {question}

Candidate interpretations: {interpretations}

Provide the interpretations that accurately reflect the meaning (or one of the possible meanings) of the question."""

END_TO_END_TEMPLATE = """The task is to write SQL queries based on the provided questions in English. Questions can take the form of an instruction or command and can be ambiguous, meaning they can be interpreted in different ways. If the question is ambiguous, generate multiple SQL queries, one for each interpretation, and separate the queries with an empty line. Do not include any explanations, and do not select extra columns beyond those requested in the question.

{demonstrations}Given the following SQLite database schema: {db_dump}

Answer the following: {question}"""

DEMONSTRATION_TEMPLATE = """Example {number}:
Given the following SQLite database schema: {db_dump}

Answer the following: {question}

{queries}

"""

TEMPLATES = {
    DEFAULT_INTERP: DEFAULT_INTERP_TEMPLATE,
    INFILL: INFILL_TEMPLATE,
    TEXT2SQL: TEXT2SQL_TEMPLATE,
    SELF_CORRECT: SELF_CORRECT_TEMPLATE,
    SYNONYM_REWRITE: SYNONYM_REWRITE_TEMPLATE,
    END_TO_END: END_TO_END_TEMPLATE,
}

# Slots that may legitimately be empty (an empty interpretation list, no demonstrations).
_OPTIONAL_SLOTS = {"interpretations", "demonstrations"}


class TemplateError(ValueError):
    """A prompt slot was missing or empty."""


def slot_names(kind: str) -> list[str]:
    template = _template(kind)
    return [name for _, name, _, _ in string.Formatter().parse(template) if name]


def _template(kind: str) -> str:
    try:
        return TEMPLATES[kind]
    except KeyError:
        raise TemplateError(f"unknown prompt kind {kind!r}") from None


def _format_slot(name: str, value: Any) -> str:
    if name == "interpretations":
        if isinstance(value, str):
            return value
        return "\n".join(value)
    if name == "demonstrations":
        if isinstance(value, str):
            return value
        return "".join(render_demonstration(i + 1, demo) for i, demo in enumerate(value))
    return str(value)


def render_demonstration(number: int, demo: Mapping[str, Any]) -> str:
    queries = demo["queries"]
    if isinstance(queries, str):
        queries = [queries]
    return DEMONSTRATION_TEMPLATE.format(
        number=number,
        db_dump=demo["db_dump"],
        question=demo["question"],
        queries="\n\n".join(q.strip() for q in queries),
    )


def render_prompt(kind: str, slots: Mapping[str, Any]) -> str:
    """Fill the template for ``kind``; raises :class:`TemplateError` on a missing slot."""
    template = _template(kind)
    values = {}
    for name in slot_names(kind):
        value = slots.get(name)
        if value is None:
            if name in _OPTIONAL_SLOTS:
                value = []
            else:
                raise TemplateError(f"{kind}: missing slot {name!r}")
        if name not in _OPTIONAL_SLOTS and not str(value).strip():
            raise TemplateError(f"{kind}: slot {name!r} is empty")
        values[name] = _format_slot(name, value)
    return template.format(**values)


def count_demonstrations(prompt: str) -> int:
    return sum(1 for line in prompt.splitlines() if line.startswith("Example ") and line.endswith(":"))
