from __future__ import annotations

from dataclasses import dataclass

DEFAULT = "default"
INFILLED = "infilled"
GOLD_REFERENCE = "gold_reference"
SELF_CORRECTED = "self_corrected"
PROVENANCES = (DEFAULT, INFILLED, GOLD_REFERENCE, SELF_CORRECTED)


@dataclass(frozen=True)
class Interpretation:
    """One unambiguous natural-language reading of a question."""

    text: str
    provenance: str
    ordinal: int

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("interpretation text must be non-empty")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def to_dict(self) -> dict:
        return {"text": self.text, "provenance": self.provenance, "ordinal": self.ordinal}

    @classmethod
    def from_dict(cls, data: dict) -> "Interpretation":
        return cls(text=data["text"], provenance=data["provenance"], ordinal=data["ordinal"])


def number(texts: list[str], provenance: str, start: int = 0) -> list[Interpretation]:
    return [Interpretation(text, provenance, start + i) for i, text in enumerate(texts)]
