"""Result record shared by the deterministic validators and the judge-backed gate."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

RESPONSE_ID = "RESPONSE_ID"
QUERY_TOOL_ID = "QUERY_TOOL_ID"
COT_ID = "COT_ID"
FUNC_PARAM = "FUNC_PARAM"
FORMAT = "FORMAT"

BQC_CHECKS = (RESPONSE_ID, QUERY_TOOL_ID, COT_ID)
AC_CHECKS = (FORMAT, FUNC_PARAM)

PASS = "pass"
FAIL = "fail"
DETERMINISTIC = "deterministic"
JUDGE = "judge"


@dataclass
class GateCheckResult:
    check: str
    verdict: str
    source: str = DETERMINISTIC
    evidence: list[dict[str, Any]] = field(default_factory=list)
    transcript: str | None = None  # reference into the judge transcript log

    def __post_init__(self):
        if self.verdict not in (PASS, FAIL):
            raise ValueError(f"verdict must be pass or fail, got {self.verdict!r}")
        if self.source == JUDGE and not self.transcript:
            raise ValueError("judge-sourced results need a transcript reference")

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def add(self, code: str, message: str, **extra) -> None:
        self.evidence.append({"code": code, "message": message, **extra})

    @property
    def codes(self) -> list[str]:
        return [e["code"] for e in self.evidence]

    def to_dict(self) -> dict:
        out = {"check": self.check, "verdict": self.verdict, "source": self.source, "evidence": self.evidence}
        if self.transcript:
            out["transcript"] = self.transcript
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "GateCheckResult":
        return cls(d["check"], d["verdict"], d.get("source", DETERMINISTIC), list(d.get("evidence", [])), d.get("transcript"))
