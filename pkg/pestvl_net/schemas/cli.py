"""
Pydantic schemas for machine-readable CLI output.
"""

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field

SUMMARY_SCHEMA_VERSION = "1.0"


class CliSummary(BaseModel):
    """JSON document printed on stdout by ``--json``."""

    schema_version: str = SUMMARY_SCHEMA_VERSION
    command: str
    status: Literal["ok", "error"]
    exit_code: int
    run_id: str
    duration_seconds: float = Field(..., ge=0)
    outputs: Dict[str, str] = Field(default_factory=dict, description="Artifact name -> path")
    result: Dict[str, Any] = Field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None


class SuiteResult(BaseModel):
    """Outcome of one self-test oracle suite."""

    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""


class SelfTestReport(BaseModel):
    suites: List[SuiteResult]

    @property
    def passed(self) -> bool:
        return all(suite.passed for suite in self.suites)

    def failing(self) -> List[str]:
        return [suite.name for suite in self.suites if not suite.passed]
