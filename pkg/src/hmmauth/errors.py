"""Exception hierarchy. Every error carries a stable machine-readable code."""

from __future__ import annotations


class HmmAuthError(Exception):
    code = "INTERNAL"
    exit_code = 1

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


class ParseError(HmmAuthError):
    code = "PARSE_ERROR"
    exit_code = 2

    def __init__(self, message: str, line: int | None = None, **details):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, line=line, **details)
        self.line = line


class ConfigError(HmmAuthError):
    code = "CONFIG_INVALID"
    exit_code = 2


class EnrollmentError(HmmAuthError):
    code = "ENROLL_INSUFFICIENT"
    exit_code = 3


class MixedSubjectsError(EnrollmentError):
    code = "ENROLL_MIXED_SUBJECTS"


class ConfigMismatchError(HmmAuthError):
    code = "CONFIG_MISMATCH"
    exit_code = 4


class EvaluationError(HmmAuthError):
    code = "EVAL_NEEDS_IMPOSTORS"
    exit_code = 5


class SpecError(HmmAuthError):
    code = "SPEC_INVALID"
    exit_code = 6


class ScoringError(HmmAuthError):
    code = "SCORING_ERROR"
    exit_code = 7


class NumericalError(HmmAuthError):
    code = "NUMERICAL_FAILURE"
    exit_code = 8
