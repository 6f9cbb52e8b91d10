"""Exception types shared across the harness.

Every error raised by this package derives from WardroundError so callers
can catch harness failures without swallowing unrelated bugs.
"""

from __future__ import annotations


class WardroundError(Exception):
    """Base class for all harness errors."""


# --- dataset ---------------------------------------------------------------

class DatasetError(WardroundError):
    """Base class for dataset file and schema problems."""


class MalformedLine(DatasetError):
    def __init__(self, line_no: int, detail: str = ""):
        self.line_no = line_no
        self.detail = detail
        super().__init__(f"line {line_no}: {detail}" if detail else f"line {line_no}")


class MissingField(DatasetError):
    def __init__(self, record_id: str, field: str):
        self.record_id = record_id
        self.field = field
        super().__init__(f"record {record_id!r}: missing or empty field {field!r}")


class DuplicateRecordId(DatasetError):
    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"duplicate record_id {record_id!r}")


class QuestionSetIncomplete(DatasetError):
    def __init__(self, record_id: str, detail: str = ""):
        self.record_id = record_id
        self.detail = detail
        msg = f"record {record_id!r}: question set incomplete"
        super().__init__(f"{msg} ({detail})" if detail else msg)


# --- llm client ------------------------------------------------------------

class ClientError(WardroundError):
    """Base class for chat-completion client failures."""


class Transport(ClientError):
    """Network failure, malformed provider response, or retries exhausted."""


class AuthRejected(ClientError):
    """The endpoint rejected the API credential."""


class ContextTooLong(ClientError):
    """The prompt exceeded the provider's context window."""


class MockScriptError(ClientError):
    """A scripted mock is missing entries the run would request."""


# --- retrieval -------------------------------------------------------------

class DimMismatch(WardroundError):
    """Cosine similarity between vectors of different dimensions."""


class ZeroVector(WardroundError):
    """Cosine similarity involving an all-zero vector is undefined."""


# --- dialogue --------------------------------------------------------------

class ProtocolViolation(WardroundError):
    """A question was asked or answered out of protocol order."""


# --- pipeline --------------------------------------------------------------

class UnparseableOutput(WardroundError):
    """Model output could not be parsed into the expected answer shape.

    Carries the raw model text so failures can be inspected after the run.
    """

    def __init__(self, raw_text: str, detail: str = "",
                 record_id: str | None = None, question_id: str | None = None):
        self.raw_text = raw_text
        self.detail = detail
        self.record_id = record_id
        self.question_id = question_id
        where = f" [{record_id}/{question_id}]" if record_id else ""
        super().__init__(f"unparseable model output{where}: {detail}")


# --- metrics ---------------------------------------------------------------

class EmptyTable(WardroundError):
    """Standardization was asked to map entities against an empty ICD table."""


class UnknownRecord(WardroundError):
    def __init__(self, record_id: str, question_id: str = ""):
        self.record_id = record_id
        self.question_id = question_id
        at = f"{record_id}/{question_id}" if question_id else record_id
        super().__init__(f"prediction for unknown reference {at!r}")


# --- config ----------------------------------------------------------------

class ConfigError(WardroundError):
    """Invalid run configuration or environment."""
