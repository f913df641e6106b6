"""Exception hierarchy shared by every module.

Each class carries a short machine-readable ``code`` that the CLI prints on
its last output line when a subcommand fails.
"""


class CigmError(Exception):
    code = "error"


class ParseError(CigmError):
    code = "parse_error"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CyclicGraph(CigmError):
    code = "cyclic_graph"


class DuplicateEdge(CigmError):
    code = "duplicate_edge"


class DuplicateNode(CigmError):
    code = "duplicate_node"


class UnknownNode(CigmError):
    code = "unknown_node"


class UnsupportedMechanism(CigmError):
    code = "unsupported_mechanism"


class ImpossibleEvidence(CigmError):
    code = "impossible_evidence"

    def __init__(self, message: str, acceptance: float | None = None):
        self.acceptance = acceptance
        if acceptance is not None:
            message = f"{message} (estimated acceptance {acceptance:.3g})"
        super().__init__(message)


class ShapeError(CigmError, ValueError):
    code = "shape_error"


class DomainError(CigmError, ValueError):
    code = "domain_error"


class NonFiniteError(DomainError):
    code = "non_finite"


class NestingUnsupported(CigmError):
    code = "nesting_unsupported"


class SchemaError(CigmError):
    code = "schema_error"


class UsageError(CigmError):
    code = "usage_error"
