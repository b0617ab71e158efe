"""Exception hierarchy.

The CLI maps ``DataError`` to exit code 2 and ``InfeasibleError`` to exit
code 3; anything deriving from ``InvalidArgumentError`` is a caller bug.
"""


class PortfolioError(Exception):
    pass


class InvalidArgumentError(PortfolioError, ValueError):
    pass


class DataError(PortfolioError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class EmptyUniverseError(DataError):
    pass


class DataConsistencyError(DataError):
    pass


class InsufficientHistoryError(DataError):
    pass


class DegeneratePortfolioError(PortfolioError, ValueError):
    """Zero variance (Sharpe undefined) or an all-zero weight genome."""


class InfeasibleError(PortfolioError):
    pass


class InfeasibleCardinalityError(InfeasibleError):
    pass


class RepairFailure(InfeasibleError):
    pass


class Phase1InfeasibleError(InfeasibleError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class Phase2InfeasibleError(InfeasibleError):
    pass


class TurnoverRepairError(InfeasibleError):
    pass
