"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's preconditions (shapes, ordering, state)."""


class BatchStepError(RuntimeError):
    """A member of a batch environment failed while stepping or resetting."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"environment {index} failed: {cause}")
        self.index = index
        self.cause = cause


class UpdateError(RuntimeError):
    """An agent update produced a non-finite loss and was aborted."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics
