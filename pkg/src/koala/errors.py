"""Exception hierarchy shared by every module.

``RejectedInput`` covers malformed data and configs (CLI exit code 2);
``ContractViolation`` covers broken internal invariants such as frozen
parameter drift (CLI exit code 1).
"""


class KoalaError(Exception):
    pass


class RejectedInput(KoalaError, ValueError):
    pass


class ConfigError(RejectedInput):
    pass


class WindowLengthError(RejectedInput):
    pass


class MalformedPrompt(RejectedInput):
    pass


class ContractViolation(KoalaError):
    pass


class NonFiniteError(ContractViolation, FloatingPointError):
    def __init__(self, primitive, detail=""):
        self.primitive = primitive
        msg = f"non-finite values produced by primitive '{primitive}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
