"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument or state violates a documented precondition."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values.

    Carries the name of the operation that failed so training loops can
    report where a blow-up happened.
    """

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TaxonomyParseError(ValueError):
    """Malformed taxonomy or class-mapping file; carries the line number."""

    def __init__(self, line_no: int, detail: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {detail}")


class NodeLookupError(KeyError):
    """A node or class name is not present in the taxonomy."""


class SplitViolation(ContractViolation):
    """A class-set configuration breaks the required split disjointness."""


class ZeroShotViolation(ContractViolation):
    """Evaluation data contains classes outside the declared target set."""


class TrainingDivergence(RuntimeError):
    """Training failed to make required progress within its budget."""
