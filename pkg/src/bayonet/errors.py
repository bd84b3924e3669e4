"""Domain error hierarchy.

Everything raised on purpose derives from BayonetError so the CLI can map
domain failures to exit status 1 while genuine bugs escape loudly.
"""


class BayonetError(Exception):
    """Base class for all domain errors."""


class ParseError(BayonetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ParseError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeMismatch(BayonetError):
    def __init__(self, node_id: str, expected, found):
        self.node_id = node_id
        self.expected = expected
        self.found = found
        super().__init__(f"node {node_id!r}: expected {expected}, found {found}")


class ShapeMissing(BayonetError):
    def __init__(self, node_id: str):
        self.node_id = node_id
        super().__init__(f"node {node_id!r} has no inferred shapes; run shape inference first")


class PolicyError(BayonetError):
    pass


class IndivisibleSamples(BayonetError):
    def __init__(self, n_sample: int, n_exit: int):
        self.n_sample = n_sample
        self.n_exit = n_exit
        super().__init__(f"n_sample={n_sample} is not divisible by n_exit={n_exit}")


class NoBayesianComponent(BayonetError):
    pass


class EmptyInput(BayonetError):
    pass


class DivergenceDetected(BayonetError):
    pass


class EmptyFeasibleSet(BayonetError):
    def __init__(self, message: str, nearest_miss=None):
        self.nearest_miss = nearest_miss
        super().__init__(message)


class DoesNotFit(BayonetError):
    pass


class VerificationFailed(BayonetError):
    pass
