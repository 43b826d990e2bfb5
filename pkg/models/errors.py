"""
Exception types for the neatpad workbench.
Every library error derives from NeatError so boundary code can catch one type.
"""

from typing import List, Optional


class NeatError(Exception):
    """Base class for all library errors."""


class UnknownFunction(NeatError):
    """An activation or aggregation name/id is not in the registry."""


class GenomeFull(NeatError):
    """No NaN row is left in the node or connection tensor."""


class ShapeMismatch(NeatError):
    """Tensors, limits or problem shapes disagree."""


class CorruptRow(NeatError):
    """A tensor row is partially NaN or holds a non-integral flag/id."""


class DuplicateKey(NeatError):
    """A node key is already present in the genome."""


class DuplicateConn(NeatError):
    """A connection with the same (in, out) pair is already present."""


class KeyNotFound(NeatError):
    """A node key or connection pair is absent."""


class ProtectedNode(NeatError):
    """Input and output nodes can never be removed."""


class DanglingEndpoint(NeatError):
    """A connection references a node key that does not exist."""


class AttrOutOfRange(NeatError):
    """Attribute index outside the schema's attribute count."""


class CycleDetected(NeatError):
    """The enabled-connection graph contains a directed cycle."""

    def __init__(self, cycle: List[int]):
        self.cycle = list(cycle)
        super().__init__("cycle " + "→".join(str(k) for k in self.cycle))


class NonFiniteInput(NeatError):
    """Network inputs contain NaN or infinity."""


class NonFiniteState(NeatError):
    """A simulator state contains NaN or infinity."""


class EmptyAggregation(NeatError):
    """The reduction has no identity element for an empty input."""


class EmptyDataset(NeatError):
    """A function-fit dataset has no samples."""


class LimitsTooSmall(NeatError):
    """Genome limits cannot hold the initial topology."""


class ParseError(NeatError):
    """A genome document or config could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        context = []
        if line is not None:
            context.append(f"line {line}")
        if field is not None:
            context.append(f"field '{field}'")
        prefix = f"{', '.join(context)}: " if context else ""
        super().__init__(f"{prefix}{message}")


class VersionUnsupported(NeatError):
    """The genome document declares a version this build cannot read."""


class ConfigError(NeatError):
    """An experiment config is invalid; `field` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class EvaluationError(NeatError):
    """Fitness evaluation failed for a genome of a generation."""

    def __init__(self, generation: int, index: int, message: str):
        self.generation = generation
        self.index = index
        super().__init__(f"generation {generation}, genome {index}: {message}")
