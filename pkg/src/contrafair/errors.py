"""Exception hierarchy shared by every contrafair module."""


class ContrafairError(Exception):
    """Base class for all errors raised by this package."""


# graph structure
class GraphError(ContrafairError, ValueError):
    pass


class CycleDetected(GraphError):
    def __init__(self, edge):
        self.edge = tuple(edge)
        super().__init__(f"cycle detected through edge {edge[0]} -> {edge[1]}")


class ProtectedHasParent(GraphError):
    pass


class DanglingEdge(GraphError):
    pass


class EmptyRoles(GraphError):
    pass


# fitting and evaluation
class InsufficientData(ContrafairError, ValueError):
    pass


class SingularDesign(ContrafairError, ValueError):
    def __init__(self, child, condition):
        self.child = child
        self.condition = condition
        super().__init__(
            f"design matrix for equation {child!r} is singular (condition estimate {condition:.3g})"
        )


class MissingValue(ContrafairError, KeyError):
    def __init__(self, variable, subject=None):
        self.variable = variable
        self.subject = subject
        where = f" for individual {subject!r}" if subject is not None else ""
        super().__init__(f"missing value for variable {variable!r}{where}")

    def __str__(self):
        return self.args[0]


class UnknownProtected(ContrafairError, KeyError):
    def __str__(self):
        return self.args[0]


class SchemaMismatch(ContrafairError, ValueError):
    pass


class NonFiniteLoss(ContrafairError, ArithmeticError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training objective became non-finite at epoch {epoch}")


class MissingOutcome(ContrafairError, ValueError):
    pass


class EmptyBatch(ContrafairError, ValueError):
    pass


# fairness checks
class ContinuousProtectedUnenumerable(ContrafairError, ValueError):
    pass


class SameDecision(ContrafairError, ValueError):
    pass


class SameIndividual(ContrafairError, ValueError):
    pass


class UnknownSnapshot(ContrafairError, KeyError):
    def __str__(self):
        return self.args[0]


class EmptyGroup(ContrafairError, ValueError):
    pass


class EmptyConditionedGroup(EmptyGroup):
    pass


# synthesis
class InvalidMarginal(ContrafairError, ValueError):
    pass


class DomainTooLarge(ContrafairError, ValueError):
    pass


# ingestion and orchestration
class ParseError(ContrafairError, ValueError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column!r}")
        prefix = f"{', '.join(loc)}: " if loc else ""
        super().__init__(prefix + message)


class DomainViolation(ParseError):
    pass


class DuplicateTimestamp(ParseError):
    pass


class ConfigConflict(ContrafairError, ValueError):
    pass
