"""Exception hierarchy.

Everything raised on account of bad user input derives from
:class:`InputError`; the CLI maps that branch to exit code 1.
"""


class DualTapError(Exception):
    """Base class for all package errors."""


class InputError(DualTapError, ValueError):
    """Invalid network, demand, file or configuration input."""

    def __init__(self, message, *, source=None, line=None):
        self.source = source
        self.line = line
        where = ""
        if source is not None:
            where = f"{source}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


# -- network construction -----------------------------------------------------

class DanglingEndpoint(InputError):
    pass


class SelfLoop(InputError):
    pass


class DuplicateEdgeId(InputError):
    pass


class EmptyDemand(InputError):
    pass


class InvalidDemand(InputError):
    """Non-positive demand, duplicate pair, or origin equal to destination."""


class InvalidRegime(InputError):
    """Cost-regime parameters outside their admissible range."""


class UnreachableDemandedDestination(InputError):
    def __init__(self, origin, dest, **kw):
        self.origin = origin
        self.dest = dest
        super().__init__(
            f"destination {dest} unreachable from origin {origin}", **kw
        )


# -- file parsing -------------------------------------------------------------

class ParseError(InputError):
    pass


class MalformedHeader(ParseError):
    pass


class RowArityError(ParseError):
    pass


class NonPositiveCapacity(ParseError):
    pass


class NonPositiveFreeTime(ParseError):
    pass


class MalformedOriginBlock(ParseError):
    pass


class NegativeDemand(ParseError):
    pass


class UnresolvedSelector(ParseError):
    pass


class AmbiguousSelector(ParseError):
    pass


class ConfigError(ParseError):
    pass


# -- numerics -----------------------------------------------------------------

class RegimeMismatch(DualTapError, ValueError):
    """Operation not defined for the edge's cost regime."""


class DomainError(DualTapError, ValueError):
    """Argument outside the domain of a conjugate function."""


class ZeroSubgradient(DualTapError):
    pass


# -- reference oracles --------------------------------------------------------

class RegimeError(InputError):
    """Oracle requires a pure-Beckmann network."""


class PathExplosion(InputError):
    pass


class InfeasiblePathFlows(InputError):
    pass
