"""Exception hierarchy.

Every error carries a stable ``code`` string that the CLI writes to stderr,
and a ``category`` that decides the exit status (data vs numerical).
"""


class OrthomomError(Exception):
    code = "OrthomomError"
    category = "data"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


# -- data / input problems (CLI exit 2) ------------------------------------

class DataError(OrthomomError):
    code = "DataError"


class MissingColumn(DataError):
    code = "MissingColumn"


class ParseError(DataError):
    code = "ParseError"


class EmptyFile(DataError):
    code = "EmptyFile"


class BadSpec(DataError):
    code = "BadSpec"


class NonFinite(DataError):
    code = "NonFinite"


class DimensionMismatch(DataError):
    code = "DimensionMismatch"


class TooFewRows(DataError):
    code = "TooFewRows"


class IndexOutOfRange(DataError):
    code = "IndexOutOfRange"


class NonBinaryInstrument(DataError):
    code = "NonBinaryInstrument"


class InvalidStep(DataError):
    code = "InvalidStep"


class PathInfeasible(DataError):
    code = "PathInfeasible"


class DensityNearZero(DataError):
    code = "DensityNearZero"


# -- numerical degeneracy (CLI exit 3) --------------------------------------

class NumericalError(OrthomomError):
    code = "NumericalError"
    category = "numerical"


class RankDeficient(NumericalError):
    code = "RankDeficient"


class IrrelevantInstrument(NumericalError):
    code = "IrrelevantInstrument"


class DegenerateInstrument(NumericalError):
    code = "DegenerateInstrument"


class DegenerateVariance(NumericalError):
    code = "DegenerateVariance"


class NonStochastic(NumericalError):
    code = "NonStochastic"


class NotSolvable(NumericalError):
    code = "NotSolvable"


class SingularJacobian(NumericalError):
    code = "SingularJacobian"


class NotProportional(NumericalError):
    code = "NotProportional"


class DegenerateFunctional(NumericalError):
    code = "DegenerateFunctional"


class ColumnSpaceFailure(NumericalError):
    code = "ColumnSpaceFailure"


class QuadratureTooCoarse(NumericalError):
    code = "QuadratureTooCoarse"


class SingularScoreMatrix(NumericalError):
    code = "SingularScoreMatrix"


class EmptyInterval(NumericalError):
    code = "EmptyInterval"
