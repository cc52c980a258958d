"""Exception hierarchy shared by the pipeline stages."""


class CabinError(Exception):
    """Base class for all pipeline errors."""


class DataError(CabinError):
    """Input data cannot be processed (maps to CLI exit code 3)."""


class TooFewSamples(DataError):
    pass


class DegenerateSamples(DataError):
    """All samples are (numerically) identical; treat the variable as single-valued."""


class FitDiverged(DataError):
    pass


class NoValidFit(DataError):
    pass


class LabelOutOfRange(DataError, IndexError):
    pass


class MissingColumn(DataError, KeyError):
    pass


class UnknownNode(CabinError, KeyError):
    pass


class ImpossibleEvidence(DataError):
    pass


class StateSpaceTooLarge(CabinError):
    pass


class NotAQosNode(CabinError, ValueError):
    pass


class UntrainedModel(CabinError):
    pass


class ConfigInvalid(CabinError, ValueError):
    pass


class TunableEvidence(CabinError, ValueError):
    """Evidence tried to fix a tunable node; tunable nodes are outputs of tuning."""
