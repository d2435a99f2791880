"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigurationError -> 2, DataFileError -> 3,
NumericError -> 4.
"""


class DHLightError(Exception):
    pass


class ConfigurationError(DHLightError):
    """Invalid configuration value or inconsistent experiment setup."""


class DataFileError(DHLightError):
    """Roadnet/flow file cannot be parsed or references unknown entities."""


class UnsupportedFeatureError(DataFileError):
    """Input file uses a topology or phase scheme the model cannot map."""


class NumericError(DHLightError):
    """Numeric-domain violation (NaN/inf inputs, undefined metrics)."""


class DimensionError(NumericError):
    """Operand shapes do not conform."""


class TapeError(DHLightError):
    """Gradient requested for a value that was not traced."""


class UnknownAgentError(DHLightError):
    """Intersection id does not exist in the network."""


class ActionError(DHLightError):
    """Phase choice outside the valid range for an agent."""


class MetricError(NumericError):
    """Metric undefined for the accumulated data (e.g. ATT of zero vehicles)."""


class GraphError(DHLightError):
    """Degenerate hypergraph input or inconsistent hyperedge set."""
