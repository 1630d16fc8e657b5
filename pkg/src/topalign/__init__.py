"""Flow-matching multi-part assembly with student-teacher representation alignment."""

from .errors import (ConfigError, DegenerateBatch, DegenerateConfiguration, DegenerateFeature,
                     DivergedError, FormatError, GenerationFailure, InvalidArgument,
                     NonFiniteGradient, UndefinedMetric)

__version__ = "0.1.0"
