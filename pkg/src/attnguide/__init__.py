"""Attention guiding for small transformer encoders.

Auxiliary losses that push attention heads apart (map discrimination and
pattern decorrelation), a numpy transformer encoder with hand-written
backward passes, baseline guides, metrics and analysis exports.
"""

from attnguide.errors import InvalidArgumentError, NumericalError, ParseError

__version__ = "0.1.0"

__all__ = ["InvalidArgumentError", "NumericalError", "ParseError", "__version__"]
