"""bitguard: bit-flip attack and defense simulation for quantized networks.

The package models an adversary that flips stored weight bits under a flip
and inference budget, and two complementary defenses: re-encoding the most
sensitive weights into truncated unary codewords that bound per-flip damage,
and signature-based detection with cluster-centroid weight locking that
repairs everything else.  A planner searches the joint defense space, and a
harness trains desk-scale quantized CNNs to run end-to-end experiments.
"""

from . import bitcodec, engine
from .errors import (
    BitguardError,
    ConfigError,
    FormatError,
    InputError,
    NumericError,
    PlanError,
)

__version__ = "0.1.0"
