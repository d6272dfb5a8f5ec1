"""Trust stack for tile-embedding classifiers.

Distance-aware uncertainty from a spectral-normalized random-feature head,
split conformal prediction, conformal risk control under contamination,
ambiguity-based tile elimination, OOD gating, patient-level aggregation,
and fairness gaps. Everything is seeded and deterministic.
"""

from ._core import *  # noqa: F401,F403
from ._core import __doc__ as _core_doc  # noqa: F401
from ._core import __version__  # noqa: F401
