"""Lower-polariton Bose-Hubbard simulations of deterministic single-photon generation."""

__version__ = "0.1.0"

from .fockspace import FockBasis, SparseOperator, build_basis  # noqa: E402,F401
from .model import DetuningSchedule, DeviceParams, lp_site_params  # noqa: E402,F401
