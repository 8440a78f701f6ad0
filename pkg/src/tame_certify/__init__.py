"""tame-certify - certified size and degree exponents for depth-2 circuits of Kronecker powers."""

__version__ = "0.1.0"

from .errors import CertifyError
from .gabound import Envelope, certify_theta, read_envelope, write_envelope
from .landscape import certify_size_bound, verify_degree_bound
from .rebalance import TameParams, resolve_family, unfold, validate_family

__all__ = [
    "CertifyError",
    "Envelope",
    "TameParams",
    "certify_size_bound",
    "certify_theta",
    "read_envelope",
    "resolve_family",
    "unfold",
    "validate_family",
    "verify_degree_bound",
    "write_envelope",
    "__version__",
]
