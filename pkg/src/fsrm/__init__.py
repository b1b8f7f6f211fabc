"""Fast-slow recurrent model with a Dyck-language benchmark harness."""

from . import tensor
from .gradcheck import gradient_check

__all__ = ["tensor", "gradient_check"]
__version__ = "0.1.0"
