from .gradcheck import finite_diff_grad, relative_error
from .kernels import BACKEND
from .ops import *  # noqa: F401,F403
from .ops import __all__ as _ops_all

__all__ = ["BACKEND", "finite_diff_grad", "relative_error", *_ops_all]
