"""Weight-tied recurrent grid transformer with entropy-based dynamic halting."""

from gridloop.tensor import Tensor, backward, no_grad, set_default_dtype, using_dtype

__all__ = ["Tensor", "backward", "no_grad", "set_default_dtype", "using_dtype"]
