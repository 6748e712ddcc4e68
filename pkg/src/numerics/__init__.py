from src.numerics.tensor import (ShapeError, Tape, Tensor, active_tape, as_tensor, default_dtype,
                                 precision, set_default_dtype)
from src.numerics.gradcheck import gradcheck, gradcheck_tensors, random_coordinates, relative_error
