from typing import Annotated, Callable

import numpy as np
from pydantic import BeforeValidator, PlainSerializer

from phydrl.util.errors import DimensionMismatch, NonFinite


def array_validator(ndim: int, name: str = "array") -> Callable[[object], np.ndarray]:
    """
    Create a validator that coerces nested lists / arrays into a finite float64 ndarray.

    ## Usage

    ```python
    from typing import Annotated
    from pydantic import BaseModel, BeforeValidator

    class Record(BaseModel):
        P: Annotated[np.ndarray, BeforeValidator(array_validator(2, "P"))]
    ```

    A vector passed where a matrix is expected is promoted to a single row, so
    gains such as `F` can be written as a flat list.

    Parameters:
        ndim (int): Required number of dimensions (1 or 2).
        name (str): Field name used in error messages.
    """

    def validate(v: object) -> np.ndarray:
        arr = np.array(v, dtype=np.float64)
        if ndim == 2 and arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if ndim == 1 and arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim != ndim:
            raise DimensionMismatch(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"{name} contains non-finite entries")
        arr.setflags(write=False)
        return arr

    return validate


def _dump(arr: np.ndarray) -> list:
    return arr.tolist()


Matrix = Annotated[
    np.ndarray,
    BeforeValidator(array_validator(2, "matrix")),
    PlainSerializer(_dump, return_type=list),
]
Vector = Annotated[
    np.ndarray,
    BeforeValidator(array_validator(1, "vector")),
    PlainSerializer(_dump, return_type=list),
]


def as_state(s, n: int, name: str = "state") -> np.ndarray:
    """Return `s` as a float64 vector of length `n` (or an (N, n) batch)."""
    arr = np.asarray(s, dtype=np.float64)
    if arr.shape[-1:] != (n,) or arr.ndim > 2:
        raise DimensionMismatch(f"{name} must have trailing dimension {n}, got shape {arr.shape}")
    return arr
