from typing import List, Union

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]
Scalar = Union[float, FloatArray]


def wrap_angle(angle: Scalar) -> Scalar:
    """
    Wrap angles to (-pi, pi]. Works on floats and arrays.
    """
    wrapped = np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), 2.0 * np.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def spawn_generators(seed: int, count: int) -> List[np.random.Generator]:
    """Independent RNG streams for `count` environments from one root seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]
