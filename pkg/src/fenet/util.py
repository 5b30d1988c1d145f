"""Small shared helpers: seeded RNG streams, pixel clamping, half-up rounding."""

import numpy as np

_MASK64 = (1 << 64) - 1


def rng_from(*keys) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of integers.

    Streams keyed by distinct tuples are independent, so work can be
    distributed per image/layer/sub-model without order effects.
    """
    return np.random.default_rng([int(k) & _MASK64 for k in keys])


def clamp01(a: np.ndarray) -> np.ndarray:
    return np.clip(a, 0.0, 1.0)


def round_half_up(a: np.ndarray) -> np.ndarray:
    # np.round ties to even; the pixel grid wants .5 to go up.
    return np.floor(a + 0.5)
