"""Record the discrete choices (signs, argmaxes, neighbour sets) a forward pass makes.

Finite differences are only meaningful when the perturbed evaluations take the
same branches as the centre point; the gradient checker compares recordings.
Recording is off unless a :func:`recording` block is active.
"""

from __future__ import annotations

import contextlib

import numpy as np

_active: list | None = None


def enabled() -> bool:
    return _active is not None


def note(kind: str, choice: np.ndarray) -> None:
    if _active is not None:
        _active.append((kind, np.array(choice, copy=True)))


@contextlib.contextmanager
def recording():
    global _active
    saved, _active = _active, []
    try:
        yield _active
    finally:
        _active = saved


def same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(ka == kb and np.array_equal(xa, xb) for (ka, xa), (kb, xb) in zip(a, b))
