"""Global run settings: float precision mode and seed plumbing.

Two precisions are supported process-wide: ``f64`` for tests and gradient
checks, ``f32`` for training speed.  The mode is a module-level global so the
whole pipeline (tensors, fields, renderer) agrees on one dtype; switch it with
:func:`set_float_mode` or temporarily with the :func:`precision` context
manager.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_float_mode = "f64"


def set_float_mode(mode: str) -> None:
    if mode not in _DTYPES:
        raise ValueError(f"unknown float mode {mode!r}, expected 'f32' or 'f64'")
    global _float_mode
    _float_mode = mode


def float_mode() -> str:
    return _float_mode


def dtype() -> type:
    """Numpy scalar type of the active mode."""
    return _DTYPES[_float_mode]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the global float mode."""
    previous = _float_mode
    set_float_mode(mode)
    try:
        yield
    finally:
        set_float_mode(previous)


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent deterministic generators from one seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
