"""Sinusoidal positional encodings of normalized coordinates.

``PE(x)[2i] = sin(s*x / 10000**(2i/d))`` and ``PE(x)[2i+1] = cos(...)``
with ``s = 1`` by default (no 2*pi stretch). Points and boxes concatenate
one encoding per coordinate.
"""

import numpy as np

from .errors import ContractViolation


def pe_scalar(x, d, scale=1.0):
    """Encode scalar(s) ``x`` into vectors of even length ``d``.

    Array input of shape ``S`` returns shape ``S + (d,)``.
    """
    if d <= 0 or d % 2:
        raise ContractViolation(f"encoding length must be positive and even, got {d}")
    x = np.asarray(x, dtype=np.float64)
    freq = 10000.0 ** (2.0 * np.arange(d // 2) / d)
    angle = scale * x[..., None] / freq
    out = np.empty(x.shape + (d,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def _concat(coords, d_model, scale):
    k = len(coords)
    if d_model % (2 * k):
        raise ContractViolation(f"d_model={d_model} must be divisible by {2 * k}")
    return np.concatenate([pe_scalar(c, d_model // k, scale) for c in coords], axis=-1)


def pe_point(x, y, d_model, scale=1.0):
    return _concat((x, y), d_model, scale)


def pe_box(cx, cy, w, h, d_model, scale=1.0):
    return _concat((cx, cy, w, h), d_model, scale)


def pe_points(positions, d_model, scale=1.0):
    """Encode an ``(..., 2)`` array of points."""
    positions = np.asarray(positions, dtype=np.float64)
    return pe_point(positions[..., 0], positions[..., 1], d_model, scale)


def pe_boxes(boxes, d_model, scale=1.0):
    """Encode an ``(..., 4)`` array of cxcywh boxes."""
    b = np.asarray(boxes, dtype=np.float64)
    return pe_box(b[..., 0], b[..., 1], b[..., 2], b[..., 3], d_model, scale)
