"""Geometric transformation models and inverse coordinate maps.

A transformed view of a pattern is obtained by evaluating the pattern at
inversely mapped coordinates: the map undoes a translation, then a rotation,
then an anisotropic scaling.  Atom placement inside a pattern uses a map of
the same shape with its own parameters.  All map functions broadcast over
numpy arrays and are pure.

Coordinates follow raster convention: x grows rightward, y grows downward,
origin at the window top-left.  Angles are radians, normalized to [0, 2*pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

TWO_PI = 2.0 * math.pi


def _normalize_angle(a: float) -> float:
    a = float(a) % TWO_PI
    # the modulo can return TWO_PI itself for tiny negative inputs
    if a >= TWO_PI:
        a -= TWO_PI
    return a


@dataclass(frozen=True)
class TransformParams:
    """Image-side transformation: rotation angle, translation, axis scales."""

    angle: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    sx: float = 1.0
    sy: float = 1.0

    def __post_init__(self):
        if not (self.sx > 0.0 and self.sy > 0.0):
            raise ValueError(f"scale factors must be positive, got sx={self.sx}, sy={self.sy}")
        object.__setattr__(self, "angle", _normalize_angle(self.angle))
        for name in ("tx", "ty", "sx", "sy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @staticmethod
    def identity() -> "TransformParams":
        return TransformParams()


class TransformModel(Enum):
    """Which transformation parameters are free; the rest stay at identity."""

    FULL5 = "full5"
    TRANSLATE2 = "translate2"
    SCALE2 = "scale2"
    SIM4 = "sim4"

    @property
    def dim(self) -> int:
        return {"full5": 5, "translate2": 2, "scale2": 2, "sim4": 4}[self.value]

    @property
    def param_names(self) -> tuple:
        return {
            "full5": ("angle", "tx", "ty", "sx", "sy"),
            "translate2": ("tx", "ty"),
            "scale2": ("sx", "sy"),
            "sim4": ("angle", "tx", "ty", "s"),
        }[self.value]

    def to_vector(self, p: TransformParams) -> np.ndarray:
        if self is TransformModel.FULL5:
            return np.array([p.angle, p.tx, p.ty, p.sx, p.sy])
        if self is TransformModel.TRANSLATE2:
            return np.array([p.tx, p.ty])
        if self is TransformModel.SCALE2:
            return np.array([p.sx, p.sy])
        return np.array([p.angle, p.tx, p.ty, p.sx])

    def from_vector(self, v) -> TransformParams:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got shape {v.shape}")
        if self is TransformModel.FULL5:
            return TransformParams(v[0], v[1], v[2], v[3], v[4])
        if self is TransformModel.TRANSLATE2:
            return TransformParams(tx=v[0], ty=v[1])
        if self is TransformModel.SCALE2:
            return TransformParams(sx=v[0], sy=v[1])
        return TransformParams(angle=v[0], tx=v[1], ty=v[2], sx=v[3], sy=v[3])


class ParamDomain:
    """Closed box of parameter vectors; degenerate (zero-width) sides allowed."""

    def __init__(self, lows, highs):
        lo = np.atleast_1d(np.asarray(lows, dtype=float))
        hi = np.atleast_1d(np.asarray(highs, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be 1-d arrays of equal length")
        if np.any(hi < lo):
            raise ValueError(f"empty domain: lows={lo}, highs={hi}")
        self.lows = lo
        self.highs = hi

    @property
    def dim(self) -> int:
        return self.lows.size

    def widths(self) -> np.ndarray:
        return self.highs - self.lows

    def center(self) -> np.ndarray:
        return 0.5 * (self.lows + self.highs)

    def clip(self, v) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=float), self.lows, self.highs)

    def contains(self, v, tol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lows - tol) and np.all(v <= self.highs + tol))

    def grid_axes(self, pts_per_dim: int) -> list:
        """Per-dimension sample points; a zero-width side yields one point."""
        axes = []
        for lo, hi in zip(self.lows, self.highs):
            if hi - lo <= 0.0:
                axes.append(np.array([lo]))
            else:
                axes.append(np.linspace(lo, hi, pts_per_dim))
        return axes

    def grid_points(self, pts_per_dim: int) -> np.ndarray:
        """All grid points as rows, in lexicographic index order."""
        axes = self.grid_axes(pts_per_dim)
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lows, self.highs, size=(n, self.dim))

    def subdomain(self, dims) -> "ParamDomain":
        dims = list(dims)
        return ParamDomain(self.lows[dims], self.highs[dims])

    def __eq__(self, other):
        return (
            isinstance(other, ParamDomain)
            and np.array_equal(self.lows, other.lows)
            and np.array_equal(self.highs, other.highs)
        )

    def __repr__(self):
        return f"ParamDomain({self.lows.tolist()}, {self.highs.tolist()})"


def _apply_inverse(angle, tx, ty, sx, sy, x, y):
    ca, sa = math.cos(angle), math.sin(angle)
    dx = np.asarray(x, dtype=float) - tx
    dy = np.asarray(y, dtype=float) - ty
    return (ca * dx + sa * dy) / sx, (-sa * dx + ca * dy) / sy


def inverse_map(params: TransformParams, x, y):
    """Window coordinates -> pattern coordinates under the image-side map."""
    return _apply_inverse(params.angle, params.tx, params.ty, params.sx, params.sy, x, y)


def forward_map(params: TransformParams, xp, yp):
    """Inverse of :func:`inverse_map`: scale, rotate back, translate."""
    ca, sa = math.cos(params.angle), math.sin(params.angle)
    xs = np.asarray(xp, dtype=float) * params.sx
    ys = np.asarray(yp, dtype=float) * params.sy
    return ca * xs - sa * ys + params.tx, sa * xs + ca * ys + params.ty


def atom_inverse_map(atom_params, x, y):
    """Pattern coordinates -> atom-local coordinates.

    ``atom_params`` needs fields angle/tx/ty/sx/sy; the map has the same
    structure as the image-side one.
    """
    return _apply_inverse(
        atom_params.angle, atom_params.tx, atom_params.ty, atom_params.sx, atom_params.sy, x, y
    )


def composed_map(atom_params, params: TransformParams, x, y):
    """Atom-local coordinates of window points: atom map after image map."""
    nu, xi = inverse_map(params, x, y)
    return atom_inverse_map(atom_params, nu, xi)


def default_lambda_domain(model: TransformModel, window_width: float) -> ParamDomain:
    """Conventional search box: full rotation, quarter-window shifts, 2x scales."""
    t = window_width / 4.0
    bounds = {
        "angle": (0.0, TWO_PI),
        "tx": (-t, t),
        "ty": (-t, t),
        "sx": (0.5, 2.0),
        "sy": (0.5, 2.0),
        "s": (0.5, 2.0),
    }
    lows = [bounds[name][0] for name in model.param_names]
    highs = [bounds[name][1] for name in model.param_names]
    return ParamDomain(lows, highs)
