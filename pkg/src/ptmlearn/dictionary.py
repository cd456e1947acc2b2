"""Mother functions, parametric atoms, and sparse patterns.

A pattern is a finite weighted sum of atoms, each atom being a rotated,
shifted and scaled copy of a smooth mother function.  Both supported mother
functions are strictly positive, radially structured, and expressible as a
convex decreasing profile of the squared radius, which later analysis relies
on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import atom_inverse_map

GAUSSIAN_PEAK = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class Gaussian:
    """Isotropic Gaussian bump, peak value sqrt(2/pi) at the origin."""

    kind: str = "gaussian"

    def value(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return GAUSSIAN_PEAK * np.exp(-(x * x + y * y))

    @property
    def peak(self) -> float:
        return GAUSSIAN_PEAK

    # Profiles in the squared radius z = x^2 + y^2.  Both are convex and
    # decreasing on z >= 0, with steepest slope at z = 0.
    def profile(self, z):
        return GAUSSIAN_PEAK * np.exp(-np.asarray(z, dtype=float))

    def profile_slope_bound(self) -> float:
        return GAUSSIAN_PEAK

    def squared_profile(self, z):
        return (2.0 / math.pi) * np.exp(-2.0 * np.asarray(z, dtype=float))

    def squared_profile_slope_bound(self) -> float:
        return 4.0 / math.pi


@dataclass(frozen=True)
class InverseMultiquadric:
    """Inverse multiquadric bump (1 + x^2 + y^2)**mu with mu < 0."""

    mu: float = -3.0
    kind: str = "imq"

    def __post_init__(self):
        if not self.mu < 0.0:
            raise ValueError(f"exponent must be negative, got mu={self.mu}")

    def value(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (1.0 + x * x + y * y) ** self.mu

    @property
    def peak(self) -> float:
        return 1.0

    def profile(self, z):
        return (1.0 + np.asarray(z, dtype=float)) ** self.mu

    def profile_slope_bound(self) -> float:
        return abs(self.mu)

    def squared_profile(self, z):
        return (1.0 + np.asarray(z, dtype=float)) ** (2.0 * self.mu)

    def squared_profile_slope_bound(self) -> float:
        return 2.0 * abs(self.mu)


def make_mother(kind: str, mu: float = -3.0):
    if kind == "gaussian":
        return Gaussian()
    if kind == "imq":
        return InverseMultiquadric(mu=mu)
    raise ValueError(f"unknown mother function kind: {kind!r}")


@dataclass(frozen=True)
class AtomParams:
    """Atom placement: rotation angle, center shift, axis widths."""

    angle: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    sx: float = 1.0
    sy: float = 1.0

    def __post_init__(self):
        if not (self.sx > 0.0 and self.sy > 0.0):
            raise ValueError(f"atom widths must be positive, got sx={self.sx}, sy={self.sy}")
        for name in ("angle", "tx", "ty", "sx", "sy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def to_vector(self) -> np.ndarray:
        return np.array([self.angle, self.tx, self.ty, self.sx, self.sy])

    @staticmethod
    def from_vector(v) -> "AtomParams":
        v = np.asarray(v, dtype=float)
        if v.shape != (5,):
            raise ValueError(f"expected vector of length 5, got shape {v.shape}")
        return AtomParams(v[0], v[1], v[2], v[3], v[4])


@dataclass(frozen=True)
class Atom:
    params: AtomParams
    coef: float


@dataclass(frozen=True)
class Pattern:
    """Weighted atom sum; zero-coefficient atoms are dropped on construction."""

    mother: object
    atoms: tuple = ()

    def __post_init__(self):
        kept = tuple(a for a in self.atoms if a.coef != 0.0)
        object.__setattr__(self, "atoms", kept)

    @property
    def atom_count(self) -> int:
        return len(self.atoms)

    def with_atom(self, params: AtomParams, coef: float) -> "Pattern":
        return Pattern(self.mother, self.atoms + (Atom(params, float(coef)),))

    def evaluate(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape)
        for atom in self.atoms:
            out += atom.coef * eval_atom(self.mother, atom.params, x, y)
        return out


def eval_mother(mother, x, y):
    return mother.value(x, y)


def eval_atom(mother, atom_params: AtomParams, x, y):
    xa, ya = atom_inverse_map(atom_params, x, y)
    return mother.value(xa, ya)


def eval_pattern(pattern: Pattern, x, y):
    return pattern.evaluate(x, y)
