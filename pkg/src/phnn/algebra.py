"""Contribution matrices ``A_i`` that encode a hypercomplex multiplication rule.

A multiplication table ``e_i * e_v = s * e_u`` is turned into n signed
matrices by setting ``A_i[u, v] = s``.  With filter blocks ``F_i`` the
weight ``sum_i A_i (x) F_i`` then computes the left product ``W * x``
block-wise, which for quaternions is the familiar Hamilton block layout::

    [ W0 -W1 -W2 -W3 ]
    [ W1  W0 -W3  W2 ]
    [ W2  W3  W0 -W1 ]
    [ W3 -W2  W1  W0 ]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidN, SpecInvalid
from .tensor import Tensor

# Signed multiplication tables: entry [i][j] = s * (u + 1) encodes e_i * e_j = s * e_u.
COMPLEX_TABLE = (
    (+1, +2),
    (+2, -1),
)

QUATERNION_TABLE = (
    (+1, +2, +3, +4),
    (+2, -1, +4, -3),
    (+3, -4, -1, +2),
    (+4, +3, -2, -1),
)

# Cayley-Dickson octonions with index triples (123) (145) (176) (246) (257) (347) (365).
OCTONION_TABLE = (
    (+1, +2, +3, +4, +5, +6, +7, +8),
    (+2, -1, +4, -3, +6, -5, -8, +7),
    (+3, -4, -1, +2, +7, +8, -5, -6),
    (+4, +3, -2, -1, +8, -7, +6, -5),
    (+5, -6, -7, -8, -1, +2, +3, +4),
    (+6, +5, -8, +7, -2, -1, -4, +3),
    (+7, +8, +5, -6, -3, +4, -1, -2),
    (+8, -7, +6, +5, -4, -3, +2, -1),
)

FAMILIES = ("real", "complex", "quaternion", "octonion")
_TABLES = {
    "real": ((+1,),),
    "complex": COMPLEX_TABLE,
    "quaternion": QUATERNION_TABLE,
    "octonion": OCTONION_TABLE,
}
FAMILY_N = {name: len(table) for name, table in _TABLES.items()}


def table_to_matrices(table) -> np.ndarray:
    """Convert a signed multiplication table into the stack ``A`` of shape [n, n, n]."""
    t = np.asarray(table, dtype=int)
    n = t.shape[0]
    A = np.zeros((n, n, n))
    for i in range(n):
        for v in range(n):
            code = t[i, v]
            A[i, abs(code) - 1, v] = np.sign(code)
    return A


REFERENCE_MATRICES = {name: table_to_matrices(table) for name, table in _TABLES.items()}


@dataclass
class AlgebraSpec:
    """The n contribution matrices, stacked as a tensor of shape [n, n, n]."""

    n: int
    mode: str
    weights: Tensor
    family: Optional[str] = None
    meta: dict = field(default_factory=dict)

    @property
    def matrices(self) -> list:
        return [self.weights.data[i] for i in range(self.weights.shape[0])]

    @property
    def learnable(self) -> bool:
        return self.mode == "learnable"

    def to_config(self) -> dict:
        return {"n": self.n, "mode": self.mode, "family": self.family}


def preset_algebra(family: str) -> AlgebraSpec:
    if family not in _TABLES:
        raise SpecInvalid(f"unknown preset family {family!r}; choose from {FAMILIES}")
    A = REFERENCE_MATRICES[family].copy()
    return AlgebraSpec(n=A.shape[0], mode="preset", weights=Tensor(A), family=family)


def init_learnable(n: int, seed: int = 0) -> AlgebraSpec:
    """n learnable n x n matrices with entries uniform on [-1, 1]."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidN(f"n must be a positive integer, got {n!r}")
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1.0, 1.0, size=(n, n, n))
    return AlgebraSpec(n=int(n), mode="learnable", weights=Tensor(A, requires_grad=True), family="learned")


def make_algebra(n: int, mode: str, seed: int = 0) -> AlgebraSpec:
    """``mode`` is ``"learnable"`` or a preset family name whose size must equal n."""
    if mode == "learnable":
        return init_learnable(n, seed)
    spec = preset_algebra(mode)
    if spec.n != n:
        raise SpecInvalid(f"preset {mode!r} has n={spec.n}, requested n={n}")
    return spec


def validate(spec: AlgebraSpec) -> None:
    """Raise :class:`SpecInvalid` naming the first violated invariant."""
    if not isinstance(spec.n, (int, np.integer)) or spec.n < 1:
        raise SpecInvalid(f"n must be a positive integer, got {spec.n!r}")
    w = spec.weights.data
    if w.ndim != 3:
        raise SpecInvalid(f"matrices must be stacked as [n, n, n], got shape {w.shape}")
    if w.shape[0] != spec.n:
        raise SpecInvalid(f"expected exactly {spec.n} matrices, found {w.shape[0]}")
    if w.shape[1:] != (spec.n, spec.n):
        raise SpecInvalid(f"each matrix must be {spec.n}x{spec.n}, got {w.shape[1:]}")
    if not np.all(np.isfinite(w)):
        raise SpecInvalid("matrices contain non-finite entries")
    if spec.mode == "preset":
        if spec.family not in REFERENCE_MATRICES:
            raise SpecInvalid(f"preset spec has unknown family {spec.family!r}")
        ref = REFERENCE_MATRICES[spec.family]
        if ref.shape != w.shape or not np.array_equal(ref, w):
            raise SpecInvalid(f"matrices differ from the {spec.family} reference table")
        if spec.weights.requires_grad:
            raise SpecInvalid("preset matrices must not require gradients")
    elif spec.mode == "learnable":
        if not spec.weights.requires_grad:
            raise SpecInvalid("learnable matrices must require gradients")
    else:
        raise SpecInvalid(f"mode must be 'preset' or 'learnable', got {spec.mode!r}")
