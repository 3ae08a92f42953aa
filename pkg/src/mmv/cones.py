"""Admissible cone constraints on portfolio allocations.

A set is a cone when membership is preserved under scaling by any positive
number.  The members supported here are the no-shorting orthant {pi >= 0},
linear cones {A pi >= 0}, the sparsity constraint (at most q nonzero
coordinates) and intersections of these.  Sparsity is the only non-convex
member; it is handled by enumerating the permitted support patterns and
restricting the convex members to each support.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.optimize import nnls

DEFAULT_FEASIBILITY_TOL = 1e-9
DEFAULT_ENUMERATION_CAP = 100_000


class UnsupportedConeError(ValueError):
    """Raised when a convex-only operation is applied to a sparse cone."""


class EnumerationCapError(ValueError):
    """Raised when support enumeration would exceed the configured cap."""


@dataclass(frozen=True)
class SupportPattern:
    """An index subset of coordinates permitted to be nonzero."""

    indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.indices)


class ConeConstraint:
    """Intersection of elementary cone constraints in dimension ``n``.

    Use the module-level factories (``unconstrained``, ``nonnegative``,
    ``linear_cone``, ``cardinality``, ``intersect``) rather than calling the
    constructor directly.  Instances are immutable and safe to share.
    """

    def __init__(
        self,
        dimension: int,
        require_nonnegative: bool = False,
        linear: Optional[np.ndarray] = None,
        max_active: Optional[int] = None,
    ):
        if dimension < 1:
            raise ValueError(f"dimension must be >= 1, got {dimension}")
        self.dimension = int(dimension)
        self.require_nonnegative = bool(require_nonnegative)
        if linear is not None:
            linear = np.atleast_2d(np.asarray(linear, dtype=float))
            if linear.shape[1] != dimension:
                raise ValueError(
                    f"linear constraint matrix has {linear.shape[1]} columns, expected {dimension}"
                )
            if not np.all(np.isfinite(linear)):
                raise ValueError("linear constraint matrix must be finite")
        self.linear = linear
        if max_active is not None:
            max_active = int(max_active)
            if not 1 <= max_active <= dimension:
                raise ValueError(
                    f"cardinality bound must be in [1, {dimension}], got {max_active}"
                )
        self.max_active = max_active

    # -- predicates ---------------------------------------------------------

    @property
    def is_convex(self) -> bool:
        return self.max_active is None

    @property
    def is_unconstrained(self) -> bool:
        return not self.require_nonnegative and self.linear is None and self.max_active is None

    def __repr__(self) -> str:
        parts = []
        if self.require_nonnegative:
            parts.append("nonneg")
        if self.linear is not None:
            parts.append(f"linear[{self.linear.shape[0]}]")
        if self.max_active is not None:
            parts.append(f"card<={self.max_active}")
        body = "*".join(parts) if parts else "free"
        return f"ConeConstraint({body}, n={self.dimension})"

    def is_feasible(self, pi: np.ndarray, tol: float = DEFAULT_FEASIBILITY_TOL) -> bool:
        """True iff ``pi`` satisfies every member constraint within ``tol``."""
        pi = np.asarray(pi, dtype=float)
        if pi.shape != (self.dimension,):
            raise ValueError(f"allocation has shape {pi.shape}, expected ({self.dimension},)")
        if tol < 0:
            raise ValueError("tol must be nonnegative")
        if self.require_nonnegative and pi.min(initial=0.0) < -tol:
            return False
        if self.linear is not None and (self.linear @ pi).min(initial=0.0) < -tol:
            return False
        if self.max_active is not None and int(np.count_nonzero(np.abs(pi) > tol)) > self.max_active:
            return False
        return True

    # -- projection (convex members only) ------------------------------------

    def project(self, v: np.ndarray) -> np.ndarray:
        """Euclidean projection of ``v`` onto the cone (convex cones only).

        No-shorting alone is a coordinatewise clamp; linear cones (and the
        intersection with no-shorting) are solved through the dual
        nonnegative least-squares problem with an active-set method.
        """
        if not self.is_convex:
            raise UnsupportedConeError("projection is only defined for convex cones")
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dimension,):
            raise ValueError(f"point has shape {v.shape}, expected ({self.dimension},)")
        if not np.all(np.isfinite(v)):
            raise ValueError("cannot project a non-finite point")
        if self.linear is None:
            return np.maximum(v, 0.0) if self.require_nonnegative else v.copy()
        rows = [self.linear]
        if self.require_nonnegative:
            rows.append(np.eye(self.dimension))
        mat = np.vstack(rows)
        # argmin ||pi - v|| s.t. M pi >= 0  has KKT form pi = v + M' mu with
        # mu >= 0 solving the NNLS problem min ||M' mu + v||.
        mu, _ = nnls(mat.T, -v)
        out = v + mat.T @ mu
        if self.require_nonnegative:
            # Active-set round-off can leave coordinates at -1e-17; clean them.
            out[np.abs(out) < 1e-14] = 0.0
        return out

    # -- sparse-support services ---------------------------------------------

    def support_count(self) -> int:
        if self.max_active is None:
            raise UnsupportedConeError("cone has no cardinality member")
        return sum(comb(self.dimension, size) for size in range(1, self.max_active + 1))

    def enumerate_supports(self, cap: int = DEFAULT_ENUMERATION_CAP) -> list[SupportPattern]:
        """All permitted-nonzero index subsets of size 1..q.

        Raises EnumerationCapError when the count exceeds ``cap``; callers
        should fall back to the greedy forward-selection mode in that case.
        """
        total = self.support_count()
        if total > cap:
            raise EnumerationCapError(
                f"{total} support patterns exceed the cap of {cap}; "
                "use the greedy cardinality mode instead"
            )
        patterns = []
        for size in range(1, self.max_active + 1):
            for subset in combinations(range(self.dimension), size):
                patterns.append(SupportPattern(indices=subset))
        return patterns

    def restrict(self, support: Sequence[int]) -> "ConeConstraint":
        """Convex residual cone on the coordinates in ``support``."""
        support = list(support)
        linear = None
        if self.linear is not None:
            sub = self.linear[:, support]
            keep = np.abs(sub).max(axis=1) > 0.0
            if keep.any():
                linear = sub[keep]
        return ConeConstraint(
            dimension=len(support),
            require_nonnegative=self.require_nonnegative,
            linear=linear,
            max_active=None,
        )

    # -- serialization --------------------------------------------------------

    def to_json_dict(self) -> dict:
        spec: dict = {}
        if self.require_nonnegative:
            spec["nonnegative"] = True
        if self.max_active is not None:
            spec["cardinality"] = self.max_active
        if self.linear is not None:
            spec["linear_rows"] = self.linear.tolist()
        spec["dimension"] = self.dimension
        return spec

    @classmethod
    def from_json_dict(cls, spec: dict, dimension: Optional[int] = None) -> "ConeConstraint":
        n = spec.get("dimension", dimension)
        if n is None:
            raise ValueError("cone spec needs a 'dimension' entry")
        return cls(
            dimension=int(n),
            require_nonnegative=bool(spec.get("nonnegative", False)),
            linear=np.asarray(spec["linear_rows"], dtype=float) if spec.get("linear_rows") else None,
            max_active=spec.get("cardinality"),
        )


def unconstrained(dimension: int) -> ConeConstraint:
    return ConeConstraint(dimension)


def nonnegative(dimension: int) -> ConeConstraint:
    return ConeConstraint(dimension, require_nonnegative=True)


def linear_cone(rows: np.ndarray) -> ConeConstraint:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return ConeConstraint(rows.shape[1], linear=rows)


def cardinality(max_active: int, dimension: int) -> ConeConstraint:
    return ConeConstraint(dimension, max_active=max_active)


def intersect(*cones: ConeConstraint) -> ConeConstraint:
    """Intersection of cones over a common dimension.

    At most one member may carry a cardinality bound; if several do, the
    intersection is still a cone but support enumeration would need the
    tightest bound, so it is rejected here.
    """
    if not cones:
        raise ValueError("intersect needs at least one cone")
    n = cones[0].dimension
    if any(c.dimension != n for c in cones):
        raise ValueError("cannot intersect cones of different dimensions")
    card = [c.max_active for c in cones if c.max_active is not None]
    if len(card) > 1:
        raise ValueError("intersection may contain at most one cardinality member")
    lin_rows = [c.linear for c in cones if c.linear is not None]
    return ConeConstraint(
        dimension=n,
        require_nonnegative=any(c.require_nonnegative for c in cones),
        linear=np.vstack(lin_rows) if lin_rows else None,
        max_active=card[0] if card else None,
    )


def random_feasible_points(
    cone: ConeConstraint, count: int, rng: np.random.Generator, scale: float = 1.0
) -> Iterator[np.ndarray]:
    """Generate feasible points by projecting Gaussian draws (convex members)
    and planting them on random supports for sparse cones."""
    for _ in range(count):
        v = rng.standard_normal(cone.dimension) * scale
        if cone.max_active is not None:
            support = rng.choice(cone.dimension, size=cone.max_active, replace=False)
            restricted = cone.restrict(sorted(support))
            sub = restricted.project(v[sorted(support)])
            out = np.zeros(cone.dimension)
            out[sorted(support)] = sub
            yield out
        else:
            yield cone.project(v)
