"""Buffered Voronoi cells as sets of linear half-spaces.

For agent i and neighbor j the cell keeps the side of the perpendicular
bisector of p_i p_j that contains p_i, retracted by the safety radius r_s:

    (p - (p_i + p_j)/2)' (p_j - p_i) + r_s ||p_j - p_i|| <= 0

The normal points from i towards j, so p_i itself satisfies the inequality
whenever ||p_i - p_j|| >= 2 r_s. Points of two different cells are at least
2 r_s apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import BlockLayout, HorizonConfig
from .errors import ConfigError


@dataclass(frozen=True)
class HalfSpace:
    """``normal . p + offset <= 0``"""

    normal: np.ndarray
    offset: float
    neighbor: int = -1

    def __post_init__(self):
        if not np.any(self.normal):
            raise ValueError("half-space normal must be nonzero")

    def value(self, p) -> np.ndarray:
        return np.asarray(p) @ self.normal + self.offset

    def contains(self, p, tol=0.0):
        return self.value(p) <= tol


@dataclass
class BvcSet:
    owner: int
    halfspaces: list[HalfSpace]
    infeasible_start: bool = False
    # neighbors that are currently closer than 2 r_s
    violations: list[int] = field(default_factory=list)

    def contains(self, p, tol=0.0) -> bool:
        return all(bool(h.contains(p, tol)) for h in self.halfspaces)

    def slack(self, p) -> np.ndarray:
        """Per-half-space value of ``-(normal.p + offset)``; nonnegative inside."""
        return np.array([-h.value(p) for h in self.halfspaces])


def build_bvc(i: int, positions, r_s: float, neighbors=None) -> BvcSet:
    """Half-spaces of agent i against every other agent (or only ``neighbors``)."""
    positions = np.asarray(positions, dtype=float)
    if not r_s > 0:
        raise ConfigError(f"r_s must be positive, got {r_s}")
    p_i = positions[i]
    halfspaces, violations = [], []
    others = range(len(positions)) if neighbors is None else neighbors
    for j in others:
        if j == i:
            continue
        p_j = positions[j]
        normal = p_j - p_i
        dist = float(np.linalg.norm(normal))
        if dist == 0.0:
            raise ConfigError(f"agents {i} and {j} occupy the same position")
        midpoint = 0.5 * (p_i + p_j)
        halfspaces.append(HalfSpace(normal, float(-midpoint @ normal + r_s * dist), j))
        if dist < 2.0 * r_s:
            violations.append(j)
    return BvcSet(i, halfspaces, bool(violations), violations)


def bvc_to_rows(bvc: BvcSet, cfg: HorizonConfig, layout: BlockLayout):
    """Inequality rows ``A z <= b`` over the owner's block for steps k = 1..T.

    Rows are ordered neighbor-major, then by step.
    """
    rows = np.zeros((len(bvc.halfspaces) * cfg.T, layout.size))
    rhs = np.zeros(len(bvc.halfspaces) * cfg.T)
    r = 0
    for h in bvc.halfspaces:
        for k in range(1, cfg.T + 1):
            rows[r, layout.position(k)] = h.normal
            rhs[r] = -h.offset
            r += 1
    return rows, rhs
