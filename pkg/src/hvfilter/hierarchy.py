"""Recursive domain partitioning, knot placement and conditioning patterns.

The hierarchy splits an axis-aligned domain into ``J`` children per level,
places the first ``r_m`` not-yet-assigned locations of a maximum-distance
ordering into each region at resolution ``m`` and puts every remaining
location at resolution ``M`` into the leaf sets.  Low-rank (``M = 1`` with one
location per leaf) and dense (``M = 0``) configurations are ordinary
hierarchies built by :func:`lr_config` and :func:`dl_config`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sparse import SparsityPattern


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True)
class HierarchyConfig:
    M: int
    J: int = 2
    set_sizes: tuple[int, ...] = ()
    leaf_cap: int = 1

    def __post_init__(self):
        object.__setattr__(self, "set_sizes", tuple(int(r) for r in self.set_sizes))
        if self.M < 0:
            raise HierarchyError("M must be nonnegative")
        if self.M >= 1 and self.J < 2:
            raise HierarchyError("J must be at least 2 when M >= 1")
        if len(self.set_sizes) != self.M:
            raise HierarchyError(f"expected {self.M} set sizes, got {len(self.set_sizes)}")
        if any(r < 1 for r in self.set_sizes):
            raise HierarchyError("set sizes must be positive")
        if self.leaf_cap < 1:
            raise HierarchyError("leaf_cap must be positive")

    @property
    def N(self) -> int:
        """Upper bound on every row of the pattern: a conditioning set plus its own variable."""
        return sum(self.set_sizes) + self.leaf_cap


def dl_config(n: int) -> HierarchyConfig:
    """Single root set holding every location: the full lower-triangular pattern."""
    return HierarchyConfig(M=0, J=2, set_sizes=(), leaf_cap=n)


def lr_config(n: int, N: int) -> HierarchyConfig:
    """Root set of ``N`` knots and one leaf per remaining location."""
    if not 1 <= N < n - 1:
        raise HierarchyError("low-rank configuration needs 1 <= N < n - 1")
    return HierarchyConfig(M=1, J=n - N, set_sizes=(N,), leaf_cap=1)


@dataclass
class Region:
    path: tuple[int, ...]
    lower: np.ndarray
    upper: np.ndarray
    members: np.ndarray
    ancestors: np.ndarray
    parent: int | None = None
    children: list[int] = field(default_factory=list)

    @property
    def level(self) -> int:
        return len(self.path)


@dataclass
class Hierarchy:
    locations: np.ndarray
    config: HierarchyConfig
    regions: list[Region]
    global_order: np.ndarray

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def position(self) -> np.ndarray:
        """Inverse of ``global_order``: position of each original index."""
        pos = np.empty(self.n, dtype=np.int64)
        pos[self.global_order] = np.arange(self.n)
        return pos

    @property
    def sets(self) -> list[np.ndarray]:
        return [r.members for r in self.regions]

    def resolution(self) -> np.ndarray:
        """Resolution of each variable, in global order."""
        res = np.empty(self.n, dtype=np.int64)
        pos = self.position
        for r in self.regions:
            res[pos[r.members]] = r.level
        return res

    def summary(self) -> str:
        cfg = self.config
        lines = [
            f"n = {self.n}",
            f"M = {cfg.M}, J = {cfg.J}, set_sizes = {list(cfg.set_sizes)}, leaf_cap = {cfg.leaf_cap}",
            f"regions = {len(self.regions)}",
        ]
        for r in self.regions:
            label = ".".join(str(j) for j in r.path) or "root"
            lines.append(f"{'  ' * r.level}{label}: level {r.level}, set {len(r.members)}, ancestors {len(r.ancestors)}")
        return "\n".join(lines) + "\n"


def _as_locations(locations) -> np.ndarray:
    locs = np.asarray(locations, dtype=float)
    if locs.ndim == 1:
        locs = locs[:, None]
    if locs.ndim != 2 or locs.shape[1] not in (1, 2):
        raise ValueError("locations must be an (n, d) array with d in {1, 2}")
    if locs.shape[0] == 0:
        raise ValueError("empty location set")
    if not np.all(np.isfinite(locs)):
        raise ValueError("location coordinates must be finite")
    return locs


def maxdist_order(locations) -> np.ndarray:
    """Greedy maximum-distance ordering.

    Starts at the location nearest the centroid; every next location maximizes
    the minimum distance to those already chosen.  Ties go to the lowest index.
    """
    locs = _as_locations(locations)
    n = locs.shape[0]
    order = np.empty(n, dtype=np.int64)
    centroid = locs.mean(axis=0)
    first = int(np.argmin(np.sqrt(((locs - centroid) ** 2).sum(axis=1))))
    order[0] = first
    mind = np.sqrt(((locs - locs[first]) ** 2).sum(axis=1))
    mind[first] = -np.inf
    for k in range(1, n):
        j = int(np.argmax(mind))
        order[k] = j
        np.minimum(mind, np.sqrt(((locs - locs[j]) ** 2).sum(axis=1)), out=mind)
        mind[j] = -np.inf
    return order


def _split(region: Region, remaining: np.ndarray, locs: np.ndarray, J: int):
    """Split a region along its longest axis into ``J`` count-balanced children."""
    extent = region.upper - region.lower
    axis = int(np.argmax(extent))
    coord = locs[remaining, axis]
    srt = remaining[np.lexsort((remaining, coord))]
    groups = np.array_split(srt, J)
    bounds = [region.lower[axis]]
    for a, b in zip(groups[:-1], groups[1:]):
        if len(a) and len(b):
            bounds.append(0.5 * (locs[a[-1], axis] + locs[b[0], axis]))
        else:
            bounds.append(bounds[-1])
    bounds.append(region.upper[axis])
    out = []
    for j, g in enumerate(groups):
        lo = region.lower.copy()
        hi = region.upper.copy()
        lo[axis] = bounds[j]
        hi[axis] = bounds[j + 1]
        out.append((lo, hi, np.sort(g)))
    return out


def build_hierarchy(locations, config: HierarchyConfig, bounds=None) -> Hierarchy:
    """Partition ``locations`` and assign knot sets per ``config``.

    Children are split at the median (``J``-quantiles) of the locations that
    are not yet assigned to an ancestor set.

    Raises
    ------
    HierarchyError
        If a leaf set would hold more than ``config.leaf_cap`` locations.
    """
    locs = _as_locations(locations)
    n = locs.shape[0]
    rank = np.empty(n, dtype=np.int64)
    rank[maxdist_order(locs)] = np.arange(n)
    if bounds is None:
        lower, upper = locs.min(axis=0), locs.max(axis=0)
    else:
        lower, upper = (np.asarray(b, dtype=float) for b in bounds)

    regions: list[Region] = []
    # breadth-first so regions come out resolution-major and lexicographic
    queue = [((), lower, upper, np.arange(n), np.empty(0, dtype=np.int64), None)]
    head = 0
    while head < len(queue):
        path, lo, hi, pts, anc, parent = queue[head]
        head += 1
        pts = pts[np.argsort(rank[pts], kind="stable")]
        level = len(path)
        if level == config.M:
            if len(pts) > config.leaf_cap:
                raise HierarchyError(
                    f"hierarchy too shallow: leaf {path} holds {len(pts)} > {config.leaf_cap} locations"
                )
            members, rest = pts, pts[:0]
        else:
            r = config.set_sizes[level]
            members, rest = pts[:r], pts[r:]
        region = Region(path, lo, hi, members, anc, parent)
        idx = len(regions)
        regions.append(region)
        if parent is not None:
            regions[parent].children.append(idx)
        if level < config.M and len(rest):
            child_anc = np.concatenate([anc, members])
            for j, (clo, chi, cpts) in enumerate(_split(region, rest, locs, config.J)):
                queue.append((path + (j,), clo, chi, cpts, child_anc, idx))

    order = np.concatenate([r.members for r in regions]).astype(np.int64)
    if len(order) != n:
        raise HierarchyError("sets do not cover all locations")
    return Hierarchy(locs, config, regions, order)


def conditioning_pattern(h: Hierarchy) -> SparsityPattern:
    """Pattern with row ``i`` = ancestors of i's region + earlier members of its set + ``i``."""
    pos = h.position
    n = h.n
    lengths = np.zeros(n, dtype=np.int64)
    for r in h.regions:
        p = pos[r.members]
        lengths[p] = len(r.ancestors) + np.arange(1, len(p) + 1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(lengths)
    indices = np.empty(indptr[-1], dtype=np.int64)
    for r in h.regions:
        p = pos[r.members]
        anc = np.sort(pos[r.ancestors])
        for k, i in enumerate(p):
            row = np.concatenate([anc, p[:k + 1]])
            indices[indptr[i]:indptr[i + 1]] = row
    return SparsityPattern(indptr, indices)


def hierarchy_pattern(locations, config: HierarchyConfig) -> tuple[Hierarchy, SparsityPattern]:
    h = build_hierarchy(locations, config)
    return h, conditioning_pattern(h)


def preset_config(preset: str, n: int, hv: HierarchyConfig | None = None, N: int | None = None) -> HierarchyConfig:
    """Configuration for one of the named presets ``hv``, ``lr`` or ``dl``."""
    if preset == "dl":
        return dl_config(n)
    if preset == "lr":
        if N is None:
            if hv is None:
                raise HierarchyError("lr preset needs N or an hv configuration")
            # same knot count as the largest hierarchical conditioning set
            N = hv.N - 1
        return lr_config(n, N)
    if preset == "hv":
        if hv is None:
            raise HierarchyError("hv preset needs a configuration")
        return hv
    raise HierarchyError(f"unknown preset {preset!r}")

