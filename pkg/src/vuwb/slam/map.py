"""Map state shared by the exploration and localization stages."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from ..liegeom import PoseSE3


@dataclass
class Keyframe:
    id: int
    timestamp: float
    pose: PoseSE3
    lm_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    z: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ranges: dict = field(default_factory=dict)  # anchor_id -> (D, sigma)


@dataclass
class Anchor:
    id: int
    position: np.ndarray
    fixed: bool = False
    deploy_time: float = 0.0


@dataclass(frozen=True)
class LoopEdge:
    """Relative constraint ``T_ij = T_i * T_j^-1`` between keyframes i and j."""
    i: int
    j: int
    T_ij: PoseSE3
    weight: float = 1.0

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("loop edge endpoints must differ")
        if not self.weight > 0:
            raise ValueError("loop edge weight must be positive")


@dataclass
class MapState:
    keyframes: dict = field(default_factory=dict)   # id -> Keyframe, insertion order = time order
    landmarks: dict = field(default_factory=dict)   # id -> (3,) array
    anchors: dict = field(default_factory=dict)     # id -> Anchor
    observers: dict = field(default_factory=dict)   # landmark id -> list of keyframe ids (mapped or not)
    ref_kf: dict = field(default_factory=dict)      # landmark id -> keyframe id it was created from
    covisibility: dict = field(default_factory=dict)  # (i, j) with i < j -> shared mapped landmarks

    def add_keyframe(self, kf: Keyframe):
        if self.keyframes:
            last = next(reversed(self.keyframes.values()))
            if not kf.timestamp > last.timestamp:
                raise ValueError("keyframe timestamps must increase")
        self.keyframes[kf.id] = kf
        for lm in kf.lm_ids.tolist():
            obs = self.observers.setdefault(lm, [])
            if lm in self.landmarks:
                for other in obs:
                    self._bump(other, kf.id)
            obs.append(kf.id)

    def add_landmark(self, lm_id: int, p, ref_kf: int):
        self.landmarks[lm_id] = np.asarray(p, dtype=float)
        self.ref_kf[lm_id] = ref_kf
        for a, b in combinations(self.observers.get(lm_id, []), 2):
            self._bump(a, b)

    def _bump(self, a, b):
        key = (a, b) if a < b else (b, a)
        self.covisibility[key] = self.covisibility.get(key, 0) + 1

    def covisible(self, kf_id: int, theta: int) -> list:
        return sorted(b if a == kf_id else a for (a, b), n in self.covisibility.items()
                      if n >= theta and kf_id in (a, b))

    def first_anchor_id(self):
        return next(iter(self.anchors)) if self.anchors else None


def recount_covisibility(m: MapState) -> dict:
    """Shared mapped-landmark counts recomputed from scratch."""
    counts = {}
    for lm, obs in m.observers.items():
        if lm not in m.landmarks:
            continue
        for a, b in combinations(sorted(set(obs)), 2):
            counts[(a, b)] = counts.get((a, b), 0) + 1
    return counts
