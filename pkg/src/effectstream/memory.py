"""Bounded rehearsal memory of representation vectors.

Exemplars are chosen per treatment arm by greedy herding: each pick keeps
the running mean of the selected set as close as possible to the full-set
mean, which approximates a distribution with far fewer samples than random
subsampling. Raw covariates are never stored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GroupImbalanceError
from .networks import load_arrays, save_arrays


@dataclass
class MemorySet:
    """Group-balanced stored representations with their outcomes and arms."""

    representations: np.ndarray
    y: np.ndarray
    t: np.ndarray
    capacity: int
    source_tags: np.ndarray

    def __post_init__(self):
        n = self.representations.shape[0]
        if not (self.y.shape[0] == self.t.shape[0] == self.source_tags.shape[0] == n):
            raise ValueError("memory columns must stay aligned")
        if n > self.capacity:
            raise ValueError(f"memory holds {n} rows, capacity is {self.capacity}")

    @property
    def n(self) -> int:
        return self.representations.shape[0]

    @property
    def rep_dim(self) -> int:
        return self.representations.shape[1]

    @property
    def n_treated(self) -> int:
        return int((self.t == 1).sum())

    @property
    def n_control(self) -> int:
        return int((self.t == 0).sum())

    def float_count(self) -> int:
        """Stored floats: one representation row plus outcome and arm per exemplar."""
        return self.representations.size + self.y.size + self.t.size

    def save(self, path, provenance: dict | None = None) -> None:
        save_arrays(
            path,
            {
                "representations": self.representations,
                "y": self.y,
                "t": self.t,
                "source_tags": self.source_tags.astype(np.float64),
            },
            {"capacity": self.capacity, "provenance": provenance or {}},
        )

    @classmethod
    def load(cls, path) -> tuple["MemorySet", dict]:
        arrays, meta = load_arrays(path)
        memory = cls(
            representations=arrays["representations"],
            y=arrays["y"],
            t=arrays["t"],
            capacity=int(meta["capacity"]),
            source_tags=arrays["source_tags"].astype(np.int64),
        )
        return memory, meta.get("provenance", {})


def herding_select(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy mean-matching selection order; ties broken by lowest index.

    Step k adds the point minimizing the distance between the full-set mean
    and the mean of the selected set extended by that point.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= {n}, got {m}")
    mu = points.mean(axis=0)
    chosen = np.empty(m, dtype=np.intp)
    running = np.zeros(points.shape[1])
    available = np.ones(n, dtype=bool)
    for k in range(m):
        cand = (running + points) / (k + 1.0)
        dist = ((cand - mu) ** 2).sum(axis=1)
        dist[~available] = np.inf
        pick = int(np.argmin(dist))  # argmin returns the first (lowest) index on ties
        chosen[k] = pick
        available[pick] = False
        running += points[pick]
    return chosen


def random_select(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform subsample without replacement (herding ablation)."""
    n = points.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= {n}, got {m}")
    return rng.choice(n, size=m, replace=False)


def memory_from_representations(
    reps: np.ndarray,
    y: np.ndarray,
    t: np.ndarray,
    capacity: int,
    selection: str = "herding",
    rng: np.random.Generator | None = None,
    source_tags: np.ndarray | None = None,
) -> MemorySet:
    """Select a group-balanced exemplar set from candidate representations.

    The budget splits as evenly as possible across arms (extra slot to
    control); an arm smaller than its share is kept whole.
    """
    if capacity < 2:
        raise ValueError("memory capacity must be at least 2")
    if selection not in ("herding", "random"):
        raise ValueError(f"unknown selection strategy {selection!r}")
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    reps = np.asarray(reps, dtype=np.float64)
    if source_tags is None:
        source_tags = np.zeros(reps.shape[0], dtype=np.int64)
    idx1 = np.flatnonzero(t == 1)
    idx0 = np.flatnonzero(t == 0)
    if idx1.size == 0 or idx0.size == 0:
        raise GroupImbalanceError("memory needs candidates from both treatment arms")
    share1 = min(capacity // 2, idx1.size)
    share0 = min(capacity - capacity // 2, idx0.size)
    picked = []
    for idx, share in ((idx1, share1), (idx0, share0)):
        if selection == "herding":
            order = herding_select(reps[idx], share)
        else:
            if rng is None:
                raise ValueError("random selection needs a generator")
            order = random_select(reps[idx], share, rng)
        picked.append(idx[order])
    keep = np.concatenate(picked)
    return MemorySet(
        representations=reps[keep].copy(),
        y=y[keep].copy(),
        t=t[keep].copy(),
        capacity=capacity,
        source_tags=np.asarray(source_tags)[keep].copy(),
    )


def build_memory(
    model,
    X: np.ndarray,
    y: np.ndarray,
    t: np.ndarray,
    capacity: int,
    selection: str = "herding",
    rng: np.random.Generator | None = None,
    source_tag: int = 0,
) -> MemorySet:
    """Represent the units with the trained model and select exemplars per arm."""
    reps = model.represent(X)
    tags = np.full(reps.shape[0], source_tag, dtype=np.int64)
    return memory_from_representations(
        reps, y, t, capacity, selection=selection, rng=rng, source_tags=tags
    )
