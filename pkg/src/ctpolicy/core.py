"""Shared data model: experimental records, randomization designs, treatment features.

Treatments are stored pre-rescaled to [0, t_max] units with t_max expressed on
the rescaled axis (the CLI divides raw treatment columns on ingest). All types
here are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

LEVEL_TOL = 1e-12


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class IdentifiabilityError(InvalidInputError):
    """Polynomial degree too high for the design: needs m >= K+1 distinct levels."""


class DivergenceError(ArithmeticError):
    """An iterative fit produced a non-finite objective."""


class SingularMatrixError(ArithmeticError):
    """A loss-Hessian matrix is numerically singular beyond the ridge."""


class PolicyDomainError(InvalidInputError):
    """A table policy was queried outside the samples/groups it was learned on."""


def substream(seed: int, *names: object) -> np.random.Generator:
    """Derive a named child generator from a root seed.

    The same (seed, names) pair always yields the same stream regardless of
    call order, so components draw independently without sharing RNG state.
    """
    tag = ":".join(str(n) for n in names).encode()
    salt = int.from_bytes(hashlib.blake2s(tag, digest_size=8).digest(), "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, salt]))


def poly_features(t: float, k: int) -> np.ndarray:
    """Treatment basis (1, t, t^2, ..., t^k)."""
    if not math.isfinite(t):
        raise InvalidInputError(f"treatment value must be finite, got {t!r}")
    if k < 0:
        raise InvalidInputError(f"polynomial degree must be >= 0, got {k}")
    return np.power(float(t), np.arange(k + 1, dtype=float))


def poly_features_batch(ts: np.ndarray, k: int) -> np.ndarray:
    """Rows of (1, t_i, ..., t_i^k) for a vector of treatments; shape (n, k+1)."""
    ts = np.asarray(ts, dtype=float)
    if not np.all(np.isfinite(ts)):
        raise InvalidInputError("treatment values must be finite")
    if k < 0:
        raise InvalidInputError(f"polynomial degree must be >= 0, got {k}")
    return np.power(ts[:, None], np.arange(k + 1, dtype=float)[None, :])


def poly_deriv_batch(ts: np.ndarray, k: int) -> np.ndarray:
    """d/dt of the treatment basis: rows (0, 1, 2t, ..., k t^{k-1})."""
    ts = np.asarray(ts, dtype=float)
    out = np.zeros((ts.shape[0], k + 1))
    if k >= 1:
        out[:, 1:] = np.arange(1, k + 1, dtype=float)[None, :] * np.power(
            ts[:, None], np.arange(k, dtype=float)[None, :]
        )
    return out


@dataclass(frozen=True)
class ValueParams:
    """Net-benefit weights: value of an action a at outcome probability p is w*p - c*a."""

    w: float = 0.5
    c: float = 0.1

    def __post_init__(self) -> None:
        for name in ("w", "c"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class Design:
    """Randomization design: the tested levels, their assignment probabilities, and the treatment cap."""

    levels: tuple[float, ...]
    probs: tuple[float, ...]
    t_max: float

    def __post_init__(self) -> None:
        if len(self.levels) < 1:
            raise InvalidInputError("design needs at least one level")
        if len(self.levels) != len(self.probs):
            raise InvalidInputError("levels and probs must have equal length")
        if not math.isfinite(self.t_max) or self.t_max <= 0:
            raise InvalidInputError(f"t_max must be finite and > 0, got {self.t_max!r}")
        lv = np.asarray(self.levels, dtype=float)
        if not np.all(np.isfinite(lv)):
            raise InvalidInputError("levels must be finite")
        if np.any(np.diff(lv) <= 0):
            raise InvalidInputError("levels must be strictly increasing")
        if lv[0] < 0 or lv[-1] > self.t_max:
            raise InvalidInputError("levels must lie in [0, t_max]")
        pr = np.asarray(self.probs, dtype=float)
        if np.any(pr <= 0):
            raise InvalidInputError("assignment probabilities must be > 0")
        if abs(pr.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"assignment probabilities must sum to 1, got {pr.sum()!r}")
        object.__setattr__(self, "levels", tuple(float(v) for v in lv))
        object.__setattr__(self, "probs", tuple(float(p) for p in pr))
        object.__setattr__(self, "t_max", float(self.t_max))

    @property
    def m(self) -> int:
        return len(self.levels)

    def level_array(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=float)

    def prob_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)

    @classmethod
    def uniform(cls, levels: Sequence[float], t_max: float | None = None) -> "Design":
        """Equal assignment probability across the given levels."""
        m = len(levels)
        if t_max is None:
            t_max = max(levels)
        return cls(tuple(levels), tuple([1.0 / m] * m), float(t_max))

    def arm_index(self, ts: np.ndarray) -> np.ndarray:
        """Map each observed treatment onto its design level, or fail.

        A value is a member if it is within LEVEL_TOL (absolute) of a level;
        levels are exact configuration constants so no looser match is allowed.
        """
        ts = np.asarray(ts, dtype=float)
        lv = self.level_array()
        idx = np.clip(np.searchsorted(lv, ts), 0, self.m - 1)
        left = np.clip(idx - 1, 0, self.m - 1)
        pick = np.where(np.abs(lv[left] - ts) < np.abs(lv[idx] - ts), left, idx)
        if np.any(np.abs(lv[pick] - ts) > LEVEL_TOL):
            bad = ts[np.abs(lv[pick] - ts) > LEVEL_TOL][0]
            raise InvalidInputError(f"treatment {bad!r} is not a design level (tol {LEVEL_TOL})")
        return pick.astype(np.intp)


@dataclass(frozen=True)
class Sample:
    """One experimental record: covariates, assigned treatment, observed outcome."""

    x: np.ndarray
    t: float
    y: float

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or not np.all(np.isfinite(x)):
            raise InvalidInputError("covariates must be a finite 1-d vector")
        if not math.isfinite(self.t):
            raise InvalidInputError("treatment must be finite")
        if not (0.0 <= self.y <= 1.0):
            raise InvalidInputError(f"outcome must lie in [0, 1], got {self.y!r}")
        object.__setattr__(self, "x", x)
        x.setflags(write=False)


@dataclass(frozen=True)
class Dataset:
    """An i.i.d. collection of samples plus the design that generated them.

    Backed by arrays (x: (n, d), t: (n,), y: (n,)) for vectorized work; arm
    indices into design.levels are resolved once at construction.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    design: Design
    arm: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        x = np.ascontiguousarray(self.x, dtype=float)
        t = np.ascontiguousarray(self.t, dtype=float)
        y = np.ascontiguousarray(self.y, dtype=float)
        if x.ndim != 2:
            raise InvalidInputError("x must be a 2-d array (n, d)")
        n = x.shape[0]
        if t.shape != (n,) or y.shape != (n,):
            raise InvalidInputError("t and y must be 1-d arrays matching x's row count")
        if n == 0:
            raise InvalidInputError("dataset must contain at least one sample")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("covariates must be finite")
        if np.any(y < 0) or np.any(y > 1):
            raise InvalidInputError("outcomes must lie in [0, 1]")
        if np.any(t < 0) or np.any(t > self.design.t_max):
            raise InvalidInputError("treatments must lie in [0, t_max]")
        arm = self.design.arm_index(t)
        for a in (x, t, y, arm):
            a.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "arm", arm)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.x[i], float(self.t[i]), float(self.y[i]))

    def samples(self) -> Iterator[Sample]:
        for i in range(self.n):
            yield self.sample(i)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[idx], self.t[idx], self.y[idx], self.design)

    def with_design(self, design: Design) -> "Dataset":
        return Dataset(self.x, self.t, self.y, design)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], design: Design) -> "Dataset":
        if not samples:
            raise InvalidInputError("dataset must contain at least one sample")
        x = np.stack([s.x for s in samples])
        t = np.array([s.t for s in samples], dtype=float)
        y = np.array([s.y for s in samples], dtype=float)
        return cls(x, t, y, design)


def split(ds: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Random disjoint partition of a dataset.

    Part sizes follow largest-remainder rounding of n*fraction, so each size is
    within one of its target. Deterministic for a given seed.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.ndim != 1 or len(fr) < 1:
        raise InvalidInputError("fractions must be a non-empty sequence")
    if np.any(fr <= 0):
        raise InvalidInputError("fractions must be positive")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise InvalidInputError(f"fractions must sum to 1, got {fr.sum()!r}")
    n = ds.n
    base = np.floor(n * fr).astype(int)
    leftover = n - base.sum()
    if leftover > 0:
        order = np.argsort(-(n * fr - base), kind="stable")
        base[order[:leftover]] += 1
    perm = substream(seed, "core", "split", n).permutation(n)
    parts: list[Dataset] = []
    start = 0
    for size in base:
        if size == 0:
            raise InvalidInputError("a split fraction resolved to zero samples")
        parts.append(ds.subset(np.sort(perm[start : start + size])))
        start += size
    return parts


def split_indices(n: int, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Index version of split, for partitioning things that are not Datasets."""
    fr = np.asarray(fractions, dtype=float)
    if np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise InvalidInputError("fractions must be positive and sum to 1")
    base = np.floor(n * fr).astype(int)
    leftover = n - base.sum()
    if leftover > 0:
        order = np.argsort(-(n * fr - base), kind="stable")
        base[order[:leftover]] += 1
    perm = substream(seed, "core", "split", n).permutation(n)
    out, start = [], 0
    for size in base:
        out.append(np.sort(perm[start : start + size]))
        start += size
    return out


GroupSpec = tuple[tuple[int, tuple[float, ...]], ...]


def group_key(x: np.ndarray, group_spec: GroupSpec) -> tuple[int, ...]:
    """Discretize selected covariate coordinates into a stable hashable key."""
    key = []
    for idx, edges in group_spec:
        if idx >= len(x):
            raise InvalidInputError(f"group coordinate {idx} out of range for d={len(x)}")
        key.append(int(np.searchsorted(np.asarray(edges, dtype=float), x[idx], side="right")))
    return tuple(key)


def group_keys(x: np.ndarray, group_spec: GroupSpec) -> list[tuple[int, ...]]:
    """Vectorized group_key over the rows of x."""
    cols = []
    for idx, edges in group_spec:
        if idx >= x.shape[1]:
            raise InvalidInputError(f"group coordinate {idx} out of range for d={x.shape[1]}")
        cols.append(np.searchsorted(np.asarray(edges, dtype=float), x[:, idx], side="right"))
    stacked = np.stack(cols, axis=1)
    return [tuple(int(v) for v in row) for row in stacked]


@dataclass(frozen=True)
class Standardizer:
    """Per-coordinate affine map fit on a training split (mean 0, sd 1)."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale < 1e-12, 1.0, scale)
        return cls(mean, scale)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_FLOAT_FMT = "%.17g"


def write_text_atomic(path: str | Path, text: str) -> None:
    """Write via temp file + rename so partial writes never survive."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_dataset_csv(ds: Dataset, path: str | Path) -> None:
    """Header x1,...,xd,t,y; one sample per row; reproducible byte-for-byte."""
    header = [f"x{i + 1}" for i in range(ds.d)] + ["t", "y"]
    lines = [",".join(header)]
    body = np.column_stack([ds.x, ds.t, ds.y])
    for row in body:
        lines.append(",".join(_FLOAT_FMT % v for v in row))
    write_text_atomic(path, "\n".join(lines) + "\n")


def load_dataset_csv(path: str | Path, design: Design, rescale_by: float | None = None) -> Dataset:
    """Read the CSV dataset format; optionally divide the t column on ingest."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3 or header[-2:] != ["t", "y"]:
            raise InvalidInputError(f"{path}: expected header x1,...,xd,t,y")
        rows = [list(map(float, row)) for row in reader if row]
    if not rows:
        raise InvalidInputError(f"{path}: no samples")
    arr = np.asarray(rows, dtype=float)
    x, t, y = arr[:, :-2], arr[:, -2], arr[:, -1]
    if rescale_by is not None:
        t = t / rescale_by
    return Dataset(x, t, y, design)


def save_design_json(design: Design, path: str | Path) -> None:
    payload = {"levels": list(design.levels), "probs": list(design.probs), "t_max": design.t_max}
    write_text_atomic(path, json.dumps(payload, indent=2) + "\n")


def load_design_json(path: str | Path, rescale_by: float | None = None) -> Design:
    with open(path) as fh:
        payload = json.load(fh)
    try:
        levels = [float(v) for v in payload["levels"]]
        probs = [float(v) for v in payload["probs"]]
        t_max = float(payload["t_max"])
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"{path}: design file needs levels/probs/t_max") from exc
    if rescale_by is not None:
        levels = [v / rescale_by for v in levels]
        t_max = t_max / rescale_by
    return Design(tuple(levels), tuple(probs), t_max)


def config_hash(obj: object) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.blake2s(blob, digest_size=8).hexdigest()
