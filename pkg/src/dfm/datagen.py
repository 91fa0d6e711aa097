"""Synthetic conditional datasets with known ground truth.

An "instrument" is a class centroid; pitch and velocity ids move the
condition mean along two fixed unit axes. Each condition is a Gaussian
(optionally split into two modes along an ambiguity axis, which is what
makes the velocity field genuinely multi-valued near the midline).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InputDomainError
from .net import ConditionSet
from .rng import Stream


class NoteSample(NamedTuple):
    x: np.ndarray
    cond: ConditionSet


@dataclass
class DatasetSpec:
    d: int = 2
    n_classes: int = 4
    n_pitches: int = 12
    n_velocities: int = 3
    sigma_data: float = 0.1
    centroid_radius: float = 2.0
    centroids: list[list[float]] | None = None
    pitch_axis: list[float] | None = None
    velocity_axis: list[float] | None = None
    ambiguity_axis: list[float] | None = None
    pitch_spacing: float = 0.1
    velocity_spacing: float = 0.2
    modes_per_condition: int = 1
    separation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or min(self.n_classes, self.n_pitches, self.n_velocities) < 1:
            raise InputDomainError("dimension and table sizes must be >= 1")
        if not self.sigma_data >= 0:
            raise InputDomainError("sigma_data must be >= 0")
        if self.modes_per_condition not in (1, 2):
            raise InputDomainError("modes_per_condition must be 1 or 2")
        if self.modes_per_condition == 2 and not self.separation > 0:
            raise InputDomainError("bimodal spec needs separation > 0")
        if self.pitch_spacing <= 0 and self.n_pitches > 1:
            raise InputDomainError("pitch offsets must be strictly increasing")
        if self.centroids is None:
            self.centroids = _ring(self.n_classes, self.d, self.centroid_radius)
        self.centroids = [[float(v) for v in c] for c in self.centroids]
        if len(self.centroids) != self.n_classes or any(len(c) != self.d for c in self.centroids):
            raise InputDomainError("centroids must be n_classes vectors of length d")
        if len({tuple(c) for c in self.centroids}) != self.n_classes:
            raise InputDomainError("centroids must be distinct")
        self.pitch_axis = _unit(self.pitch_axis, self.d, 0)
        self.velocity_axis = _unit(self.velocity_axis, self.d, 1 % self.d)
        self.ambiguity_axis = _unit(self.ambiguity_axis, self.d, 0)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputDomainError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def conditions(self) -> list[ConditionSet]:
        return [
            ConditionSet(c, p, v)
            for c in range(self.n_classes)
            for p in range(self.n_pitches)
            for v in range(self.n_velocities)
        ]

    def pitch_offset(self, pitch_id: int) -> float:
        return self.pitch_spacing * (pitch_id - (self.n_pitches - 1) / 2)

    def velocity_offset(self, velocity_id: int) -> float:
        return self.velocity_spacing * (velocity_id - (self.n_velocities - 1) / 2)

    def check_cond(self, cond) -> ConditionSet:
        cond = ConditionSet(*map(int, cond))
        bounds = (self.n_classes, self.n_pitches, self.n_velocities)
        for name, val, hi in zip(ConditionSet._fields, cond, bounds):
            if not 0 <= val < hi:
                raise InputDomainError(f"{name}={val} out of range [0, {hi})")
        return cond

    def condition_mean(self, cond) -> np.ndarray:
        c = self.check_cond(cond)
        return (
            np.asarray(self.centroids[c.class_id])
            + self.pitch_offset(c.pitch_id) * np.asarray(self.pitch_axis)
            + self.velocity_offset(c.velocity_id) * np.asarray(self.velocity_axis)
        )

    def mode_centers(self, cond) -> np.ndarray:
        """(modes, d) array of the condition's mode means."""
        m = self.condition_mean(cond)
        if self.modes_per_condition == 1:
            return m[None, :]
        shift = 0.5 * self.separation * np.asarray(self.ambiguity_axis)
        return np.stack([m + shift, m - shift])


def default_spec(seed: int = 0) -> DatasetSpec:
    return DatasetSpec(seed=seed)


def bimodal_spec(seed: int = 0) -> DatasetSpec:
    """1-D, one condition, two modes at +-1 with tight spread."""
    return DatasetSpec(
        d=1,
        n_classes=1,
        n_pitches=1,
        n_velocities=1,
        sigma_data=0.05,
        centroids=[[0.0]],
        modes_per_condition=2,
        separation=2.0,
        seed=seed,
    )


def _ring(n: int, d: int, radius: float) -> list[list[float]]:
    out = []
    for k in range(n):
        v = np.zeros(d)
        if d == 1:
            v[0] = radius * (k - (n - 1) / 2)
        else:
            ang = 2 * math.pi * k / n
            v[0], v[1] = radius * math.cos(ang), radius * math.sin(ang)
        out.append(v.tolist())
    return out


def _unit(vec, d: int, default_index: int) -> list[float]:
    if vec is None:
        v = np.zeros(d)
        v[default_index] = 1.0
    else:
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != (d,) or not np.linalg.norm(v) > 0:
            raise InputDomainError("axis must be a nonzero vector of length d")
        v = v / np.linalg.norm(v)
    return v.tolist()


def make_dataset(spec: DatasetSpec, n_per_condition: int) -> list[NoteSample]:
    """``n_per_condition`` draws for every condition, in condition order.

    Bimodal specs put the first half of each condition's points in the
    +separation/2 mode and the rest in the -separation/2 mode.
    """
    if n_per_condition < 1:
        raise InputDomainError("n_per_condition must be >= 1")
    rng = Stream(spec.seed).generator()
    out = []
    for cond in spec.conditions:
        centers = spec.mode_centers(cond)
        if spec.modes_per_condition == 2:
            n_plus = (n_per_condition + 1) // 2
            which = np.array([0] * n_plus + [1] * (n_per_condition - n_plus))
        else:
            which = np.zeros(n_per_condition, dtype=int)
        noise = rng.standard_normal((n_per_condition, spec.d)) * spec.sigma_data
        xs = centers[which] + noise
        out.extend(NoteSample(x, cond) for x in xs)
    return out


def ground_truth_sampler(spec: DatasetSpec, cond, rng: np.random.Generator) -> NoteSample:
    cond = spec.check_cond(cond)
    centers = spec.mode_centers(cond)
    k = int(rng.integers(0, len(centers))) if len(centers) > 1 else 0
    return NoteSample(centers[k] + spec.sigma_data * rng.standard_normal(spec.d), cond)


def ground_truth_batch(spec: DatasetSpec, cond, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.array([ground_truth_sampler(spec, cond, rng).x for _ in range(n)]).reshape(n, spec.d)


# ---------------------------------------------------------------------------
# CSV I/O: "# spec: {json}" header line, then x0..x{d-1},class_id,pitch_id,velocity_id


def write_samples_csv(fh, samples: Sequence[NoteSample], spec: DatasetSpec | None = None, d: int | None = None) -> None:
    if spec is not None:
        fh.write("# spec: " + json.dumps(spec.to_dict(), sort_keys=True) + "\n")
        d = spec.d
    if d is None:
        if not samples:
            raise InputDomainError("cannot infer dimension of an empty sample list")
        d = len(samples[0].x)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(d)] + list(ConditionSet._fields))
    for s in samples:
        w.writerow([repr(float(v)) for v in s.x] + [int(v) for v in s.cond])


def read_samples_csv(fh) -> tuple[list[NoteSample], DatasetSpec | None]:
    text = fh.read()
    spec = None
    lines = text.splitlines()
    if lines and lines[0].startswith("# spec: "):
        spec = DatasetSpec.from_dict(json.loads(lines[0][len("# spec: "):]))
        lines = lines[1:]
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = next(reader, None)
    if header is None:
        return [], spec
    d = len(header) - 3
    out = []
    for row in reader:
        if not row:
            continue
        x = np.array([float(v) for v in row[:d]])
        out.append(NoteSample(x, ConditionSet(*(int(v) for v in row[d:]))))
    return out, spec


def save_dataset(path: str | Path, samples: Sequence[NoteSample], spec: DatasetSpec) -> None:
    with open(path, "w", newline="") as fh:
        write_samples_csv(fh, samples, spec)


def load_dataset(path: str | Path) -> tuple[list[NoteSample], DatasetSpec | None]:
    with open(path, newline="") as fh:
        return read_samples_csv(fh)
