"""Subject covariates c = <s, v> and their context-token encoding.

``s`` is subject metadata (age, sex, cognitive status); ``v`` holds the
five progression-related region volumes as fractions of total brain
volume. CSF and thalamus are deliberately absent from ``v`` so they can
serve as unconditioned regions at evaluation time.

The token layout is one token per scalar covariate, in a fixed order:

    [age, sex, is_cn, is_mci, is_ad,
     hippocampus, cerebral_cortex, amygdala,
     cerebral_white_matter, lateral_ventricles]

Age and region volumes are min-max normalized against ranges computed on
the training split; out-of-range values are clamped (test subjects may
exceed training ranges) and the clamped names recorded on the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import torch

STATUSES = ("CN", "MCI", "AD")

CONDITIONED_REGIONS = (
    "hippocampus",
    "cerebral_cortex",
    "amygdala",
    "cerebral_white_matter",
    "lateral_ventricles",
)

UNCONDITIONED_REGIONS = ("thalamus", "csf")

TOKEN_NAMES = (
    "age",
    "sex",
    "is_cn",
    "is_mci",
    "is_ad",
) + CONDITIONED_REGIONS

NUM_TOKENS = len(TOKEN_NAMES)

AGE_MIN_VALID = 40.0
AGE_MAX_VALID = 110.0


class CovariateError(ValueError):
    """Covariates violating their invariants."""


@dataclass(frozen=True)
class Covariates:
    """c = <s, v>: subject metadata plus conditioned region fractions."""

    age: float
    sex: int  # 0 or 1
    status: str  # one of CN / MCI / AD
    volumes: Mapping[str, float]  # conditioned regions -> brain fraction

    def __post_init__(self):
        if not AGE_MIN_VALID <= self.age <= AGE_MAX_VALID:
            raise CovariateError(
                f"age {self.age} outside [{AGE_MIN_VALID}, {AGE_MAX_VALID}]"
            )
        if self.sex not in (0, 1):
            raise CovariateError(f"sex must be 0 or 1, got {self.sex!r}")
        if self.status not in STATUSES:
            raise CovariateError(f"status must be one of {STATUSES}, got {self.status!r}")
        got = set(self.volumes)
        want = set(CONDITIONED_REGIONS)
        if got != want:
            raise CovariateError(
                f"volumes must cover exactly the conditioned regions; "
                f"missing={sorted(want - got)}, extra={sorted(got - want)}"
            )
        for name, frac in self.volumes.items():
            if not 0.0 < frac < 1.0:
                raise CovariateError(f"volume fraction {name}={frac} outside (0, 1)")

    def with_volumes(self, volumes: Mapping[str, float]) -> "Covariates":
        return Covariates(self.age, self.sex, self.status, dict(volumes))

    def with_age(self, age: float) -> "Covariates":
        return Covariates(age, self.sex, self.status, dict(self.volumes))

    def to_dict(self) -> dict:
        return {
            "age": self.age,
            "sex": self.sex,
            "status": self.status,
            "volumes": dict(self.volumes),
        }

    @staticmethod
    def from_dict(d: Mapping) -> "Covariates":
        return Covariates(
            age=float(d["age"]),
            sex=int(d["sex"]),
            status=str(d["status"]),
            volumes={k: float(v) for k, v in d["volumes"].items()},
        )


@dataclass(frozen=True)
class NormalizationSpec:
    """Min/max ranges for age and each conditioned region volume,
    computed on the training split only."""

    age_min: float
    age_max: float
    volume_min: Mapping[str, float]
    volume_max: Mapping[str, float]

    @staticmethod
    def from_covariates(records: list[Covariates]) -> "NormalizationSpec":
        if not records:
            raise CovariateError("cannot build normalization from empty record list")
        ages = [c.age for c in records]
        vmin, vmax = {}, {}
        for r in CONDITIONED_REGIONS:
            vals = [c.volumes[r] for c in records]
            vmin[r], vmax[r] = min(vals), max(vals)
        return NormalizationSpec(min(ages), max(ages), vmin, vmax)

    def to_dict(self) -> dict:
        return {
            "age_min": self.age_min,
            "age_max": self.age_max,
            "volume_min": dict(self.volume_min),
            "volume_max": dict(self.volume_max),
        }

    @staticmethod
    def from_dict(d: Mapping) -> "NormalizationSpec":
        return NormalizationSpec(
            age_min=float(d["age_min"]),
            age_max=float(d["age_max"]),
            volume_min={k: float(v) for k, v in d["volume_min"].items()},
            volume_max={k: float(v) for k, v in d["volume_max"].items()},
        )


@dataclass(frozen=True)
class ContextVector:
    """Ordered context tokens for cross-attention.

    ``data`` has shape (NUM_TOKENS, 1): one scalar token per covariate.
    The network owns the learned projection to attention width.
    ``clamped`` lists covariates that fell outside the normalization
    range and were clamped.
    """

    data: torch.Tensor
    clamped: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if tuple(self.data.shape) != (NUM_TOKENS, 1):
            raise CovariateError(
                f"context data must have shape ({NUM_TOKENS}, 1), "
                f"got {tuple(self.data.shape)}"
            )
        if not torch.isfinite(self.data).all():
            raise CovariateError("context tokens contain non-finite values")


def _minmax(value: float, lo: float, hi: float) -> tuple[float, bool]:
    if hi <= lo:
        # degenerate training range: feature carries no information
        return 0.0, False
    x = (value - lo) / (hi - lo)
    if x < 0.0 or x > 1.0:
        return min(max(x, 0.0), 1.0), True
    return x, False


def encode_covariates(c: Covariates, norm: NormalizationSpec) -> ContextVector:
    """Deterministically assemble the normalized token sequence."""
    clamped: list[str] = []
    age, hit = _minmax(c.age, norm.age_min, norm.age_max)
    if hit:
        clamped.append("age")
    values = [age, float(c.sex)]
    values += [1.0 if c.status == s else 0.0 for s in STATUSES]
    for r in CONDITIONED_REGIONS:
        v, hit = _minmax(c.volumes[r], norm.volume_min[r], norm.volume_max[r])
        if hit:
            clamped.append(r)
        values.append(v)
    data = torch.tensor(values, dtype=torch.float32).unsqueeze(1)
    return ContextVector(data=data, clamped=tuple(clamped))
