"""Auxiliary models predicting target-age region volumes.

Two variants:

- LinearAuxModel: status-stratified per-region annual change rates fitted
  by least squares on within-subject visit pairs (cross-sectional use).
- DcmModel: per-region logistic trajectories v(t) = L / (1 + e^(-k (t - t0)))
  with a per-subject time warp psi(t) = alpha (t - t0 - tau) + t0 fitted
  to the subject's visit history (longitudinal use). Fixed-effects
  two-stage least squares; the pipeline only consumes point predictions.

Sign convention: k > 0 grows toward the plateau L (ventricles, CSF);
k < 0 shrinks from L toward 0, which equals L minus an increasing
logistic, so both directions share one optimizer.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from .covariates import CONDITIONED_REGIONS, STATUSES, Covariates

log = logging.getLogger(__name__)

FRACTION_FLOOR = 1e-4

ALPHA_BOUNDS = (0.2, 5.0)
TAU_BOUNDS = (-30.0, 30.0)


class AuxiliaryError(ValueError):
    pass


@dataclass(frozen=True)
class VisitRecord:
    subject: str
    age: float
    covariates: Covariates
    source: str = "train"  # train / val / test


# ---------------------------------------------------------------------------
# linear variant
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlopeFit:
    slope: float  # fraction / year
    n_pairs: int
    r_squared: float
    pooled_fallback: bool = False


@dataclass
class LinearAuxModel:
    """Per (region, status) annual change rates."""

    slopes: dict[tuple[str, str], SlopeFit]
    min_group_pairs: int = 10

    def slope(self, region: str, status: str) -> float:
        return self.slopes[(region, status)].slope

    def to_dict(self) -> dict:
        return {
            "kind": "linear",
            "min_group_pairs": self.min_group_pairs,
            "slopes": {
                f"{r}|{s}": {
                    "slope": fit.slope,
                    "n_pairs": fit.n_pairs,
                    "r_squared": fit.r_squared,
                    "pooled_fallback": fit.pooled_fallback,
                }
                for (r, s), fit in self.slopes.items()
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "LinearAuxModel":
        slopes = {}
        for key, v in d["slopes"].items():
            r, s = key.split("|")
            slopes[(r, s)] = SlopeFit(
                slope=float(v["slope"]),
                n_pairs=int(v["n_pairs"]),
                r_squared=float(v["r_squared"]),
                pooled_fallback=bool(v["pooled_fallback"]),
            )
        return LinearAuxModel(slopes=slopes, min_group_pairs=int(d["min_group_pairs"]))


def _within_subject_pairs(
    records: Sequence[VisitRecord],
) -> list[tuple[VisitRecord, VisitRecord]]:
    by_subject: dict[str, list[VisitRecord]] = {}
    for r in records:
        by_subject.setdefault(r.subject, []).append(r)
    pairs = []
    for visits in by_subject.values():
        visits = sorted(visits, key=lambda r: r.age)
        for a, b in zip(visits, visits[1:]):
            pairs.append((a, b))
    return pairs


def _fit_slope(deltas_v: np.ndarray, deltas_a: np.ndarray) -> SlopeFit:
    denom = float((deltas_a**2).sum())
    if denom == 0.0:
        raise AuxiliaryError("degenerate design: all age deltas are zero")
    slope = float((deltas_v * deltas_a).sum() / denom)
    pred = slope * deltas_a
    ss_res = float(((deltas_v - pred) ** 2).sum())
    ss_tot = float(((deltas_v - deltas_v.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(slope=slope, n_pairs=len(deltas_a), r_squared=r2)


def fit_linear(
    records: Sequence[VisitRecord], min_group_pairs: int = 10
) -> LinearAuxModel:
    """Least-squares annual change per region, stratified by cognitive
    status; groups with too few pairs fall back to the pooled slope."""
    pairs = _within_subject_pairs(records)
    if not pairs:
        raise AuxiliaryError("need within-subject visit pairs to fit the linear model")

    slopes: dict[tuple[str, str], SlopeFit] = {}
    for region in CONDITIONED_REGIONS:
        dv_all = np.array(
            [b.covariates.volumes[region] - a.covariates.volumes[region] for a, b in pairs]
        )
        da_all = np.array([b.age - a.age for a, b in pairs])
        pooled = _fit_slope(dv_all, da_all)
        for status in STATUSES:
            sel = np.array([a.covariates.status == status for a, _ in pairs])
            if int(sel.sum()) >= min_group_pairs:
                slopes[(region, status)] = _fit_slope(dv_all[sel], da_all[sel])
            else:
                slopes[(region, status)] = SlopeFit(
                    slope=pooled.slope,
                    n_pairs=int(sel.sum()),
                    r_squared=pooled.r_squared,
                    pooled_fallback=True,
                )
    return LinearAuxModel(slopes=slopes, min_group_pairs=min_group_pairs)


def predict_linear(
    model: LinearAuxModel, c_a: Covariates, age_a: float, age_b: float
) -> dict[str, float]:
    """v_B[r] = clamp(v_A[r] + slope * (age_B - age_A))."""
    if age_b < age_a:
        raise AuxiliaryError(
            f"backwards prediction unsupported: age_B={age_b} < age_A={age_a}"
        )
    horizon = age_b - age_a
    out: dict[str, float] = {}
    for region in CONDITIONED_REGIONS:
        raw = c_a.volumes[region] + model.slope(region, c_a.status) * horizon
        clamped = min(max(raw, FRACTION_FLOOR), 1.0 - FRACTION_FLOOR)
        if clamped != raw:
            log.warning(
                "linear prediction for %s clamped from %.6f to %.6f",
                region, raw, clamped,
            )
        out[region] = clamped
    return out


# ---------------------------------------------------------------------------
# logistic course-mapping variant
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticParams:
    L: float
    k: float
    t0: float

    def value(self, t: float | np.ndarray) -> float | np.ndarray:
        return self.L / (1.0 + np.exp(-self.k * (np.asarray(t, float) - self.t0)))


@dataclass(frozen=True)
class SubjectWarp:
    alpha: float
    tau: float
    converged: bool = True
    residual: float = 0.0

    def apply(self, t: float, t0: float) -> float:
        return self.alpha * (t - t0 - self.tau) + t0


IDENTITY_WARP = SubjectWarp(alpha=1.0, tau=0.0)


@dataclass
class DcmModel:
    """Population logistic parameters per region; subject warps fitted
    per call against a subject's visit history."""

    regions: dict[str, LogisticParams]
    converged: dict[str, bool]
    residuals: dict[str, float]

    def predict_region(self, region: str, warp: SubjectWarp, age: float) -> float:
        p = self.regions[region]
        return float(p.value(warp.apply(age, p.t0)))

    def to_dict(self) -> dict:
        return {
            "kind": "dcm",
            "regions": {
                r: {"L": p.L, "k": p.k, "t0": p.t0, "converged": self.converged[r],
                    "residual": self.residuals[r]}
                for r, p in self.regions.items()
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "DcmModel":
        regions, converged, residuals = {}, {}, {}
        for r, v in d["regions"].items():
            regions[r] = LogisticParams(L=float(v["L"]), k=float(v["k"]), t0=float(v["t0"]))
            converged[r] = bool(v["converged"])
            residuals[r] = float(v["residual"])
        return DcmModel(regions=regions, converged=converged, residuals=residuals)


def _fit_region_logistic(
    ages: np.ndarray, values: np.ndarray, n_starts: int = 5, max_nfev: int = 2000
) -> tuple[LogisticParams, bool, float]:
    """Multi-start bounded nonlinear least squares for one region."""
    v_max = float(values.max())
    lo = np.array([max(v_max * 1.001, 1e-4), -1.0, ages.min() - 60.0])
    hi = np.array([1.0, 1.0, ages.max() + 60.0])

    def resid(p):
        L, k, t0 = p
        return L / (1.0 + np.exp(-k * (ages - t0))) - values

    best = None
    rng = np.random.default_rng(1729)  # deterministic seed list via one stream
    starts = []
    # informed start: midpoint at median age, rate from endpoint slope
    med = float(np.median(ages))
    starts.append([min(max(2.0 * v_max, lo[0] * 1.01), 1.0), 0.05, med])
    starts.append([min(max(2.0 * v_max, lo[0] * 1.01), 1.0), -0.05, med])
    for _ in range(max(0, n_starts - 2)):
        starts.append(list(rng.uniform(lo, np.minimum(hi, lo + (hi - lo)))))
    for p0 in starts:
        p0 = np.clip(p0, lo + 1e-9, hi - 1e-9)
        try:
            sol = least_squares(resid, p0, bounds=(lo, hi), max_nfev=max_nfev)
        except Exception:
            continue
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None:
        raise AuxiliaryError("logistic fit failed from every start")
    L, k, t0 = best.x
    converged = bool(best.status > 0)
    return LogisticParams(L=float(L), k=float(k), t0=float(t0)), converged, float(best.cost)


def fit_dcm_population(records: Sequence[VisitRecord]) -> DcmModel:
    """Stage 1: per-region logistic fit over all training records with
    identity warps. Needs >= 3 distinct ages per subject for enough
    subjects to anchor curvature."""
    usable = [
        s for s, visits in _group_by_subject(records).items()
        if len({round(v.age, 6) for v in visits}) >= 3
    ]
    if len(usable) < 3:
        raise AuxiliaryError(
            "population fit needs at least 3 subjects with >= 3 distinct visit ages"
        )
    regions, converged, residuals = {}, {}, {}
    for region in CONDITIONED_REGIONS:
        ages = np.array([r.age for r in records])
        vals = np.array([r.covariates.volumes[region] for r in records])
        p, ok, cost = _fit_region_logistic(ages, vals)
        regions[region] = p
        converged[region] = ok
        residuals[region] = cost
        if not ok:
            log.warning("population logistic for %s did not converge", region)
    return DcmModel(regions=regions, converged=converged, residuals=residuals)


def _group_by_subject(records: Sequence[VisitRecord]) -> dict[str, list[VisitRecord]]:
    out: dict[str, list[VisitRecord]] = {}
    for r in records:
        out.setdefault(r.subject, []).append(r)
    return out


def fit_subject_warp(
    model: DcmModel, history: Sequence[VisitRecord], max_nfev: int = 1000
) -> SubjectWarp:
    """Stage 2: bounded least squares for (alpha, tau) over the subject's
    visits, shared across all conditioned regions."""
    if len(history) < 2:
        raise AuxiliaryError(
            "subject warp fit needs >= 2 visits; use the linear variant for "
            "single-visit subjects"
        )
    ages = np.array([r.age for r in history])
    obs = np.array(
        [[r.covariates.volumes[reg] for reg in CONDITIONED_REGIONS] for r in history]
    )

    def resid(p):
        alpha, tau = p
        cols = []
        for j, reg in enumerate(CONDITIONED_REGIONS):
            lp = model.regions[reg]
            warped = alpha * (ages - lp.t0 - tau) + lp.t0
            cols.append(lp.value(warped) - obs[:, j])
        return np.concatenate(cols)

    lo = np.array([ALPHA_BOUNDS[0], TAU_BOUNDS[0]])
    hi = np.array([ALPHA_BOUNDS[1], TAU_BOUNDS[1]])
    best = None
    for p0 in ([1.0, 0.0], [2.0, 0.0], [0.5, 0.0], [1.0, 5.0], [1.0, -5.0]):
        sol = least_squares(resid, p0, bounds=(lo, hi), max_nfev=max_nfev)
        if best is None or sol.cost < best.cost:
            best = sol
    converged = bool(best.status > 0)
    if not converged:
        log.warning("subject warp fit did not converge; returning best found")
    return SubjectWarp(
        alpha=float(best.x[0]),
        tau=float(best.x[1]),
        converged=converged,
        residual=float(best.cost),
    )


def fit_dcm(
    population_records: Sequence[VisitRecord],
    subject_history: Sequence[VisitRecord],
    population_model: Optional[DcmModel] = None,
) -> tuple[DcmModel, SubjectWarp]:
    """Two-stage fit; pass a cached population model to skip stage 1."""
    model = population_model or fit_dcm_population(population_records)
    warp = fit_subject_warp(model, subject_history)
    return model, warp


def predict_dcm(
    model: DcmModel, subject_warp: SubjectWarp, age_b: float
) -> dict[str, float]:
    """v_B[r] = logistic_r(psi(age_B)); monotone in age_B per region."""
    out = {}
    for region in CONDITIONED_REGIONS:
        v = model.predict_region(region, subject_warp, age_b)
        out[region] = min(max(v, FRACTION_FLOOR), 1.0 - FRACTION_FLOOR)
    return out


# ---------------------------------------------------------------------------
# audit serialization (human-readable)
# ---------------------------------------------------------------------------

def save_aux_model(model: LinearAuxModel | DcmModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True))


def load_aux_model(path: str | Path) -> LinearAuxModel | DcmModel:
    d = json.loads(Path(path).read_text())
    if d["kind"] == "linear":
        return LinearAuxModel.from_dict(d)
    if d["kind"] == "dcm":
        return DcmModel.from_dict(d)
    raise AuxiliaryError(f"unknown auxiliary model kind {d['kind']!r}")


def records_from_manifest(manifest, split: str) -> list[VisitRecord]:
    return [
        VisitRecord(subject=r.subject, age=r.age, covariates=r.covariates(), source=split)
        for r in manifest.split(split)
    ]
