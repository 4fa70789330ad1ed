"""Image and volumetric metrics for comparing predicted and real volumes.

Volume measurement on generated images uses nearest-tissue-intensity
classification restricted to canonical region templates, standing in for
a segmentation tool the phantoms don't need. Its accuracy against ground
truth defines the measurement noise floor used as tolerance by
downstream checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from scipy.ndimage import binary_erosion, uniform_filter

from .grids import VolumeGrid
from .phantom import ALL_REGIONS, LABELS, PhantomSpec, build_region_templates


class MetricError(ValueError):
    pass


def mse(x: VolumeGrid, y: VolumeGrid) -> float:
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    d = x.data.astype(np.float64) - y.data.astype(np.float64)
    return float((d * d).mean())


def ssim3d(
    x: VolumeGrid,
    y: VolumeGrid,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    dynamic_range: float = 1.0,
) -> float:
    """Mean local structural similarity with a cubic sliding window."""
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if window > min(x.shape):
        raise MetricError(
            f"window {window} exceeds smallest volume dim {min(x.shape)}"
        )
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    a = x.data.astype(np.float64)
    b = y.data.astype(np.float64)

    mu_a = uniform_filter(a, window)
    mu_b = uniform_filter(b, window)
    var_a = uniform_filter(a * a, window) - mu_a**2
    var_b = uniform_filter(b * b, window) - mu_b**2
    cov = uniform_filter(a * b, window) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def region_fractions(labels: np.ndarray) -> dict[str, float]:
    """Region voxel counts over total brain voxels from a label grid."""
    present = set(np.unique(labels).tolist())
    known = set(LABELS.values())
    unknown = present - known
    if unknown:
        raise MetricError(f"unknown labels in grid: {sorted(unknown)}")
    brain = int((labels != LABELS["background"]).sum())
    if brain == 0:
        raise MetricError("label grid contains no brain voxels")
    return {
        r: int((labels == LABELS[r]).sum()) / brain
        for r in ALL_REGIONS
    }


# ---------------------------------------------------------------------------
# intensity-based measurement of generated volumes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasuredVolumes:
    fractions: Mapping[str, float]
    degenerate: bool


_TISSUES = ("background", "csf", "gray", "thalamus", "white")


def measure_prediction_volumes(
    x: VolumeGrid,
    spec: PhantomSpec,
    templates: Optional[dict[str, np.ndarray]] = None,
) -> MeasuredVolumes:
    """Per-region fractions by nearest-tissue-intensity classification
    inside canonical region templates."""
    if templates is None:
        templates = build_region_templates(spec)
    means = np.array([spec.intensity[t] for t in _TISSUES])
    img = x.data.astype(np.float64)
    tissue = np.abs(img[..., None] - means).argmin(axis=-1)
    bg, csf_c, gray_c, thal_c, white_c = range(5)

    vent_t = templates["lateral_ventricles"]
    csf_t = templates["csf"]
    thal_t = templates["thalamus"]
    hipp_t = templates["hippocampus"]
    amyg_t = templates["amygdala"]

    # the blurred brain surface reads as fluid; fluid only occurs inside
    # the ventricle/pocket templates, so stray fluid voxels are surface
    stray_fluid = (tissue == csf_c) & ~vent_t & ~csf_t
    brain = (tissue != bg) & ~stray_fluid
    n_brain = int(brain.sum())
    if n_brain < 0.01 * img.size:
        return MeasuredVolumes(fractions={r: 0.0 for r in ALL_REGIONS}, degenerate=True)

    # keep gray structures separate from the 1-2 voxel cortical shell
    # their templates can graze near the surface
    interior = binary_erosion(tissue != bg, iterations=2)
    hipp = (tissue == gray_c) & hipp_t & interior
    amyg = (tissue == gray_c) & amyg_t & interior
    counts = {
        "lateral_ventricles": int(((tissue == csf_c) & vent_t & ~csf_t).sum()),
        "csf": int(((tissue == csf_c) & csf_t & ~vent_t).sum()),
        "thalamus": int(((tissue == thal_c) & thal_t).sum()),
        "hippocampus": int(hipp.sum()),
        "amygdala": int(amyg.sum()),
        "cerebral_cortex": int(((tissue == gray_c) & ~hipp & ~amyg).sum()),
        "cerebral_white_matter": int((tissue == white_c).sum()),
    }
    fractions = {r: counts[r] / n_brain for r in ALL_REGIONS}
    return MeasuredVolumes(fractions=fractions, degenerate=False)


def measurement_noise_floor(
    spec: PhantomSpec,
    volumes: list[VolumeGrid],
    true_fractions: list[Mapping[str, float]],
    templates: Optional[dict[str, np.ndarray]] = None,
) -> dict[str, float]:
    """Per-region MAE of the intensity-based measurement applied to raw
    phantoms with known ground truth; the documented tolerance for
    monotonicity and consistency checks."""
    if templates is None:
        templates = build_region_templates(spec)
    errs: dict[str, list[float]] = {r: [] for r in ALL_REGIONS}
    for vol, truth in zip(volumes, true_fractions):
        measured = measure_prediction_volumes(vol, spec, templates)
        if measured.degenerate:
            continue
        for r in ALL_REGIONS:
            errs[r].append(abs(measured.fractions[r] - truth[r]))
    return {r: float(np.mean(v)) if v else float("nan") for r, v in errs.items()}
