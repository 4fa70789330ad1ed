"""Synthetic longitudinal 3D phantom dataset with analytically known
region geometry and progression trajectories.

Each subject is a nested-ellipsoid "brain": an outer cortical shell, a
white-matter interior, and carved internal structures (central lateral
ventricles, paired CSF pockets, a thalamic block, paired hippocampi and
amygdalae). CSF is modeled as voluminous pockets rather than a thin
subarachnoid film so that it stays measurable at a 32-voxel grid.
Region volume fractions follow logistic trajectories in age, with
per-status parameters and a per-subject time warp (acceleration alpha,
shift tau), so ground truth for every visit is known in closed form and
exactly as voxel counts.

Region labels:
    0 background, 1 cerebral_cortex, 2 csf, 3 cerebral_white_matter,
    4 lateral_ventricles, 5 thalamus, 6 hippocampus, 7 amygdala
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion, gaussian_filter

from .covariates import CONDITIONED_REGIONS, STATUSES, Covariates
from .grids import VolumeGrid, save_volume

log = logging.getLogger(__name__)

LABELS = {
    "background": 0,
    "cerebral_cortex": 1,
    "csf": 2,
    "cerebral_white_matter": 3,
    "lateral_ventricles": 4,
    "thalamus": 5,
    "hippocampus": 6,
    "amygdala": 7,
}

ALL_REGIONS = tuple(n for n in LABELS if n != "background")

# Regions whose geometry is driven directly by a logistic trajectory.
# cerebral_white_matter is the interior remainder and is derived.
DRIVER_REGIONS = (
    "cerebral_cortex",
    "csf",
    "lateral_ventricles",
    "thalamus",
    "hippocampus",
    "amygdala",
)


@dataclass(frozen=True)
class Trajectory:
    """Logistic region-fraction trajectory f(t) = L / (1 + e^(-k (t - t0))).

    k > 0 grows toward the plateau L; k < 0 shrinks from L toward 0.
    Values stay strictly inside (0, L) for all finite t.
    """

    L: float
    k: float
    t0: float

    def __call__(self, age: float | np.ndarray) -> float | np.ndarray:
        return self.L / (1.0 + np.exp(-self.k * (np.asarray(age, float) - self.t0)))


def _default_trajectories() -> dict[str, dict[str, Trajectory]]:
    """Per-status logistic parameters. AD progresses fastest; thalamus is
    nearly flat so unconditioned-region evaluation has a stable target."""
    return {
        "lateral_ventricles": {
            "CN": Trajectory(0.060, 0.08, 80.0),
            "MCI": Trajectory(0.070, 0.10, 76.0),
            "AD": Trajectory(0.085, 0.13, 72.0),
        },
        "hippocampus": {
            "CN": Trajectory(0.030, -0.05, 85.0),
            "MCI": Trajectory(0.031, -0.07, 81.0),
            "AD": Trajectory(0.032, -0.09, 78.0),
        },
        "amygdala": {
            "CN": Trajectory(0.020, -0.04, 85.0),
            "MCI": Trajectory(0.021, -0.06, 80.0),
            "AD": Trajectory(0.022, -0.08, 78.0),
        },
        "cerebral_cortex": {
            "CN": Trajectory(0.30, -0.03, 90.0),
            "MCI": Trajectory(0.30, -0.04, 85.0),
            "AD": Trajectory(0.31, -0.05, 80.0),
        },
        "csf": {
            "CN": Trajectory(0.030, 0.05, 85.0),
            "MCI": Trajectory(0.034, 0.06, 82.0),
            "AD": Trajectory(0.040, 0.08, 78.0),
        },
        "thalamus": {
            "CN": Trajectory(0.024, -0.005, 80.0),
            "MCI": Trajectory(0.024, -0.005, 80.0),
            "AD": Trajectory(0.024, -0.005, 80.0),
        },
    }


@dataclass(frozen=True)
class PhantomSpec:
    grid: int = 32
    voxel_size_mm: tuple[float, float, float] = (1.5, 1.5, 1.5)
    brain_axes: tuple[float, float, float] = (13.0, 14.0, 12.0)
    # structure shape (aspect ratios) and center offsets, in voxels
    ventricle_aspect: tuple[float, float, float] = (0.75, 1.8, 1.1)
    ventricle_offset: tuple[float, float, float] = (0.0, 0.5, 0.0)
    csf_aspect: tuple[float, float, float] = (1.5, 0.8, 1.0)
    csf_offset: tuple[float, float, float] = (0.0, 9.3, 3.5)  # mirrored in j
    thalamus_aspect: tuple[float, float, float] = (1.3, 1.3, 1.0)
    thalamus_offset: tuple[float, float, float] = (0.0, 0.0, -8.0)
    hippocampus_aspect: tuple[float, float, float] = (1.0, 1.4, 1.0)
    hippocampus_offset: tuple[float, float, float] = (8.0, 3.5, -2.0)
    amygdala_aspect: tuple[float, float, float] = (1.0, 1.0, 1.0)
    amygdala_offset: tuple[float, float, float] = (8.0, -4.5, -2.0)
    # tissue intensity means
    intensity: Mapping[str, float] = field(
        default_factory=lambda: {
            "background": 0.02,
            "csf": 0.10,
            "gray": 0.50,
            "thalamus": 0.65,
            "white": 0.85,
        }
    )
    blur_sigma: float = 0.4
    noise_sigma: float = 0.01
    # subject variability
    size_sigma: float = 0.035
    alpha_sigma: float = 0.25
    alpha_bounds: tuple[float, float] = (0.5, 2.2)
    tau_sigma: float = 3.0
    tau_max: float = 8.0
    center_jitter: float = 0.8
    trajectories: Mapping[str, Mapping[str, Trajectory]] = field(
        default_factory=_default_trajectories
    )

    def trajectory(self, region: str, status: str) -> Trajectory:
        return self.trajectories[region][status]


@dataclass(frozen=True)
class SubjectGeometry:
    size: float  # global scale factor on brain axes
    alpha: float  # progression acceleration
    tau: float  # progression shift, years
    jitter: Mapping[str, tuple[float, float, float]]


@dataclass
class Visit:
    volume: VolumeGrid
    labels: np.ndarray
    covariates: Covariates
    fractions: dict[str, float]  # all 7 regions, exact voxel-count fractions
    age: float
    analytic_fractions: dict[str, float]


def _ellipsoid_mask(grid: int, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    coords = np.arange(grid, dtype=float)
    ii, jj, kk = np.meshgrid(coords, coords, coords, indexing="ij")
    q = (
        ((ii - center[0]) / axes[0]) ** 2
        + ((jj - center[1]) / axes[1]) ** 2
        + ((kk - center[2]) / axes[2]) ** 2
    )
    return q <= 1.0


def _block_mask(grid: int, center: np.ndarray, half: np.ndarray) -> np.ndarray:
    coords = np.arange(grid, dtype=float)
    ii, jj, kk = np.meshgrid(coords, coords, coords, indexing="ij")
    return (
        (np.abs(ii - center[0]) <= half[0])
        & (np.abs(jj - center[1]) <= half[1])
        & (np.abs(kk - center[2]) <= half[2])
    )


def subject_trajectory_value(
    spec: PhantomSpec, region: str, status: str, age: float, geom: SubjectGeometry
) -> float:
    """Region fraction at warped time psi(age) = alpha (age - t0 - tau) + t0."""
    tr = spec.trajectory(region, status)
    warped = geom.alpha * (age - tr.t0 - geom.tau) + tr.t0
    return float(tr(warped))


def sample_geometry(spec: PhantomSpec, rng: np.random.Generator) -> SubjectGeometry:
    size = float(np.clip(1.0 + rng.normal(0.0, spec.size_sigma), 0.88, 1.12))
    alpha = float(
        np.clip(np.exp(rng.normal(0.0, spec.alpha_sigma)), *spec.alpha_bounds)
    )
    tau = float(np.clip(rng.normal(0.0, spec.tau_sigma), -spec.tau_max, spec.tau_max))
    jitter = {
        name: tuple(rng.uniform(-spec.center_jitter, spec.center_jitter, 3))
        for name in ("lateral_ventricles", "csf", "thalamus", "hippocampus", "amygdala")
    }
    return SubjectGeometry(size=size, alpha=alpha, tau=tau, jitter=jitter)


def _analytic_brain_volume(spec: PhantomSpec, size: float) -> float:
    a, b, c = (x * size for x in spec.brain_axes)
    return 4.0 / 3.0 * math.pi * a * b * c


def rasterize_visit(
    spec: PhantomSpec,
    geom: SubjectGeometry,
    status: str,
    age: float,
    rng: np.random.Generator,
) -> tuple[VolumeGrid, np.ndarray, dict[str, float], dict[str, float], dict[str, float]]:
    """Rasterize one visit; returns (volume, labels, exact fractions,
    analytic target fractions, per-structure carve retention)."""
    grid = spec.grid
    center = np.full(3, (grid - 1) / 2.0)
    axes = np.array(spec.brain_axes) * geom.size
    v_brain = _analytic_brain_volume(spec, geom.size)

    f = {
        r: subject_trajectory_value(spec, r, status, age, geom)
        for r in DRIVER_REGIONS
    }

    labels = np.zeros((grid,) * 3, dtype=np.uint8)
    brain = _ellipsoid_mask(grid, center, axes)
    labels[brain] = LABELS["cerebral_cortex"]
    s1 = (1.0 - f["cerebral_cortex"]) ** (1.0 / 3.0)
    inner_wm = _ellipsoid_mask(grid, center, axes * s1)
    labels[inner_wm] = LABELS["cerebral_white_matter"]

    # retained fraction of each structure mask after carving; a low value
    # means the mask escaped its white-matter envelope and got clipped
    retention: dict[int, float] = {}

    def carve(mask: np.ndarray, label: int) -> None:
        inside = mask & (labels == LABELS["cerebral_white_matter"])
        labels[inside] = label
        total = int(mask.sum())
        kept = int(inside.sum()) / total if total else 1.0
        retention[label] = min(retention.get(label, 1.0), kept)

    # ventricle: single central ellipsoid sized to its target fraction
    vent_axes = _fraction_to_axes(f["lateral_ventricles"], v_brain,
                                  spec.ventricle_aspect)
    vent_center = center + np.array(spec.ventricle_offset) * geom.size \
        + np.array(geom.jitter["lateral_ventricles"])
    carve(_ellipsoid_mask(grid, vent_center, vent_axes), LABELS["lateral_ventricles"])

    # csf: paired pockets, each half the region fraction
    csf_axes = _fraction_to_axes(f["csf"] / 2.0, v_brain, spec.csf_aspect)
    for side in (+1.0, -1.0):
        off = np.array(spec.csf_offset) * geom.size
        off[1] *= side
        carve(
            _ellipsoid_mask(grid, center + off + np.array(geom.jitter["csf"]), csf_axes),
            LABELS["csf"],
        )

    # thalamus: block, near-constant size
    half = _fraction_to_block_half(f["thalamus"], v_brain, spec.thalamus_aspect)
    thal_center = center + np.array(spec.thalamus_offset) * geom.size \
        + np.array(geom.jitter["thalamus"])
    carve(_block_mask(grid, thal_center, half), LABELS["thalamus"])

    # paired structures: each half of the region fraction
    for name, aspect, offset in (
        ("hippocampus", spec.hippocampus_aspect, spec.hippocampus_offset),
        ("amygdala", spec.amygdala_aspect, spec.amygdala_offset),
    ):
        ax = _fraction_to_axes(f[name] / 2.0, v_brain, aspect)
        for side in (+1.0, -1.0):
            off = np.array(offset) * geom.size
            off[0] *= side
            carve(
                _ellipsoid_mask(grid, center + off + np.array(geom.jitter[name]), ax),
                LABELS[name],
            )

    counts = {r: int((labels == LABELS[r]).sum()) for r in ALL_REGIONS}
    brain_voxels = int((labels != 0).sum())
    fractions = {r: counts[r] / brain_voxels for r in ALL_REGIONS}

    analytic = dict(f)
    analytic["cerebral_white_matter"] = (
        s1**3 - f["csf"] - f["lateral_ventricles"] - f["thalamus"]
        - f["hippocampus"] - f["amygdala"]
    )

    # intensities
    tissue_of = {
        "background": "background",
        "cerebral_cortex": "gray",
        "csf": "csf",
        "cerebral_white_matter": "white",
        "lateral_ventricles": "csf",
        "thalamus": "thalamus",
        "hippocampus": "gray",
        "amygdala": "gray",
    }
    img = np.zeros_like(labels, dtype=np.float64)
    for name, lab in LABELS.items():
        img[labels == lab] = spec.intensity[tissue_of[name]]
    if spec.blur_sigma > 0:
        img = gaussian_filter(img, spec.blur_sigma)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    name_of = {v: k for k, v in LABELS.items()}
    retained = {name_of[lab]: kept for lab, kept in retention.items()}
    return (
        VolumeGrid(data=img, voxel_size_mm=spec.voxel_size_mm),
        labels,
        fractions,
        analytic,
        retained,
    )


def _fraction_to_axes(
    fraction: float, v_brain: float, aspect: tuple[float, float, float]
) -> np.ndarray:
    vol = fraction * v_brain
    prod = aspect[0] * aspect[1] * aspect[2]
    r = (vol / (4.0 / 3.0 * math.pi * prod)) ** (1.0 / 3.0)
    return np.array(aspect) * r


def _fraction_to_block_half(
    fraction: float, v_brain: float, aspect: tuple[float, float, float]
) -> np.ndarray:
    vol = fraction * v_brain
    prod = aspect[0] * aspect[1] * aspect[2]
    h = (vol / (8.0 * prod)) ** (1.0 / 3.0)
    return np.array(aspect) * h


def _geometry_ok(retained: dict[str, float]) -> bool:
    """Reject visits where a carved structure lost a large share of its
    mask to clipping (it overflowed the white-matter envelope)."""
    return all(kept >= 0.85 for kept in retained.values())


def generate_subject(
    spec: PhantomSpec,
    subject_seed: int,
    status: str,
    n_visits: int,
    age_range: tuple[float, float] = (62.0, 86.0),
    sex: Optional[int] = None,
    geometry: Optional[SubjectGeometry] = None,
    visit_ages: Optional[list[float]] = None,
) -> tuple[list[Visit], SubjectGeometry]:
    """Generate one subject's longitudinal visits.

    Deterministic given (spec, subject_seed, status, n_visits). Geometry
    that overflows its envelope triggers regeneration with shrunk
    variability (up to 5 attempts), logged.
    """
    if status not in STATUSES:
        raise ValueError(f"unknown status {status!r}")
    if n_visits < 2:
        raise ValueError("subjects need at least 2 visits")

    base_rng = np.random.default_rng(np.random.SeedSequence([subject_seed, 9001]))
    if sex is None:
        sex = int(base_rng.integers(0, 2))

    shrink = 1.0
    for attempt in range(5):
        rng = np.random.default_rng(np.random.SeedSequence([subject_seed, attempt]))
        local_spec = spec
        if shrink < 1.0:
            local_spec = PhantomSpec(
                **{
                    **asdict_shallow(spec),
                    "size_sigma": spec.size_sigma * shrink,
                    "center_jitter": spec.center_jitter * shrink,
                }
            )
        geom = geometry or sample_geometry(local_spec, rng)
        if visit_ages is not None:
            ages = list(visit_ages)
        else:
            start = rng.uniform(age_range[0], age_range[1] - 8.0)
            gaps = rng.uniform(1.0, 2.5, n_visits - 1)
            ages = [start] + list(start + np.cumsum(gaps))
        visits: list[Visit] = []
        ok = True
        for age in ages:
            vol, labels, fractions, analytic, retained = rasterize_visit(
                local_spec, geom, status, age, rng
            )
            if not _geometry_ok(retained):
                ok = False
                break
            cov = Covariates(
                age=age,
                sex=sex,
                status=status,
                volumes={r: fractions[r] for r in CONDITIONED_REGIONS},
            )
            visits.append(
                Visit(
                    volume=vol,
                    labels=labels,
                    covariates=cov,
                    fractions=fractions,
                    age=age,
                    analytic_fractions=analytic,
                )
            )
        if ok:
            return visits, geom
        shrink *= 0.6
        log.warning(
            "subject %d: geometry overflow, regenerating with shrink=%.2f",
            subject_seed, shrink,
        )
    raise RuntimeError(f"subject {subject_seed}: geometry overflow after 5 attempts")


def asdict_shallow(spec: PhantomSpec) -> dict:
    d = asdict(spec)
    d["trajectories"] = spec.trajectories  # keep Trajectory objects
    d["intensity"] = dict(spec.intensity)
    return d


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")
STATUS_MIX = {"CN": 0.44, "MCI": 0.26, "AD": 0.30}
SPLIT_MIX = {"train": 0.80, "val": 0.05, "test": 0.15}


@dataclass(frozen=True)
class VisitRow:
    subject: str
    age: float
    sex: int
    status: str
    split: str
    path: str
    labels_path: str
    fractions: Mapping[str, float]
    alpha: float
    tau: float

    def covariates(self) -> Covariates:
        return Covariates(
            age=self.age,
            sex=self.sex,
            status=self.status,
            volumes={r: self.fractions[r] for r in CONDITIONED_REGIONS},
        )


@dataclass
class DatasetManifest:
    rows: list[VisitRow]
    seed: int
    grid: int

    def split(self, name: str) -> list[VisitRow]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.rows if r.split == name]

    def subjects(self, split: Optional[str] = None) -> list[str]:
        rows = self.rows if split is None else self.split(split)
        seen: dict[str, None] = {}
        for r in rows:
            seen.setdefault(r.subject, None)
        return list(seen)

    def subject_rows(self, subject: str) -> list[VisitRow]:
        rows = [r for r in self.rows if r.subject == subject]
        return sorted(rows, key=lambda r: r.age)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "grid": self.grid,
            "rows": [
                {
                    "subject": r.subject,
                    "age": r.age,
                    "sex": r.sex,
                    "status": r.status,
                    "split": r.split,
                    "path": r.path,
                    "labels_path": r.labels_path,
                    "fractions": dict(r.fractions),
                    "alpha": r.alpha,
                    "tau": r.tau,
                }
                for r in self.rows
            ],
        }

    def save(self, path: str | Path) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        Path(path).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        # stored paths are relative to the manifest's directory so the
        # manifest is checksum-stable and the dataset relocatable
        base = Path(path).parent
        d = json.loads(Path(path).read_text())
        rows = [
            VisitRow(
                subject=r["subject"],
                age=float(r["age"]),
                sex=int(r["sex"]),
                status=r["status"],
                split=r["split"],
                path=str(base / r["path"]),
                labels_path=str(base / r["labels_path"]),
                fractions={k: float(v) for k, v in r["fractions"].items()},
                alpha=float(r["alpha"]),
                tau=float(r["tau"]),
            )
            for r in d["rows"]
        ]
        return DatasetManifest(rows=rows, seed=int(d["seed"]), grid=int(d["grid"]))


def _allocate(n: int, mix: Mapping[str, float], order: Iterable[str]) -> list[str]:
    """Largest-remainder allocation of n items to categories."""
    keys = list(order)
    raw = {k: n * mix[k] for k in keys}
    counts = {k: int(math.floor(raw[k])) for k in keys}
    rem = n - sum(counts.values())
    for k in sorted(keys, key=lambda k: raw[k] - counts[k], reverse=True)[:rem]:
        counts[k] += 1
    out: list[str] = []
    for k in keys:
        out += [k] * counts[k]
    return out


def make_dataset(
    spec: PhantomSpec,
    n_subjects: int,
    seed: int,
    out_dir: str | Path,
    n_visits_range: tuple[int, int] = (3, 6),
    age_range: tuple[float, float] = (62.0, 86.0),
) -> DatasetManifest:
    """Generate a full dataset: 44/26/30 status mix, 80/5/15 subject-level
    split, volumes + label masks persisted, manifest written."""
    if n_subjects < 20:
        raise ValueError(f"need at least 20 subjects, got {n_subjects}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA]))
    statuses = _allocate(n_subjects, STATUS_MIX, STATUSES)
    rng.shuffle(statuses)
    splits = _allocate(n_subjects, SPLIT_MIX, SPLITS)
    rng.shuffle(splits)

    rows: list[VisitRow] = []
    for idx in range(n_subjects):
        sid = f"S{idx:04d}"
        subject_seed = int(
            np.random.default_rng(np.random.SeedSequence([seed, idx])).integers(2**31)
        )
        n_visits = int(rng.integers(n_visits_range[0], n_visits_range[1] + 1))
        visits, geom = generate_subject(
            spec, subject_seed, statuses[idx], n_visits, age_range=age_range
        )
        for v_i, visit in enumerate(visits):
            stem = f"{sid}_v{v_i}_a{visit.age:.2f}"
            vol_path = out_dir / f"{stem}.f32"
            save_volume(visit.volume, vol_path, subject=sid, age=visit.age)
            labels_path = out_dir / f"{stem}_labels.npy"
            np.save(labels_path, visit.labels)
            rows.append(
                VisitRow(
                    subject=sid,
                    age=round(visit.age, 4),
                    sex=visit.covariates.sex,
                    status=statuses[idx],
                    split=splits[idx],
                    path=vol_path.name,  # relative to the manifest dir
                    labels_path=labels_path.name,
                    fractions={k: round(v, 8) for k, v in visit.fractions.items()},
                    alpha=round(geom.alpha, 6),
                    tau=round(geom.tau, 6),
                )
            )
    manifest = DatasetManifest(rows=rows, seed=seed, grid=spec.grid)
    manifest.save(out_dir / "manifest.json")
    # round-trip so callers get paths resolved against the manifest dir
    return DatasetManifest.load(out_dir / "manifest.json")


def boundary_voxel_count(mask: np.ndarray) -> int:
    """Voxels of the mask adjacent to its complement (6-connectivity)."""
    core = binary_erosion(mask)
    return int((mask & ~core).sum())


def build_region_templates(
    spec: PhantomSpec, dilate: int = 1
) -> dict[str, np.ndarray]:
    """Canonical (jitter-free, max-size) masks for internal structures,
    dilated for tolerance; used by intensity-based volume measurement."""
    grid = spec.grid
    center = np.full(3, (grid - 1) / 2.0)
    v_brain = _analytic_brain_volume(spec, 1.06)  # slightly oversized subject
    templates: dict[str, np.ndarray] = {}

    f_max = {
        r: max(spec.trajectory(r, s).L for s in STATUSES)
        for r in ("lateral_ventricles", "csf", "thalamus", "hippocampus", "amygdala")
    }
    vent = _ellipsoid_mask(
        grid,
        center + np.array(spec.ventricle_offset),
        _fraction_to_axes(f_max["lateral_ventricles"], v_brain, spec.ventricle_aspect),
    )
    csf = np.zeros((grid,) * 3, bool)
    csf_ax = _fraction_to_axes(f_max["csf"] / 2.0, v_brain, spec.csf_aspect)
    for side in (+1.0, -1.0):
        off = np.array(spec.csf_offset).astype(float)
        off[1] *= side
        csf |= _ellipsoid_mask(grid, center + off, csf_ax)
    thal = _block_mask(
        grid,
        center + np.array(spec.thalamus_offset),
        _fraction_to_block_half(f_max["thalamus"], v_brain, spec.thalamus_aspect),
    )
    hipp = np.zeros((grid,) * 3, bool)
    amyg = np.zeros((grid,) * 3, bool)
    for name, aspect, offset, acc in (
        ("hippocampus", spec.hippocampus_aspect, spec.hippocampus_offset, hipp),
        ("amygdala", spec.amygdala_aspect, spec.amygdala_offset, amyg),
    ):
        ax = _fraction_to_axes(f_max[name] / 2.0, v_brain, aspect)
        for side in (+1.0, -1.0):
            off = np.array(offset).astype(float)
            off[0] *= side
            acc |= _ellipsoid_mask(grid, center + off, ax)

    for name, mask in (
        ("lateral_ventricles", vent),
        ("csf", csf),
        ("thalamus", thal),
        ("hippocampus", hipp),
        ("amygdala", amyg),
    ):
        templates[name] = binary_dilation(mask, iterations=dilate)
    return templates
