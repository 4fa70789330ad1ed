"""Evaluation protocols, the ablation runner, and report comparison.

Two protocols: ``single_image`` predicts every later visit from the
subject's first scan; ``sequence_aware`` uses the first half of the
visits to fit the subject's progression warp and anchors on the last
scan of that half. The ablation runner evaluates four configurations
(aux/averaging on or off) on identical (subject, target-age, seed)
tuples so differences are paired.

Volumetric error is the absolute difference between region fractions
measured on the prediction and on the real follow-up scan with the same
intensity-based measurement, expressed as a percentage of brain volume;
the shared measurement bias cancels, and a perfect prediction scores
exactly zero.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .auxiliary import VisitRecord
from .covariates import CONDITIONED_REGIONS, UNCONDITIONED_REGIONS
from .grids import VolumeGrid, load_volume
from .inference import InferenceRequest, Models, TargetMetadata, infer_las
from .metrics import measure_prediction_volumes, mse, ssim3d
from .phantom import DatasetManifest, PhantomSpec, VisitRow, build_region_templates

log = logging.getLogger(__name__)

PROTOCOLS = ("single_image", "sequence_aware")

# MAE panels: regions the network is conditioned on vs held-out regions
CONDITIONED_PANEL = ("hippocampus", "amygdala", "lateral_ventricles")
UNCONDITIONED_PANEL = UNCONDITIONED_REGIONS
PANEL_REGIONS = CONDITIONED_PANEL + UNCONDITIONED_PANEL


class EvalError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "single_image"
    aux_variant: str = "linear"  # linear | dcm | none
    m: int = 4
    num_steps: int = 50
    seed: int = 0
    split: str = "test"
    label: str = ""

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise EvalError(f"unknown protocol {self.protocol!r}")

    def descriptor(self) -> dict:
        return {
            "protocol": self.protocol,
            "aux": self.aux_variant != "none",
            "aux_variant": self.aux_variant,
            "las": self.m > 1,
            "m": self.m,
            "num_steps": self.num_steps,
            "seed": self.seed,
            "split": self.split,
            "label": self.label or self._auto_label(),
        }

    def _auto_label(self) -> str:
        parts = ["base"]
        if self.m > 1:
            parts.append("las")
        if self.aux_variant != "none":
            parts.append("aux")
        return "+".join(parts)


def pair_seed(root_seed: int, subject: str, age_b: float) -> int:
    """Deterministic per-(subject, target-age) seed so every
    configuration sees identical noise draws."""
    return root_seed + zlib.crc32(f"{subject}|{age_b:.4f}".encode())


@dataclass(frozen=True)
class PairResult:
    subject: str
    age_a: float
    age_b: float
    seed: int
    mse: float
    ssim: float
    mae_pct: Mapping[str, float]  # per panel region, % of brain volume
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "age_a": self.age_a,
            "age_b": self.age_b,
            "seed": self.seed,
            "mse": self.mse,
            "ssim": self.ssim,
            "mae_pct": dict(self.mae_pct),
            "degenerate": self.degenerate,
        }


@dataclass
class EvalReport:
    config: dict
    pairs: list[PairResult]
    skipped_subjects: int = 0
    degenerate_pairs: int = 0
    notes: list[str] = field(default_factory=list)

    # ---- aggregates -------------------------------------------------

    def _valid(self) -> list[PairResult]:
        return [p for p in self.pairs if not p.degenerate]

    def mse_stats(self) -> tuple[float, float]:
        vals = [p.mse for p in self.pairs]
        return float(np.mean(vals)), float(np.std(vals))

    def ssim_stats(self) -> tuple[float, float]:
        vals = [p.ssim for p in self.pairs]
        return float(np.mean(vals)), float(np.std(vals))

    def mae_stats(self, region: str) -> tuple[float, float]:
        vals = [p.mae_pct[region] for p in self._valid()]
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(np.std(vals))

    def panel_mean(self, regions: Sequence[str] = CONDITIONED_PANEL) -> float:
        """Mean MAE over a region panel, averaged per pair first."""
        vals = [np.mean([p.mae_pct[r] for r in regions]) for p in self._valid()]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        mse_m, mse_s = self.mse_stats()
        ssim_m, ssim_s = self.ssim_stats()
        return {
            "config": self.config,
            "n_pairs": len(self.pairs),
            "skipped_subjects": self.skipped_subjects,
            "degenerate_pairs": self.degenerate_pairs,
            "notes": self.notes,
            "mse": {"mean": mse_m, "sd": mse_s},
            "ssim": {"mean": ssim_m, "sd": ssim_s},
            "mae_pct": {
                r: dict(zip(("mean", "sd"), self.mae_stats(r)))
                for r in PANEL_REGIONS
            },
            "pairs": [p.to_dict() for p in self.pairs],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def render_report(report: EvalReport) -> str:
    """Text table: image metrics plus the two MAE panels."""
    mse_m, mse_s = report.mse_stats()
    ssim_m, ssim_s = report.ssim_stats()
    lines = [
        f"configuration: {report.config['label']}  "
        f"(aux={report.config['aux_variant']}, m={report.config['m']}, "
        f"protocol={report.config['protocol']})",
        f"pairs: {len(report.pairs)}  skipped subjects: "
        f"{report.skipped_subjects}  degenerate: {report.degenerate_pairs}",
        "",
        "image-based metrics",
        f"  MSE   {mse_m:.5f} ± {mse_s:.5f}",
        f"  SSIM  {ssim_m:.4f} ± {ssim_s:.4f}",
        "",
        "MAE, % of brain volume (conditioned regions)",
    ]
    for r in CONDITIONED_PANEL:
        m, s = report.mae_stats(r)
        lines.append(f"  {r:20s} {m:.3f} ± {s:.3f}")
    lines.append("MAE, % of brain volume (unconditioned regions)")
    for r in UNCONDITIONED_PANEL:
        m, s = report.mae_stats(r)
        lines.append(f"  {r:20s} {m:.3f} ± {s:.3f}")
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# protocol execution
# ---------------------------------------------------------------------------

Predictor = Callable[[InferenceRequest], VolumeGrid]


def _protocol_split(
    rows: list[VisitRow], kind: str
) -> Optional[tuple[VisitRow, list[VisitRow], list[VisitRow]]]:
    """(anchor, history, targets) for a subject, or None if too few
    visits. single_image anchors on the first visit and predicts all
    later ones; sequence_aware reserves the first floor(n/2) visits as
    history, anchors on the last of them, predicts the rest."""
    if len(rows) < 2:
        return None
    if kind == "single_image":
        return rows[0], [rows[0]], rows[1:]
    half = len(rows) // 2
    return rows[half - 1], rows[:half], rows[half:]


def _records(rows: Sequence[VisitRow]) -> tuple[VisitRecord, ...]:
    return tuple(
        VisitRecord(subject=r.subject, age=r.age, covariates=r.covariates())
        for r in rows
    )


def default_predictor(models: Models) -> Predictor:
    return lambda req: infer_las(req, models).volume


def run_protocol(
    kind: str,
    manifest: DatasetManifest,
    models: Optional[Models],
    config: EvalConfig,
    spec: Optional[PhantomSpec] = None,
    predictor: Optional[Predictor] = None,
) -> EvalReport:
    """Evaluate one configuration over all eligible subjects of the
    split. `predictor` overrides the inference engine (used by
    fixed-point checks); otherwise `models` must be provided."""
    if kind not in PROTOCOLS:
        raise EvalError(f"unknown protocol {kind!r}")
    if predictor is None:
        if models is None:
            raise EvalError("either models or a predictor is required")
        predictor = default_predictor(models)
    spec = spec or PhantomSpec(grid=manifest.grid)
    templates = build_region_templates(spec)

    subjects = manifest.subjects(config.split)
    if not subjects:
        raise EvalError(f"split {config.split!r} is empty")

    report = EvalReport(config={**config.descriptor(), "protocol": kind}, pairs=[])
    fallback_subjects = 0
    for sid in subjects:
        rows = manifest.subject_rows(sid)
        parts = _protocol_split(rows, kind)
        if parts is None:
            report.skipped_subjects += 1
            continue
        anchor, history, targets = parts

        aux_variant = config.aux_variant
        if aux_variant == "dcm" and len(history) < 2:
            aux_variant = "linear"
            fallback_subjects += 1

        source_volume = load_volume(anchor.path)
        for target in targets:
            seed = pair_seed(config.seed, sid, target.age)
            req = InferenceRequest(
                source_volume=source_volume,
                source_covariates=anchor.covariates(),
                target=TargetMetadata(
                    age=target.age, sex=target.sex, status=target.status
                ),
                aux_variant=aux_variant,
                subject_history=_records(history),
                m=config.m,
                seed=seed,
                num_steps=config.num_steps,
            )
            pred = predictor(req)
            truth = load_volume(target.path)
            measured = measure_prediction_volumes(pred, spec, templates)
            ref = measure_prediction_volumes(truth, spec, templates)
            degenerate = measured.degenerate or ref.degenerate
            if degenerate:
                report.degenerate_pairs += 1
                mae = {r: float("nan") for r in PANEL_REGIONS}
            else:
                mae = {
                    r: 100.0 * abs(measured.fractions[r] - ref.fractions[r])
                    for r in PANEL_REGIONS
                }
            report.pairs.append(
                PairResult(
                    subject=sid,
                    age_a=anchor.age,
                    age_b=target.age,
                    seed=seed,
                    mse=mse(pred, truth),
                    ssim=ssim3d(pred, truth),
                    mae_pct=mae,
                    degenerate=degenerate,
                )
            )
    if fallback_subjects:
        report.notes.append(
            f"{fallback_subjects} subject(s) had too few visits for the "
            "progression-warp fit; linear auxiliary used instead"
        )
    if report.skipped_subjects:
        report.notes.append(
            f"{report.skipped_subjects} subject(s) skipped (fewer than 2 visits)"
        )
    if not report.pairs:
        raise EvalError("no evaluable prediction pairs in the split")
    return report


# ---------------------------------------------------------------------------
# comparison and ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Comparison:
    label_a: str
    label_b: str
    n: int
    delta_mae: float  # mean conditioned-panel MAE, a - b
    p_mae: float
    delta_mse: float
    p_mse: float

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def compare_reports(a: EvalReport, b: EvalReport) -> Comparison:
    """Paired t-tests on per-pair conditioned-panel MAE and MSE; the
    reports must cover identical (subject, target-age, seed) tuples."""
    key = lambda p: (p.subject, p.age_b, p.seed)
    if [key(p) for p in a.pairs] != [key(p) for p in b.pairs]:
        raise EvalError("reports are not paired: (subject, age, seed) tuples differ")
    keep = [
        (pa, pb)
        for pa, pb in zip(a.pairs, b.pairs)
        if not (pa.degenerate or pb.degenerate)
    ]
    if len(keep) < 2:
        raise EvalError("too few valid pairs for a paired test")
    mae_a = np.array([np.mean([p.mae_pct[r] for r in CONDITIONED_PANEL]) for p, _ in keep])
    mae_b = np.array([np.mean([p.mae_pct[r] for r in CONDITIONED_PANEL]) for _, p in keep])
    mse_a = np.array([p.mse for p, _ in keep])
    mse_b = np.array([p.mse for _, p in keep])
    t_mae = stats.ttest_rel(mae_a, mae_b)
    t_mse = stats.ttest_rel(mse_a, mse_b)
    return Comparison(
        label_a=a.config["label"],
        label_b=b.config["label"],
        n=len(keep),
        delta_mae=float(np.mean(mae_a - mae_b)),
        p_mae=float(t_mae.pvalue),
        delta_mse=float(np.mean(mse_a - mse_b)),
        p_mse=float(t_mse.pvalue),
    )


ABLATION_CONFIGS = ("base", "base+aux", "base+las", "base+las+aux")


def run_ablation(
    manifest: DatasetManifest,
    models: Models,
    config: EvalConfig,
    predictor_factory: Optional[Callable[[EvalConfig], Predictor]] = None,
) -> dict[str, EvalReport]:
    """Four paired configurations: averaging (m) and the auxiliary
    volume predictor toggled independently. All four see the same
    (subject, target-age, seed) tuples."""
    if config.aux_variant == "none":
        raise EvalError("ablation needs an auxiliary variant to toggle")
    variants = {
        "base": {"aux_variant": "none", "m": 1},
        "base+aux": {"aux_variant": config.aux_variant, "m": 1},
        "base+las": {"aux_variant": "none", "m": config.m},
        "base+las+aux": {"aux_variant": config.aux_variant, "m": config.m},
    }
    reports: dict[str, EvalReport] = {}
    for label, overrides in variants.items():
        cfg = EvalConfig(
            protocol=config.protocol,
            num_steps=config.num_steps,
            seed=config.seed,
            split=config.split,
            label=label,
            **overrides,
        )
        predictor = predictor_factory(cfg) if predictor_factory else None
        log.info("ablation: evaluating %s", label)
        reports[label] = run_protocol(
            config.protocol, manifest, models, cfg, predictor=predictor
        )
    return reports


def render_ablation(reports: Mapping[str, EvalReport]) -> str:
    lines = [
        f"{'configuration':16s} {'MSE':>16s} {'SSIM':>16s} "
        f"{'cond. MAE %':>12s} {'uncond. MAE %':>14s}"
    ]
    for label in ABLATION_CONFIGS:
        r = reports[label]
        mse_m, mse_s = r.mse_stats()
        ssim_m, ssim_s = r.ssim_stats()
        lines.append(
            f"{label:16s} {mse_m:8.5f}±{mse_s:.5f} {ssim_m:8.4f}±{ssim_s:.4f} "
            f"{r.panel_mean(CONDITIONED_PANEL):12.3f} "
            f"{r.panel_mean(UNCONDITIONED_PANEL):14.3f}"
        )
    base, full = reports["base"], reports["base+las+aux"]
    cmp_ = compare_reports(full, base)
    lines.append(
        f"full vs base: ΔMAE {cmp_.delta_mae:+.3f} (p={cmp_.p_mae:.4f}), "
        f"ΔMSE {cmp_.delta_mse:+.5f} (p={cmp_.p_mse:.4f}), n={cmp_.n}"
    )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# optional slice montage (input | prediction | truth | signed difference)
# ---------------------------------------------------------------------------

def _write_gray_png(path: Path, img: np.ndarray) -> None:
    """Minimal 8-bit grayscale PNG writer (no imaging dependency)."""
    h, w = img.shape
    raw = b"".join(b"\x00" + img[y].astype(np.uint8).tobytes() for y in range(h))

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + tag + data
            + struct.pack(">I", zlib.crc32(tag + data))
        )

    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    path.write_bytes(
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw))
        + chunk(b"IEND", b"")
    )


def save_montage(
    path: str | Path,
    source: VolumeGrid,
    prediction: VolumeGrid,
    truth: VolumeGrid,
    axis: int = 2,
) -> None:
    """Central-slice panel row; the fourth panel is the signed
    prediction-minus-truth difference remapped to [0, 1] around gray."""
    idx = source.shape[axis] // 2
    take = lambda v: np.take(v.data, idx, axis=axis)
    diff = 0.5 + 0.5 * np.clip(take(prediction) - take(truth), -1, 1)
    panels = [take(source), take(prediction), take(truth), diff]
    sep = np.ones((panels[0].shape[0], 2))
    strip = np.hstack([p for pair in zip(panels, [sep] * 4) for p in pair][:-1])
    _write_gray_png(Path(path), np.clip(strip, 0, 1) * 255)
