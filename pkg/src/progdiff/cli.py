"""Command-line surface for the progression-prediction pipeline.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 validation
failure. Failures print a machine-readable JSON error line to stderr.
Every artifact-producing command writes a run-record JSON (resolved
options, config hash, root seed, version stamp, wall time, artifacts)
next to its outputs. Options may come from a YAML config file
(``--config``); explicit flags win over file values.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import click
import yaml

from . import __version__
from .autoencoder import (
    AEConfig,
    load_autoencoder,
    save_autoencoder,
    train_autoencoder,
)
from .auxiliary import (
    VisitRecord,
    fit_dcm_population,
    fit_linear,
    load_aux_model,
    records_from_manifest,
    save_aux_model,
)
from .checkpoints import CheckpointError, config_hash
from .controlnet import (
    ControlNetConfig,
    build_visit_pairs,
    load_controlnet,
    save_controlnet,
    train_controlnet,
)
from .denoiser import LDMConfig, load_denoiser, save_denoiser, train_ldm
from .evaluate import (
    EvalConfig,
    compare_reports,
    render_ablation,
    render_report,
    run_ablation,
    run_protocol,
    save_montage,
)
from .grids import load_volume, save_volume
from .inference import InferenceRequest, Models, TargetMetadata, infer_las
from .phantom import DatasetManifest, PhantomSpec, make_dataset

log = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3

# bad inputs detectable up front vs failures mid-compute
_VALIDATION_ERRORS = (ValueError, FileNotFoundError, CheckpointError)


def _fail(exc: Exception, category: str, code: int) -> None:
    click.echo(
        json.dumps({"error": str(exc), "category": category}), err=True
    )
    sys.exit(code)


def _git_stamp() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_run_record(
    out_dir: Path, command: str, options: dict, seed: int, artifacts: list[str],
    t_start: float,
) -> None:
    record = {
        "command": command,
        "options": options,
        "config_hash": config_hash(options),
        "root_seed": seed,
        "version": __version__,
        "git": _git_stamp(),
        "wall_time_s": round(time.monotonic() - t_start, 3),
        "artifacts": artifacts,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{command}.run.json").write_text(json.dumps(record, indent=2))


def _apply_config_file(ctx: click.Context, options: dict) -> dict:
    """Merge a YAML config file under explicit flags: file values fill
    in options the user left at their defaults."""
    path = options.pop("config", None)
    if path is None:
        return options
    try:
        loaded = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ValueError(f"config file {path} is not valid YAML: {exc}") from exc
    if loaded is None:
        return options
    if not isinstance(loaded, dict):
        raise ValueError(f"config file {path} must be a mapping")
    unknown = set(loaded) - set(options)
    if unknown:
        raise ValueError(
            f"unknown config keys {sorted(unknown)}; valid: {sorted(options)}"
        )
    src = click.core.ParameterSource
    for key, value in loaded.items():
        if ctx.get_parameter_source(key) in (src.DEFAULT, src.DEFAULT_MAP):
            options[key] = value
    return options


def command_wrapper(fn):
    """Config merge, error-category mapping, and run-record timing."""

    @click.option("--config", type=click.Path(exists=True), default=None,
                  help="YAML file with option defaults; flags override.")
    @click.pass_context
    @functools.wraps(fn)
    def wrapped(ctx, *args, **kwargs):
        t0 = time.monotonic()
        try:
            options = _apply_config_file(ctx, dict(kwargs))
            fn(t0, **options)
        except _VALIDATION_ERRORS as exc:
            _fail(exc, "validation", EXIT_VALIDATION)
        except Exception as exc:  # noqa: BLE001 - CLI boundary
            _fail(exc, "runtime", EXIT_RUNTIME)

    return wrapped


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable info logging.")
def main(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


# ---------------------------------------------------------------------------
# data and training commands
# ---------------------------------------------------------------------------

@main.command("gen-data")
@click.option("--subjects", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--grid", type=int, default=32, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@command_wrapper
def gen_data(t0, subjects, seed, grid, out) -> None:
    """Generate a synthetic longitudinal dataset and its manifest."""
    spec = PhantomSpec(grid=grid)
    make_dataset(spec, subjects, seed, out)
    manifest_path = Path(out) / "manifest.json"
    checksum = hashlib.sha256(manifest_path.read_bytes()).hexdigest()
    click.echo(f"manifest {manifest_path} checksum {checksum}")
    _write_run_record(
        Path(out), "gen-data",
        {"subjects": subjects, "seed": seed, "grid": grid, "out": str(out)},
        seed, [str(Path(out) / "manifest.json")], t0,
    )


@main.command("train-ae")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--epochs", type=int, default=AEConfig.epochs, show_default=True)
@click.option("--lr", type=float, default=AEConfig.lr, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@command_wrapper
def train_ae(t0, manifest_path, epochs, lr, seed, out) -> None:
    """Train the volume autoencoder on the train split."""
    manifest = DatasetManifest.load(manifest_path)
    config = AEConfig(image_size=manifest.grid, epochs=epochs, lr=lr, seed=seed)
    params = train_autoencoder(manifest, config)
    save_autoencoder(params, out)
    click.echo(f"autoencoder saved to {out} (hash {params.hash()[:12]})")
    _write_run_record(
        Path(out).parent, "train-ae",
        {"manifest_path": manifest_path, "epochs": epochs, "lr": lr,
         "seed": seed, "out": str(out)},
        seed, [str(out)], t0,
    )


@main.command("train-ldm")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--ae", "ae_path", type=click.Path(exists=True), required=True)
@click.option("--steps", type=int, default=LDMConfig.steps, show_default=True)
@click.option("--lr", type=float, default=LDMConfig.lr, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@command_wrapper
def train_ldm_cmd(t0, manifest_path, ae_path, steps, lr, seed, out) -> None:
    """Train the covariate-conditioned latent denoiser."""
    manifest = DatasetManifest.load(manifest_path)
    autoencoder = load_autoencoder(ae_path)
    config = LDMConfig(steps=steps, lr=lr, seed=seed)
    params = train_ldm(manifest, autoencoder, config)
    save_denoiser(params, out)
    click.echo(f"denoiser saved to {out} (hash {params.hash()[:12]})")
    _write_run_record(
        Path(out).parent, "train-ldm",
        {"manifest_path": manifest_path, "ae_path": ae_path, "steps": steps,
         "lr": lr, "seed": seed, "out": str(out)},
        seed, [str(out)], t0,
    )


@main.command("train-controlnet")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--ae", "ae_path", type=click.Path(exists=True), required=True)
@click.option("--ldm", "ldm_path", type=click.Path(exists=True), required=True)
@click.option("--steps", type=int, default=ControlNetConfig.steps, show_default=True)
@click.option("--lr", type=float, default=ControlNetConfig.lr, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
@command_wrapper
def train_controlnet_cmd(
    t0, manifest_path, ae_path, ldm_path, steps, lr, seed, out
) -> None:
    """Train the source-scan control branch against a frozen denoiser."""
    manifest = DatasetManifest.load(manifest_path)
    autoencoder = load_autoencoder(ae_path)
    theta = load_denoiser(ldm_path)
    pairs = build_visit_pairs(manifest, "train", autoencoder)
    val_pairs = build_visit_pairs(manifest, "val", autoencoder)
    config = ControlNetConfig(steps=steps, lr=lr, seed=seed)
    params = train_controlnet(pairs, theta, config, val_pairs or None)
    save_controlnet(params, out)
    click.echo(f"control branch saved to {out} (hash {params.hash()[:12]})")
    _write_run_record(
        Path(out).parent, "train-controlnet",
        {"manifest_path": manifest_path, "ae_path": ae_path,
         "ldm_path": ldm_path, "steps": steps, "lr": lr, "seed": seed,
         "out": str(out)},
        seed, [str(out)], t0,
    )


@main.command("fit-aux")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--variant", type=click.Choice(["linear", "dcm"]), default="linear",
              show_default=True)
@click.option("--out", type=click.Path(), required=True)
@command_wrapper
def fit_aux(t0, manifest_path, variant, out) -> None:
    """Fit an auxiliary volume-progression model on the train split."""
    manifest = DatasetManifest.load(manifest_path)
    records = records_from_manifest(manifest, "train")
    model = fit_linear(records) if variant == "linear" else fit_dcm_population(records)
    save_aux_model(model, out)
    click.echo(f"{variant} auxiliary model saved to {out}")
    _write_run_record(
        Path(out).parent, "fit-aux",
        {"manifest_path": manifest_path, "variant": variant, "out": str(out)},
        0, [str(out)], t0,
    )


# ---------------------------------------------------------------------------
# inference and evaluation commands
# ---------------------------------------------------------------------------

def _load_models(ae_path, ldm_path, cn_path, aux_path) -> Models:
    autoencoder = load_autoencoder(ae_path)
    denoiser = load_denoiser(ldm_path)
    controlnet = load_controlnet(cn_path, denoiser)
    models = Models(
        autoencoder=autoencoder, denoiser=denoiser, controlnet=controlnet
    )
    if aux_path is not None:
        aux = load_aux_model(aux_path)
        if aux.__class__.__name__ == "DcmModel":
            models.aux_dcm = aux
        else:
            models.aux_linear = aux
    models.check_consistent()
    return models


_MODEL_OPTIONS = [
    click.option("--ae", "ae_path", type=click.Path(exists=True), required=True),
    click.option("--ldm", "ldm_path", type=click.Path(exists=True), required=True),
    click.option("--controlnet", "cn_path", type=click.Path(exists=True), required=True),
    click.option("--aux", "aux_path", type=click.Path(exists=True), default=None),
]


def model_options(fn):
    for opt in reversed(_MODEL_OPTIONS):
        fn = opt(fn)
    return fn


@main.command("predict")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@model_options
@click.option("--subject", required=True)
@click.option("--target-age", type=float, required=True)
@click.option("--aux-variant", type=click.Choice(["linear", "dcm", "none"]),
              default="linear", show_default=True)
@click.option("--m", type=int, default=4, show_default=True,
              help="Latent replicates averaged before decoding.")
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--montage", is_flag=True, help="Also write a slice montage PNG.")
@click.option("--out", type=click.Path(), required=True)
@command_wrapper
def predict(
    t0, manifest_path, ae_path, ldm_path, cn_path, aux_path, subject,
    target_age, aux_variant, m, steps, seed, montage, out
) -> None:
    """Predict a subject's scan at a later age from their first visit."""
    manifest = DatasetManifest.load(manifest_path)
    rows = manifest.subject_rows(subject)
    if not rows:
        raise ValueError(f"subject {subject!r} not in manifest")
    anchor = rows[0]
    models = _load_models(ae_path, ldm_path, cn_path, aux_path)
    req = InferenceRequest(
        source_volume=load_volume(anchor.path),
        source_covariates=anchor.covariates(),
        target=TargetMetadata(age=target_age, sex=anchor.sex, status=anchor.status),
        aux_variant=aux_variant,
        subject_history=tuple(
            VisitRecord(subject=r.subject, age=r.age, covariates=r.covariates())
            for r in rows
        ),
        m=m,
        seed=seed,
        num_steps=steps,
    )
    result = infer_las(req, models)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    vol_path = out_dir / f"{subject}_a{target_age:.2f}.f32"
    save_volume(result.volume, vol_path, subject=subject, age=target_age)
    summary = {
        "subject": subject,
        "source_age": anchor.age,
        "target_age": target_age,
        "seeds": result.seeds,
        "predicted_volumes": result.v_hat,
        "volume_path": str(vol_path),
    }
    (out_dir / f"{subject}_a{target_age:.2f}.json").write_text(
        json.dumps(summary, indent=2)
    )
    artifacts = [str(vol_path)]
    if montage:
        # no ground truth at predict time: the last panel shows the
        # predicted change relative to the source scan
        png = out_dir / f"{subject}_a{target_age:.2f}.png"
        save_montage(png, req.source_volume, result.volume, req.source_volume)
        artifacts.append(str(png))
    click.echo(f"prediction written to {vol_path}")
    _write_run_record(
        out_dir, "predict",
        {"manifest_path": manifest_path, "subject": subject,
         "target_age": target_age, "aux_variant": aux_variant, "m": m,
         "steps": steps, "seed": seed, "out": str(out)},
        seed, artifacts, t0,
    )


@main.command("evaluate")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@model_options
@click.option("--protocol", type=click.Choice(["single_image", "sequence_aware"]),
              default="single_image", show_default=True)
@click.option("--aux-variant", type=click.Choice(["linear", "dcm", "none"]),
              default="linear", show_default=True)
@click.option("--m", type=int, default=4, show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", type=click.Path(), required=True)
@command_wrapper
def evaluate_cmd(
    t0, manifest_path, ae_path, ldm_path, cn_path, aux_path, protocol,
    aux_variant, m, steps, seed, split, out
) -> None:
    """Run one evaluation protocol over the chosen split."""
    manifest = DatasetManifest.load(manifest_path)
    models = _load_models(ae_path, ldm_path, cn_path, aux_path)
    config = EvalConfig(
        protocol=protocol, aux_variant=aux_variant, m=m, num_steps=steps,
        seed=seed, split=split,
    )
    report = run_protocol(protocol, manifest, models, config)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / f"report_{protocol}.json"
    report.save(report_path)
    click.echo(render_report(report))
    _write_run_record(
        out_dir, "evaluate",
        {"manifest_path": manifest_path, "protocol": protocol,
         "aux_variant": aux_variant, "m": m, "steps": steps, "seed": seed,
         "split": split, "out": str(out)},
        seed, [str(report_path)], t0,
    )


@main.command("ablate")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@model_options
@click.option("--aux-variant", type=click.Choice(["linear", "dcm"]),
              default="linear", show_default=True)
@click.option("--m", type=int, default=4, show_default=True)
@click.option("--steps", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", type=click.Path(), required=True)
@command_wrapper
def ablate(
    t0, manifest_path, ae_path, ldm_path, cn_path, aux_path, aux_variant,
    m, steps, seed, split, out
) -> None:
    """Evaluate the four paired configurations and their comparisons."""
    manifest = DatasetManifest.load(manifest_path)
    models = _load_models(ae_path, ldm_path, cn_path, aux_path)
    config = EvalConfig(
        aux_variant=aux_variant, m=m, num_steps=steps, seed=seed, split=split,
    )
    reports = run_ablation(manifest, models, config)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for label, report in reports.items():
        path = out_dir / f"report_{label.replace('+', '_')}.json"
        report.save(path)
        artifacts.append(str(path))
    comparisons = [
        compare_reports(reports[a], reports[b]).to_dict()
        for a, b in (
            ("base+las+aux", "base"),
            ("base+aux", "base"),
            ("base+las", "base"),
            ("base+las+aux", "base+aux"),
        )
    ]
    cmp_path = out_dir / "comparisons.json"
    cmp_path.write_text(json.dumps(comparisons, indent=2))
    artifacts.append(str(cmp_path))
    click.echo(render_ablation(reports))
    _write_run_record(
        out_dir, "ablate",
        {"manifest_path": manifest_path, "aux_variant": aux_variant, "m": m,
         "steps": steps, "seed": seed, "split": split, "out": str(out)},
        seed, artifacts, t0,
    )


if __name__ == "__main__":
    main()
