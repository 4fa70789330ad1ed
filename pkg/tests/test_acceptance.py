"""Acceptance gate: ten system-level criteria, one test each.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured
quantity before asserting, so a transcript of this module reads as a
checklist. The trained model stack comes from the cached pipeline
fixture (tests/_pipeline.py); math-level criteria run against analytic
oracles and need no training.
"""

import math

import numpy as np
import pytest
import torch

from progdiff.autoencoder import decode, encode
from progdiff.auxiliary import (
    SubjectWarp,
    fit_dcm_population,
    fit_linear,
    fit_subject_warp,
    predict_linear,
)
from progdiff.controlnet import ControlNetConfig, init_controlnet
from progdiff.covariates import CONDITIONED_REGIONS
from progdiff.diffusion import (
    ddpm_step,
    forward_diffuse,
    make_schedule,
    posterior_params,
    sample,
)
from progdiff.evaluate import (
    CONDITIONED_PANEL,
    EvalConfig,
    PANEL_REGIONS,
    _protocol_split,
    compare_reports,
    render_ablation,
    run_ablation,
    run_protocol,
)
from progdiff.grids import load_volume
from progdiff.inference import (
    InferenceRequest,
    TargetMetadata,
    infer_las,
    infer_once,
    infer_trajectory,
)
from progdiff.metrics import measure_prediction_volumes, mse, ssim3d
from progdiff.phantom import build_region_templates

from test_auxiliary import TRUE_CURVES, TRUE_SLOPES, dcm_records, linear_records
from test_diffusion import _quadrature_posterior, gaussian_oracle_denoiser
from test_evaluate import fake_rows, truth_predictor

# measurement noise floor of the intensity-based volume measurement,
# documented in test_metrics (raw-phantom self-consistency)
MEASUREMENT_FLOOR = 0.004
NUM_STEPS = 50


def check(criterion: int, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# shared heavy artifacts
# ---------------------------------------------------------------------------

def _first_visit_request(rows, **kw):
    anchor = rows[0]
    args = dict(
        source_volume=load_volume(anchor.path),
        source_covariates=anchor.covariates(),
        target=TargetMetadata(age=rows[1].age, sex=anchor.sex, status=anchor.status),
        aux_variant="linear",
        m=1,
        seed=0,
        num_steps=NUM_STEPS,
    )
    args.update(kw)
    return InferenceRequest(**args)


@pytest.fixture(scope="module")
def ablation_reports(pipeline):
    cfg = EvalConfig(
        protocol="single_image", aux_variant="linear", m=4,
        num_steps=NUM_STEPS, seed=0, split="test",
    )
    return run_ablation(pipeline.manifest, pipeline.models, cfg)


@pytest.fixture(scope="module")
def trajectories(pipeline):
    """Five-target trajectories for every test subject, anchored on the
    first visit; returns (subject rows, auxiliary targets, measured
    ventricle fractions) triples."""
    templates = build_region_templates(pipeline.spec)
    out = []
    for sid in pipeline.manifest.subjects("test"):
        rows = pipeline.manifest.subject_rows(sid)
        req = _first_visit_request(rows, m=8, seed=11)
        ages = [rows[0].age + dt for dt in (2.0, 4.0, 6.0, 8.0, 10.0)]
        results = infer_trajectory(req, ages, pipeline.models)
        measured = [
            measure_prediction_volumes(r.volume, pipeline.spec, templates)
            for r in results
        ]
        out.append((rows, results, measured))
    return out


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_criterion_01_diffusion_math_suite():
    worst = 0.0
    for kind in ("linear", "scaled_linear"):
        sched = make_schedule(kind, 1000, 1e-4, 0.02)
        prod = 1.0
        for t in range(1, 1001):
            prod *= sched.alpha(t)
            worst = max(worst, abs(prod - sched.alpha_bar(t)))
    sched = make_schedule("scaled_linear", 1000, 1e-4, 0.02)

    # forward-marginal Monte Carlo moments at t = 400
    gen = torch.Generator().manual_seed(0)
    z0 = torch.full((10_000,), 0.8)
    eps = torch.randn(z0.shape, generator=gen)
    z_t = forward_diffuse(z0, 400, eps, sched)
    a_bar = sched.alpha_bar(400)
    mean_err = abs(float(z_t.mean()) - math.sqrt(a_bar) * 0.8) / (
        math.sqrt(a_bar) * 0.8
    )
    std_err = abs(float(z_t.std()) - math.sqrt(1 - a_bar)) / math.sqrt(1 - a_bar)

    # posterior vs quadrature-Bayes oracle
    post_err = 0.0
    for t in (2, 10, 400):
        z0v, ztv = 0.7, -0.3
        mean, var = posterior_params(torch.tensor(z0v), torch.tensor(ztv), t, sched)
        qm, qv = _quadrature_posterior(ztv, t, z0v, sched)
        post_err = max(post_err, abs(float(mean) - qm), abs(var - qv))

    # oracle chain inversion: exact eps, mean-only reverse from t = 400
    gen = torch.Generator().manual_seed(1)
    z0_vec = torch.randn(64, generator=gen)
    z = forward_diffuse(z0_vec, 400, torch.randn(64, generator=gen), sched)
    for t in range(400, 0, -1):
        a_bar = sched.alpha_bar(t)
        eps_hat = (z - math.sqrt(a_bar) * z0_vec) / math.sqrt(1 - a_bar)
        z = ddpm_step(z, t, eps_hat, torch.zeros(64), sched, clamp=None)
    rmse = float(((z - z0_vec) ** 2).mean().sqrt())

    ok = worst < 1e-12 and mean_err < 0.05 and std_err < 0.05 and post_err < 1e-4 and rmse < 1e-3
    check(
        1, ok,
        f"product identity {worst:.1e}, marginal moments "
        f"({mean_err:.3f}, {std_err:.3f}), posterior vs quadrature "
        f"{post_err:.1e}, chain-inversion RMSE {rmse:.1e}",
    )


def test_criterion_02_analytic_gaussian_sampling():
    sched = make_schedule("scaled_linear", 1000, 1e-4, 0.02)
    mu, sigma = 0.3, 0.6
    fn = gaussian_oracle_denoiser(mu, sigma**2, sched)
    z = sample(fn, (5000,), sched, rng_seed=0, num_steps=None)
    mean_err = abs(float(z.mean()) - mu) / abs(mu)
    std_err = abs(float(z.std()) - sigma) / sigma
    ok = mean_err < 0.05 and std_err < 0.05
    check(
        2, ok,
        f"N({mu}, {sigma}^2) recovered with mean error {mean_err:.1%}, "
        f"std error {std_err:.1%} over 5000 samples",
    )


def test_criterion_03_autoencoder_gate(pipeline):
    ae = pipeline.models.autoencoder
    scores = []
    for row in pipeline.manifest.split("test"):
        x = load_volume(row.path)
        recon = decode(encode(x, ae), ae)
        scores.append(ssim3d(x, recon))
    mean_ssim = float(np.mean(scores))
    check(
        3, mean_ssim >= 0.90,
        f"test-split reconstruction SSIM {mean_ssim:.4f} over "
        f"{len(scores)} volumes (gate 0.90)",
    )


def test_criterion_04_control_zero_init_and_frozen_denoiser(pipeline):
    theta = pipeline.models.denoiser
    phi_trained = pipeline.models.controlnet

    # theta hash immutability: the trained branch still references the
    # exact parameter content of the denoiser it was trained against
    hash_ok = phi_trained.theta_hash == theta.hash()

    # bitwise identity of the unified forward with fresh zero couplings
    fresh = init_controlnet(theta, ControlNetConfig())
    gen = torch.Generator().manual_seed(0)
    z = torch.randn(2, 3, 8, 8, 8, generator=gen)
    src = torch.randn(2, 3, 8, 8, 8, generator=gen)
    tok = torch.rand(2, 10, 1, generator=gen)
    t = torch.full((2,), 500.0)
    with torch.no_grad():
        control = fresh.branch(z, t, tok, src)
        controlled = theta.unet(z, t, tok, control=control)
        plain = theta.unet(z, t, tok)
    identity_ok = torch.equal(controlled, plain)

    check(
        4, hash_ok and identity_ok,
        f"zero-init bitwise identity {identity_ok}, frozen-denoiser hash "
        f"match after training {hash_ok}",
    )


def test_criterion_05_subject_identity(pipeline):
    models = pipeline.models
    manifest = pipeline.manifest
    subjects = manifest.subjects("test")
    rng = np.random.default_rng(0)
    wins = total = 0
    for sid in subjects:
        rows = manifest.subject_rows(sid)
        for target in rows[1:]:
            req = _first_visit_request(
                rows, m=4,
                target=TargetMetadata(age=target.age, sex=target.sex, status=target.status),
            )
            pred = infer_las(req, models).volume
            own = mse(pred, load_volume(target.path))
            other_sid = rng.choice([s for s in subjects if s != sid])
            other_rows = manifest.subject_rows(other_sid)
            other = mse(pred, load_volume(other_rows[-1].path))
            wins += own < other
            total += 1
    frac = wins / total
    check(
        5, frac >= 0.80,
        f"prediction closer to own follow-up than to another subject's "
        f"in {wins}/{total} test pairs ({frac:.0%}, gate 80%)",
    )


def test_criterion_06_auxiliary_recovery():
    linear = fit_linear(linear_records(), min_group_pairs=5)
    slope_err = max(
        abs(linear.slope(r, "AD") - TRUE_SLOPES[r]) for r in CONDITIONED_REGIONS
    )
    c = linear_records(1, 1)[0].covariates
    zero_horizon = max(
        abs(predict_linear(linear, c, c.age, c.age)[r] - c.volumes[r])
        for r in CONDITIONED_REGIONS
    )
    population = fit_dcm_population(dcm_records())
    pop_err = max(
        max(
            abs(population.regions[r].L / TRUE_CURVES[r].L - 1),
            abs(population.regions[r].k / TRUE_CURVES[r].k - 1),
            abs(population.regions[r].t0 / TRUE_CURVES[r].t0 - 1),
        )
        for r in CONDITIONED_REGIONS
    )
    warp = fit_subject_warp(
        population, dcm_records(1, 4, warp=SubjectWarp(alpha=1.8, tau=-4.0), prefix="w")
    )
    alpha_err = abs(warp.alpha / 1.8 - 1)
    ok = (
        slope_err < 1e-9 and zero_horizon < 1e-12
        and pop_err < 0.01 and alpha_err < 0.05
    )
    check(
        6, ok,
        f"linear slope error {slope_err:.1e}, zero-horizon drift "
        f"{zero_horizon:.1e}, logistic population error {pop_err:.2%}, "
        f"warp alpha error {alpha_err:.2%}",
    )


def test_criterion_07_latent_averaging(pipeline):
    models = pipeline.models
    rows = pipeline.manifest.subject_rows(pipeline.manifest.subjects("test")[0])

    # exact m=1 equivalence
    req = _first_visit_request(rows, m=1, seed=21)
    las = infer_las(req, models)
    single = infer_once(req, models, seed=21)
    m1_exact = torch.equal(las.latent_mean, single)

    # 1/sqrt(m) dispersion of the averaged latent, m in {1, 4, 16}:
    # 192 independent replicates regrouped into means of size m. Latent
    # coordinates are strongly correlated across a reverse chain, so the
    # variance estimate is averaged over several random regroupings to
    # approach the information limit of the replicate pool.
    n_reps = 192
    reps = torch.stack(
        [infer_once(req, models, seed=1000 + i, v_hat=las.v_hat) for i in range(n_reps)]
    )
    flat = reps.reshape(n_reps, -1).numpy()
    rng = np.random.default_rng(0)

    def dispersion(m: int) -> float:
        s2 = []
        for _ in range(8):
            perm = rng.permutation(n_reps)
            groups = flat[perm].reshape(n_reps // m, m, -1).mean(axis=1)
            s2.append(groups.var(axis=0, ddof=1).mean())
        return float(np.sqrt(np.mean(s2)))

    d1 = dispersion(1)
    errs = {
        m: abs(dispersion(m) / d1 * math.sqrt(m) - 1.0) for m in (4, 16)
    }
    ok = m1_exact and all(e < 0.20 for e in errs.values())
    check(
        7, ok,
        f"m=1 equivalence exact {m1_exact}; dispersion-scaling deviation "
        f"from 1/sqrt(m): m=4 {errs[4]:.1%}, m=16 {errs[16]:.1%} (gate 20%)",
    )


def test_criterion_08_ablation_direction(ablation_reports):
    print(render_ablation(ablation_reports))
    mae = {k: r.panel_mean(CONDITIONED_PANEL) for k, r in ablation_reports.items()}
    order_ok = (
        mae["base+las+aux"] <= mae["base+aux"] <= mae["base"]
        and mae["base+las"] <= mae["base"]
    )
    cmp_full = compare_reports(ablation_reports["base+las+aux"], ablation_reports["base"])
    sig_ok = cmp_full.delta_mae < 0 and cmp_full.p_mae < 0.05
    check(
        8, order_ok and sig_ok,
        "conditioned-region MAE (% brain volume): "
        + ", ".join(f"{k} {v:.3f}" for k, v in mae.items())
        + f"; full vs base delta {cmp_full.delta_mae:+.3f}, p={cmp_full.p_mae:.2g}",
    )


def test_criterion_09_protocol_arithmetic_and_fixed_point(pipeline):
    anchor, history, targets = _protocol_split(fake_rows(2), "single_image")
    arith_ok = len(targets) == 1 and anchor.age == 70.0
    rows5 = fake_rows(5)
    anchor, history, targets = _protocol_split(rows5, "sequence_aware")
    arith_ok &= history == rows5[:2] and anchor is rows5[1] and len(targets) == 3

    cfg = EvalConfig(aux_variant="none", m=1, seed=0)
    report = run_protocol(
        "single_image", pipeline.manifest, None, cfg,
        predictor=truth_predictor(pipeline.manifest, "test"),
    )
    mse_m, _ = report.mse_stats()
    ssim_m, _ = report.ssim_stats()
    mae_max = max(p.mae_pct[r] for p in report.pairs for r in PANEL_REGIONS)
    fixed_ok = mse_m == 0.0 and abs(ssim_m - 1.0) < 1e-9 and mae_max == 0.0
    check(
        9, arith_ok and fixed_ok,
        f"protocol visit bookkeeping {arith_ok}; perfect-predictor report "
        f"(MSE, SSIM, max MAE) = ({mse_m}, {ssim_m:.6f}, {mae_max})",
    )


def test_criterion_10_trajectory_monotonicity(pipeline, trajectories):
    aux_vals, measured_vals = [], []
    violations = []
    for rows, results, measured in trajectories:
        series = [m.fractions["lateral_ventricles"] for m in measured]
        for r, m in zip(results, measured):
            if not m.degenerate:
                aux_vals.append(r.v_hat["lateral_ventricles"])
                measured_vals.append(m.fractions["lateral_ventricles"])
        if rows[0].status == "AD":
            drops = [max(a - b - MEASUREMENT_FLOOR, 0) for a, b in zip(series, series[1:])]
            if max(drops) > 0:
                violations.append((rows[0].subject, max(drops)))
    r = float(np.corrcoef(aux_vals, measured_vals)[0, 1])
    ok = not violations and r >= 0.8
    check(
        10, ok,
        f"AD trajectories monotone within floor {MEASUREMENT_FLOOR} "
        f"(violations: {violations or 'none'}); Pearson r between "
        f"auxiliary and measured ventricle fractions {r:.3f} over "
        f"{len(measured_vals)} trajectory points (gate 0.8)",
    )
