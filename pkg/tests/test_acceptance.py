"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before
asserting. Criteria 6, 7 and 9 run real optimizations and are marked slow;
they are still part of the default run.
"""

import math
import time
from dataclasses import replace

import mpmath
import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE, SMALL_GRID, SMALL_MLP, small_field, toy_scene
from layerwise.config import RegWeights, TermWeights, TrainConfig
from layerwise.deform import DeformationField, DeformedField, ScaledField, density_mass, train_transfer
from layerwise.errors import ProtocolError, TrainingError
from layerwise.field import init_field
from layerwise.guidance import RemoteProvider, SyntheticProvider
from layerwise.losses import reg_loss
from layerwise.render import (
    _evaluate,
    assign_layers,
    compose_render,
    max_density_profile,
    partition,
    render_image,
    sample_rays,
    transmittance,
    volume_render,
)
from layerwise.scene import AABB, orbit_camera, sample_camera
from layerwise.toy import AnalyticField, Ball, ShellBand, shell_field, sphere_field
from layerwise.train import (
    OptimizerState,
    adam_step,
    grad_check,
    gradcheck_closure,
    parameter_hash,
    train_body,
    train_cloth,
)
from mock_server import MockResidualServer
from test_render import brute_force_compose, random_rays


def record(number, title, passed, detail):
    ACCEPTANCE[number] = (bool(passed), title, detail)
    assert passed, f"criterion {number} ({title}): {detail}"


def psnr(a, b):
    return 10.0 * math.log10(1.0 / float(np.mean((a - b) ** 2)))


def iou(a, b):
    return float((a & b).sum()) / max(float((a | b).sum()), 1.0)


def analytic_provider(stack, mode="composed", n_samples=256):
    """Synthetic guidance whose reference is a float64 render of analytic fields for the same view."""
    def reference(view):
        with torch.no_grad():
            return render_image(stack, view.camera, mode, layer=len(stack) - 1, background=view.background,
                                n_samples=n_samples, window=view.window, dtype=torch.float64).color
    return SyntheticProvider(reference)


# --------------------------------------------------------------------------
# 1-5: renderer and loss properties

def term_by_term(sigma, color, delta):
    """C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i with T_i = exp(-sum_{j<i} sigma_j delta_j), at 50 digits."""
    with mpmath.workdps(50):
        acc = [mpmath.mpf(0)] * 3
        optical = mpmath.mpf(0)
        for s, c, d in zip(sigma, color, delta):
            tau = mpmath.mpf(float(s)) * mpmath.mpf(float(d))
            w = mpmath.exp(-optical) * (1 - mpmath.exp(-tau))
            for k in range(3):
                acc[k] += w * mpmath.mpf(float(c[k]))
            optical += tau
        return [float(v) for v in acc]


def test_criterion_1_render_oracle():
    rng = np.random.default_rng(101)
    field = small_field(seed=11, spread=1.0)
    with torch.no_grad():
        field.mlp.density_head.bias.add_(5.0)  # lift density so rays are far from empty
    o, d = random_rays(rng, 100)
    s = sample_rays(o, d, 16, dtype=torch.float64)
    t0 = time.perf_counter()
    with torch.no_grad():
        color, _ = volume_render(field, s)
    elapsed = time.perf_counter() - t0
    sigma, col = (x.detach().numpy() for x in _evaluate(field, s))
    deltas = s.deltas.numpy()
    oracle = np.array([term_by_term(sigma[r], col[r], deltas[r]) for r in range(100)])
    err = float(np.abs(color.numpy() - oracle).max())
    assert float(sigma.max()) > 1.0
    record(1, "rendering oracle", err < 1e-6 and elapsed < 1.0, f"max abs err {err:.2e}, {elapsed:.3f}s")


def random_two_layer_scene(rng, k):
    r_body = rng.uniform(0.2, 0.5)
    body = sphere_field(r_body, density=rng.uniform(2.0, 60.0))
    if k % 2:
        cloth = small_field(AABB((-0.7,) * 3, (0.7,) * 3), seed=k, spread=1.0)
    else:
        r_in = r_body + rng.uniform(0.0, 0.1)
        leak = (r_body, rng.uniform(1.0, 60.0), (1.0, 0.9, 0.0)) if rng.uniform() < 0.5 else None
        cloth = shell_field(r_in, r_in + rng.uniform(0.05, 0.2), -rng.uniform(0.1, 0.6), rng.uniform(0.1, 0.6),
                            density=rng.uniform(2.0, 60.0), leak=leak)
    return [body, cloth]


def test_criterion_2_two_layer_reduction():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    mismatched, worst = 0, 0.0
    for k in range(100):
        stack = random_two_layer_scene(rng, k)
        o, d = random_rays(rng, 6)
        s = sample_rays(o, d, 24, dtype=torch.float64)
        with torch.no_grad():
            owner = assign_layers(stack, s)
            kk = partition(transmittance(max_density_profile(stack[:1], s), s.deltas), 0.5)
            split = (torch.arange(24)[None] >= kk[:, None]).long()
            # samples before the split belong to the outer layer, the rest to the body
            mismatched += int((owner != 1 - split).sum())
            c, a = compose_render(stack, [0, 1], s)
            rc, ra = brute_force_compose(stack, s, 0.5)
        worst = max(worst, float(np.abs(c.numpy() - rc).max()), float(np.abs(a.numpy() - ra).max()))
    elapsed = time.perf_counter() - t0
    record(2, "two-layer reduction", mismatched == 0 and worst < 1e-6 and elapsed < 5.0,
           f"{mismatched} assignment mismatches, brute-force err {worst:.2e}, {elapsed:.2f}s")


def leaking_shell_scene():
    body = sphere_field(0.45, density=20.0, color=(0.2, 0.3, 0.9))
    # garment band plus density wrongly filling the body's interior
    cloth = AnalyticField([(ShellBand(0.5, 0.62, -0.25, 0.25), 4.0, (0.9, 0.1, 0.1)),
                           (Ball(0.45), 30.0, (1.0, 0.9, 0.0))], AABB((-0.67,) * 3, (0.67,) * 3))
    return body, cloth


def test_criterion_3_penetration_ablation():
    t0 = time.perf_counter()
    body, cloth = leaking_shell_scene()
    stratified, baseline, n_rays = [], [], 0
    for az, el in ((30.0, 10.0), (150.0, -5.0), (260.0, 30.0)):
        o, d = orbit_camera(az, el, 2.5, (32, 32), 50.0).pixel_rays()
        s = sample_rays(o, d, 128, dtype=torch.float64)
        with torch.no_grad():
            sb, cb = _evaluate(body, s)
            sc, cc = _evaluate(cloth, s)
            # interior segment: behind the point where the body's own transparency drops to th
            interior = transmittance(sb, s.deltas) <= 0.5
            rays = interior.any(-1)
            outer = assign_layers([body, cloth], s) == 1
            sig = torch.where(outer, sc, sb)
            w = transmittance(sig, s.deltas) * (1 - torch.exp(-sig * s.deltas))
            col = torch.where(outer[..., None], cc, cb)
            stratified.append(((w * outer * interior)[..., None] * col).sum(1).amax(-1)[rays])
            wins = sc > sb  # max-density fusion; ties go to the body
            sig_m = torch.maximum(sb, sc)
            w_m = transmittance(sig_m, s.deltas) * (1 - torch.exp(-sig_m * s.deltas))
            col_m = torch.where(wins[..., None], cc, cb)
            baseline.append(((w_m * wins * interior)[..., None] * col_m).sum(1).amax(-1)[rays])
            n_rays += int(rays.sum())
    stratified, baseline = torch.cat(stratified), torch.cat(baseline)
    leak_max = float(stratified.max())
    frac = float((baseline > 0.1).double().mean())
    elapsed = time.perf_counter() - t0
    record(3, "penetration ablation", leak_max == 0.0 and frac >= 0.9 and elapsed < 10.0,
           f"stratified interior leak {leak_max:.1e}, baseline leaks > 0.1 on {100 * frac:.1f}% "
           f"of {n_rays} interior rays, {elapsed:.2f}s")


def test_criterion_4_gradient_exactness():
    t0 = time.perf_counter()
    closure, params = gradcheck_closure(seed=0, res=4, n_samples=8)
    report = grad_check(closure, params, sample_fraction=0.0, min_samples=200, seed=0)
    elapsed = time.perf_counter() - t0
    assert all(p.dtype == torch.float64 for p in params.values())
    record(4, "gradient exactness", report.n_checked >= 200 and report.max_rel_err < 1e-3 and elapsed < 60.0,
           f"{report.n_checked} parameters, max rel err {report.max_rel_err:.2e}, {elapsed:.1f}s")


def optimize_free_mask(init, weights, steps=200):
    params = {"mask": torch.as_tensor(init.copy())}
    state = OptimizerState()
    means = [float(params["mask"].mean())]
    for _ in range(steps):
        _, grad = reg_loss(params["mask"], weights)
        adam_step(params, {"mask": grad}, state)
        with torch.no_grad():
            params["mask"].clamp_(0.0, 1.0)
        means.append(float(params["mask"].mean()))
    return params["mask"].numpy(), np.array(means)


def test_criterion_5_regularization():
    t0 = time.perf_counter()
    init = np.random.default_rng(505).uniform(size=(32, 32))
    mask, means = optimize_free_mask(init, RegWeights())
    _, means_no_l1 = optimize_free_mask(init, RegWeights(lambda2=0.0))
    binary = float(((mask <= 0.1) | (mask >= 0.9)).mean())
    # the L1 term must push the mean strictly below the entropy-only run at every step
    gap = means[1:] - means_no_l1[1:]
    lower = bool((gap < 0).all()) and means[-1] < means[0]
    elapsed = time.perf_counter() - t0
    record(5, "regularization behavior", binary >= 0.95 and lower and elapsed < 5.0,
           f"{100 * binary:.1f}% pixels binary, mean {means[0]:.4f} -> {means[-1]:.4f} "
           f"(entropy only {means_no_l1[-1]:.4f}), {elapsed:.2f}s")


# --------------------------------------------------------------------------
# 6-9: toy optimizations

BODY_SCENE = toy_scene()
BODY_CONFIG = TrainConfig(iterations=500, resolution_schedule=((500, 64),), n_samples=64)


@pytest.fixture(scope="module")
def body_runs():
    sphere = sphere_field()
    provider = analytic_provider([sphere])
    runs = []
    for _ in range(2):
        t0 = time.perf_counter()
        field, _ = train_body(BODY_SCENE, BODY_CONFIG, provider)
        runs.append((field, time.perf_counter() - t0))
    return sphere, runs


@pytest.mark.slow
def test_criterion_6_body_stage(body_runs):
    sphere, ((field, elapsed), (again, _)) = body_runs
    rng = np.random.default_rng(123)
    scores = []
    for _ in range(8):
        cam = sample_camera(BODY_SCENE.camera_dist, (64, 64), rng)
        with torch.no_grad():
            a = render_image([field], cam, background=1.0, n_samples=64).color.double().numpy()
            b = render_image([sphere], cam, background=1.0, n_samples=256, dtype=torch.float64).color.numpy()
        scores.append(psnr(a, b))
    same = parameter_hash(field) == parameter_hash(again)
    record(6, "toy body stage", min(scores) >= 25.0 and same and elapsed < 15 * 60,
           f"held-out PSNR min {min(scores):.2f} / mean {np.mean(scores):.2f} dB, "
           f"reproducible={same}, {elapsed / 60:.1f} min per run")


CLOTH_BODY = sphere_field()
# a garment shaded like the body it covers: composed views alone cannot tell
# where the garment ends and the body begins
CLOTH_TARGET = shell_field(color="shaded")
CLOTH_SCENE = toy_scene(garments=[("band", "a band", CLOTH_TARGET.aabb.min, CLOTH_TARGET.aabb.max)])
CLOTH_CONFIG = TrainConfig(iterations=300, resolution_schedule=((300, 64),), n_samples=64)


def cloth_silhouette_iou(cloth, n_views=8):
    rng = np.random.default_rng(123)
    scores = []
    for _ in range(n_views):
        cam = sample_camera(CLOTH_SCENE.camera_dist, (64, 64), rng)
        with torch.no_grad():
            a = render_image([CLOTH_BODY, cloth], cam, "cloth-only", layer=1, n_samples=64).mask.numpy() > 0.5
            b = render_image([CLOTH_BODY, CLOTH_TARGET], cam, "cloth-only", layer=1, n_samples=256,
                             dtype=torch.float64).mask.numpy() > 0.5
        scores.append(iou(a, b))
    return float(np.mean(scores))


@pytest.mark.slow
def test_criterion_7_dual_cloth_loss():
    stack = [CLOTH_BODY, CLOTH_TARGET]
    providers = (analytic_provider(stack, "composed"), analytic_provider(stack, "cloth-only"))
    t0 = time.perf_counter()
    dual, _ = train_cloth(CLOTH_SCENE, [CLOTH_BODY], "band", CLOTH_CONFIG, providers)
    single_config = replace(CLOTH_CONFIG, terms=TermWeights(sds_cloth=0.0, reg_cloth=0.0))
    single, _ = train_cloth(CLOTH_SCENE, [CLOTH_BODY], "band", single_config, providers)
    elapsed = time.perf_counter() - t0
    iou_dual, iou_single = cloth_silhouette_iou(dual), cloth_silhouette_iou(single)
    record(7, "dual cloth loss", iou_dual >= 0.8 and iou_dual > iou_single and elapsed < 20 * 60,
           f"cloth-only IoU {iou_dual:.3f} (composed-only ablation {iou_single:.3f}), {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_progressive_freeze(body_runs):
    _, ((body, _), _) = body_runs
    scene = toy_scene(garments=[("jeans", "jeans", (-0.7, -0.7, -0.7), (0.7, 0.0, 0.7)),
                                ("shirt", "a shirt", (-0.7, -0.1, -0.7), (0.7, 0.7, 0.7))])
    config = TrainConfig(iterations=30, resolution_schedule=((30, 32),), n_samples=32)
    gray = SyntheticProvider(lambda view: np.full((view.camera.height, view.camera.width, 3), 0.35))
    h_body = parameter_hash(body)
    jeans, _ = train_cloth(scene, [body], "jeans", config, (gray, gray))
    after_first = parameter_hash(body)
    h_jeans = parameter_hash(jeans)
    shirt, _ = train_cloth(scene, [body, jeans], "shirt", config, (gray, gray))
    ok = after_first == h_body and parameter_hash(body) == h_body and parameter_hash(jeans) == h_jeans
    untrained = init_field(config.grid, config.mlp, scene.layer("shirt").aabb,
                           seed=config.seed + scene.layer_index("shirt"))
    moved = parameter_hash(shirt) != parameter_hash(untrained)
    record(8, "progressive freeze", ok and moved,
           f"body hash unchanged through both garment stages={after_first == h_body and parameter_hash(body) == h_body}, "
           f"first garment unchanged by the second={parameter_hash(jeans) == h_jeans}, second garment trained={moved}")


@pytest.mark.slow
def test_criterion_9_transfer():
    t0 = time.perf_counter()
    cloth = shell_field(softness=0.02)
    target = sphere_field(radius=0.6, softness=0.02)
    fitted = [target, ScaledField(cloth, 1.2)]
    providers = (analytic_provider(fitted, "composed", 128), analytic_provider(fitted, "cloth-only", 128))
    config = TrainConfig(resolution_schedule=((250, 32),), iterations=250, n_samples=64, transfer_iterations=250)

    fresh = DeformationField(seed=config.seed, dtype=torch.float64)
    cam = orbit_camera(35.0, 15.0, 2.5, (32, 32), 50.0)
    with torch.no_grad():
        a = render_image([target, cloth], cam, n_samples=64).color
        b = render_image([target, DeformedField(cloth, fresh)], cam, n_samples=64).color
    identity_err = float((a - b).abs().max())

    deform, _ = train_transfer(cloth, [target], ("a", "b"), providers, config, toy_scene(), deform=fresh)
    inside = lambda p: torch.linalg.norm(p, dim=-1) < 0.6
    rigid = density_mass(cloth, inside)
    moved = density_mass(DeformedField(cloth, deform), inside)
    reduction = 1.0 - moved / rigid
    elapsed = time.perf_counter() - t0
    record(9, "transfer sanity", reduction >= 0.5 and identity_err < 1e-6 and elapsed < 10 * 60,
           f"penetration mass {rigid:.3f} -> {moved:.3f} ({100 * reduction:.1f}% less), "
           f"identity render err {identity_err:.1e}, {elapsed / 60:.1f} min")


# --------------------------------------------------------------------------
# 10: remote protocol

def test_criterion_10_protocol():
    t0 = time.perf_counter()
    scene = toy_scene()
    config = TrainConfig(iterations=3, resolution_schedule=((3, 8),), n_samples=16, grid=SMALL_GRID, mlp=SMALL_MLP)
    reference = np.random.default_rng(10).uniform(size=(8, 8, 3))
    local, _ = train_body(scene, config, SyntheticProvider(reference))
    with MockResidualServer(reference=reference) as srv:
        remote, _ = train_body(scene, config, RemoteProvider(srv.url))
        n_requests = len(srv.requests)
    gap = max(float((a - b).abs().max()) for a, b in zip(local.state_dict().values(), remote.state_dict().values()))
    rejected = []
    for mode in ("short", "not-json", "missing", "strings", "nan"):
        with MockResidualServer(mode=mode) as srv:
            try:
                train_body(scene, config, RemoteProvider(srv.url, retries=0))
            except TrainingError as exc:
                rejected.append(isinstance(exc.__cause__, ProtocolError))
            else:
                rejected.append(False)
    elapsed = time.perf_counter() - t0
    record(10, "protocol conformance", gap < 1e-5 and all(rejected) and n_requests == 3 and elapsed < 10.0,
           f"remote vs local parameter gap {gap:.1e} over 3 steps, "
           f"{sum(rejected)}/5 malformed replies raised protocol errors, {elapsed:.2f}s")
