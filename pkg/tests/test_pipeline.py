"""Stage-step, camera-sampling, evaluation, and mesh-extraction tests."""

import json
import math

import numpy as np
import pytest
import torch

from distillfield.diffusion import (
    CAP_ADAPT,
    CAP_TEXT,
    CAP_VIEW,
    GuidanceOracle,
    TargetImageOracle,
    build_schedule,
)
from distillfield.errors import NumericalFailure, OracleError
from distillfield.field import HashGridConfig, RadianceField
from distillfield.losses import LossWeights
from distillfield.pipeline import (
    CameraPolicy,
    RunMetrics,
    StagePlan,
    evaluation_ring,
    extract_mesh,
    make_optimizer,
    mask_iou,
    psnr,
    sample_camera,
    stage1_step,
    stage2_step,
    surface_distance,
)
from distillfield.render import Camera
from distillfield.scenes import SceneSpec, make_reference_bundle, render_target, scene_field


def tiny_field(seed=0, density_bias=-1.0):
    config = HashGridConfig(num_levels=4, base_resolution=4, max_resolution=32,
                            features_per_level=2, table_size_log2=8)
    g = torch.Generator().manual_seed(seed)
    return RadianceField(config, mlp_hidden=16, mlp_layers=2,
                         density_bias=density_bias, generator=g)


def ref_camera(res=16):
    return Camera(rho=1.8, theta=math.pi / 2, phi=0.0, fov_y=0.8,
                  width=res, height=res, near=1.0, far=2.6)


def make_policy(fraction=0.25, res=16, camera=None):
    return CameraPolicy(
        reference_camera=camera if camera is not None else ref_camera(res),
        reference_fraction=fraction,
        rho_range=(1.5, 2.2),
        theta_range=(math.radians(60), math.radians(120)),
        phi_range=(0.0, 2 * math.pi),
        fov_y=0.8,
        width=res,
        height=res,
        near_far_margin=0.8,
    )


def make_plan(losses, fraction=0.25, res=16, iterations=4, adapt_every=0, camera=None):
    return StagePlan(
        iterations=iterations,
        enabled_losses=frozenset(losses),
        loss_weights=LossWeights(),
        camera_policy=make_policy(fraction, res, camera),
        render_resolution=res,
        samples_per_ray=16,
        adapt_every=adapt_every,
    )


def sphere_bundle(camera):
    spec = SceneSpec(kind="analytic-sphere", radius=0.5, density=80.0)
    return make_reference_bundle(spec, camera, samples_per_ray=48)


def view_oracle(schedule, res=16, value=0.5):
    target = torch.full((res, res, 3), value)
    return TargetImageOracle(lambda cam: target, schedule,
                             capabilities=frozenset({CAP_VIEW}))


def text_oracle(schedule, res=16, value=0.5, adaptable=True):
    target = torch.full((res, res, 3), value)
    caps = {CAP_TEXT, CAP_ADAPT} if adaptable else {CAP_TEXT}
    return TargetImageOracle(lambda cam: target, schedule,
                             capabilities=frozenset(caps))


class TestSampleCamera:
    def test_fraction_one_always_reference(self):
        policy = make_policy(fraction=1.0)
        g = torch.Generator().manual_seed(40)
        for _ in range(50):
            assert sample_camera(policy, g) is policy.reference_camera

    def test_fraction_zero_never_reference(self):
        policy = make_policy(fraction=0.0)
        g = torch.Generator().manual_seed(41)
        for _ in range(200):
            cam = sample_camera(policy, g)
            assert cam is not policy.reference_camera
            assert policy.rho_range[0] <= cam.rho <= policy.rho_range[1]
            assert policy.theta_range[0] <= cam.theta <= policy.theta_range[1]
            assert policy.phi_range[0] <= cam.phi <= policy.phi_range[1]
            assert cam.near == pytest.approx(max(cam.rho - 0.8, 0.05))
            assert cam.far == pytest.approx(cam.rho + 0.8)

    def test_reference_proportion(self):
        policy = make_policy(fraction=0.25)
        g = torch.Generator().manual_seed(42)
        n = 2000
        hits = sum(sample_camera(policy, g) is policy.reference_camera for _ in range(n))
        sigma = math.sqrt(0.25 * 0.75 / n)
        assert abs(hits / n - 0.25) < 4 * sigma

    def test_azimuth_uniformity(self):
        # chi-squared over 8 bins; threshold is the 99th percentile at 7 dof
        policy = make_policy(fraction=0.0)
        g = torch.Generator().manual_seed(43)
        n = 4000
        bins = [0] * 8
        for _ in range(n):
            cam = sample_camera(policy, g)
            bins[min(int(cam.phi / (2 * math.pi) * 8), 7)] += 1
        expected = n / 8
        chi2 = sum((b - expected) ** 2 / expected for b in bins)
        assert chi2 < 18.48, f"chi2={chi2:.2f}, bins={bins}"

    def test_seeded_reproducibility(self):
        policy = make_policy(fraction=0.25)
        seq_a = [sample_camera(policy, torch.Generator().manual_seed(44)) for _ in range(1)]
        ga, gb = torch.Generator().manual_seed(45), torch.Generator().manual_seed(45)
        for _ in range(30):
            a = sample_camera(policy, ga)
            b = sample_camera(policy, gb)
            assert (a.rho, a.theta, a.phi) == (b.rho, b.theta, b.phi)


class TestPlanValidation:
    def test_rejects_unknown_loss(self):
        with pytest.raises(ValueError):
            make_plan(["sds3d", "style"])

    def test_rejects_bad_iterations(self):
        with pytest.raises(ValueError):
            make_plan(["sds3d"], iterations=0)

    def test_rejects_bad_fraction(self):
        with pytest.raises(ValueError):
            make_policy(fraction=1.5)

    def test_rejects_inverted_range(self):
        with pytest.raises(ValueError):
            CameraPolicy(
                reference_camera=ref_camera(),
                reference_fraction=0.25,
                rho_range=(2.2, 1.5),
                theta_range=(1.0, 2.0),
                phi_range=(0.0, 6.28),
                fov_y=0.8, width=16, height=16, near_far_margin=0.8,
            )


class TestStage1Step:
    def test_record_contains_exactly_enabled_losses(self):
        schedule = build_schedule(1000)
        field = tiny_field(1)
        cam = ref_camera()
        ref = sphere_bundle(cam)
        plan = make_plan(["sds3d", "rec", "depth", "normal"], fraction=1.0, camera=cam)
        optimizer = make_optimizer(field, plan)
        g = torch.Generator().manual_seed(46)
        record = stage1_step(field, ref, view_oracle(schedule), schedule, plan,
                             optimizer, g, iteration=0)
        assert set(record["losses"]) == {"sds3d", "rec", "depth", "normal"}
        assert record["reference_view"] is True
        assert record["stage"] == 1
        assert record["losses"]["rec"] > 0

    def test_non_reference_draw_skips_reference_losses(self):
        schedule = build_schedule(1000)
        field = tiny_field(2)
        cam = ref_camera()
        ref = sphere_bundle(cam)
        plan = make_plan(["sds3d", "rec", "depth", "normal"], fraction=0.0, camera=cam)
        optimizer = make_optimizer(field, plan)
        g = torch.Generator().manual_seed(47)
        record = stage1_step(field, ref, view_oracle(schedule), schedule, plan,
                             optimizer, g, iteration=0)
        assert record["reference_view"] is False
        assert record["losses"]["rec"] == 0.0
        assert record["losses"]["depth"] == 0.0
        assert record["losses"]["normal"] == 0.0

    def test_subset_of_losses_recorded(self):
        schedule = build_schedule(1000)
        field = tiny_field(3)
        cam = ref_camera()
        ref = sphere_bundle(cam)
        plan = make_plan(["rec"], fraction=1.0, camera=cam)
        optimizer = make_optimizer(field, plan)
        g = torch.Generator().manual_seed(48)
        record = stage1_step(field, ref, view_oracle(schedule), schedule, plan,
                             optimizer, g, iteration=0)
        assert set(record["losses"]) == {"rec"}

    def test_parameters_move(self):
        schedule = build_schedule(1000)
        field = tiny_field(4)
        cam = ref_camera()
        ref = sphere_bundle(cam)
        plan = make_plan(["sds3d", "rec"], fraction=1.0, camera=cam)
        optimizer = make_optimizer(field, plan)
        g = torch.Generator().manual_seed(49)
        before = field.grid.detach().clone()
        stage1_step(field, ref, view_oracle(schedule), schedule, plan, optimizer, g, 0)
        assert not torch.equal(before, field.grid.detach())

    def test_nan_oracle_raises_numerical_failure(self):
        schedule = build_schedule(1000)
        field = tiny_field(5)
        cam = ref_camera()
        ref = sphere_bundle(cam)
        plan = make_plan(["sds3d"], fraction=0.0, camera=cam)
        optimizer = make_optimizer(field, plan)
        g = torch.Generator().manual_seed(50)
        hostile = TargetImageOracle(
            lambda cam: torch.full((16, 16, 3), float("nan")), schedule,
            capabilities=frozenset({CAP_VIEW}),
        )
        with pytest.raises(NumericalFailure, match="stage 1 iteration 3"):
            stage1_step(field, ref, hostile, schedule, plan, optimizer, g, iteration=3)

    def test_wrong_capability_rejected(self):
        schedule = build_schedule(1000)
        field = tiny_field(6)
        cam = ref_camera()
        ref = sphere_bundle(cam)
        plan = make_plan(["sds3d"], camera=cam)
        optimizer = make_optimizer(field, plan)
        with pytest.raises(OracleError):
            stage1_step(field, ref, text_oracle(schedule), schedule, plan,
                        optimizer, torch.Generator().manual_seed(51), 0)

    def test_deterministic_across_runs(self):
        schedule = build_schedule(1000)
        cam = ref_camera()
        ref = sphere_bundle(cam)
        plan = make_plan(["sds3d", "rec", "depth", "normal"], fraction=0.5, camera=cam)

        def run():
            field = tiny_field(7)
            optimizer = make_optimizer(field, plan)
            g = torch.Generator().manual_seed(52)
            records = [
                stage1_step(field, ref, view_oracle(schedule), schedule, plan,
                            optimizer, g, i)
                for i in range(5)
            ]
            return field, records

        field_a, rec_a = run()
        field_b, rec_b = run()
        for p, q in zip(field_a.parameters(), field_b.parameters()):
            assert torch.equal(p.detach(), q.detach())
        assert rec_a == rec_b


class TestStage2Step:
    def test_record_and_adapt_loss(self):
        schedule = build_schedule(1000)
        field = tiny_field(8)
        plan = make_plan(["sds2d", "opacity_reg"], fraction=0.0, adapt_every=1)
        optimizer = make_optimizer(field, plan)
        oracle = text_oracle(schedule)
        g = torch.Generator().manual_seed(53)
        record = stage2_step(field, oracle, schedule, plan, optimizer, g, 0, prompt="a thing")
        assert set(record["losses"]) == {"sds2d", "opacity_reg"}
        assert record["stage"] == 2
        assert "adapt_loss" in record
        scale, bias = oracle.adapter_state()
        assert float(scale.abs().sum() + bias.abs().sum()) > 0

    def test_adapt_every_zero_leaves_adapter_untouched(self):
        schedule = build_schedule(1000)
        field = tiny_field(9)
        plan = make_plan(["sds2d", "opacity_reg"], fraction=0.0, adapt_every=0)
        optimizer = make_optimizer(field, plan)
        oracle = text_oracle(schedule)
        g = torch.Generator().manual_seed(54)
        for i in range(3):
            record = stage2_step(field, oracle, schedule, plan, optimizer, g, i)
            assert "adapt_loss" not in record
        scale, bias = oracle.adapter_state()
        assert float(scale.abs().sum()) == 0.0
        assert float(bias.abs().sum()) == 0.0

    def test_adapt_every_cadence(self):
        schedule = build_schedule(1000)
        field = tiny_field(10)
        plan = make_plan(["sds2d"], fraction=0.0, adapt_every=3)
        optimizer = make_optimizer(field, plan)
        oracle = text_oracle(schedule)
        g = torch.Generator().manual_seed(55)
        seen = [
            "adapt_loss" in stage2_step(field, oracle, schedule, plan, optimizer, g, i)
            for i in range(6)
        ]
        assert seen == [False, False, True, False, False, True]

    def test_adaptation_leaves_field_bits_unchanged(self):
        # same seed, adapter on vs off: the field update of the very step the
        # adapter runs in must be bit-identical, proving the freeze contract
        schedule = build_schedule(1000)
        plan_on = make_plan(["sds2d", "opacity_reg"], fraction=0.0, adapt_every=1)
        plan_off = make_plan(["sds2d", "opacity_reg"], fraction=0.0, adapt_every=0)

        def run(plan):
            field = tiny_field(11)
            optimizer = make_optimizer(field, plan)
            oracle = text_oracle(schedule)
            g = torch.Generator().manual_seed(56)
            stage2_step(field, oracle, schedule, plan, optimizer, g, 0)
            return field

        field_on = run(plan_on)
        field_off = run(plan_off)
        for p, q in zip(field_on.parameters(), field_off.parameters()):
            assert torch.equal(p.detach(), q.detach())

    def test_non_adaptable_oracle_skips_adaptation(self):
        schedule = build_schedule(1000)
        field = tiny_field(12)
        plan = make_plan(["sds2d"], fraction=0.0, adapt_every=1)
        optimizer = make_optimizer(field, plan)
        oracle = text_oracle(schedule, adaptable=False)
        record = stage2_step(field, oracle, schedule, plan, optimizer,
                             torch.Generator().manual_seed(57), 0)
        assert "adapt_loss" not in record

    def test_latent_shape_mismatch_rejected(self):
        class OffsizeCodec(GuidanceOracle):
            def __init__(self):
                self.capabilities = frozenset({CAP_TEXT})
                self.latent_shape = (4, 4, 3)

            def encode(self, x0):
                return torch.zeros(4, 4, 3)

        schedule = build_schedule(1000)
        field = tiny_field(13)
        plan = make_plan(["sds2d"], fraction=0.0)
        optimizer = make_optimizer(field, plan)
        with pytest.raises(OracleError):
            stage2_step(field, OffsizeCodec(), schedule, plan, optimizer,
                        torch.Generator().manual_seed(58), 0)

    def test_wrong_capability_rejected(self):
        schedule = build_schedule(1000)
        field = tiny_field(14)
        plan = make_plan(["sds2d"])
        optimizer = make_optimizer(field, plan)
        with pytest.raises(OracleError):
            stage2_step(field, view_oracle(schedule), schedule, plan, optimizer,
                        torch.Generator().manual_seed(59), 0)


class TestEvaluationHelpers:
    def test_psnr_known_value(self):
        a = torch.zeros(4, 4, 3)
        b = torch.full((4, 4, 3), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-4)
        assert psnr(a, a) == math.inf

    def test_mask_iou_known_value(self):
        a = torch.zeros(4, 4, dtype=torch.bool)
        b = torch.zeros(4, 4, dtype=torch.bool)
        a[0:2] = True  # 8 pixels
        b[1:3] = True  # 8 pixels, overlap 4
        assert mask_iou(a, b) == pytest.approx(4 / 12)
        assert mask_iou(torch.zeros(2, 2), torch.zeros(2, 2)) == 1.0

    def test_evaluation_ring_geometry(self):
        cam = ref_camera()
        ring = evaluation_ring(cam, n_views=12, resolution=8)
        assert len(ring) == 12
        phis = [c.phi for c in ring]
        assert len(set(phis)) == 12
        for c in ring:
            assert c.rho == cam.rho
            assert c.theta == cam.theta
            assert c.width == 8 and c.height == 8
            # offset keeps every ring view away from the reference azimuth
            assert abs((c.phi - cam.phi) % (2 * math.pi)) > 1e-3

    def test_surface_distance_sphere(self):
        spec = SceneSpec(kind="analytic-sphere", radius=0.5)
        on_surface = np.array([[0.5, 0.0, 0.0], [0.0, -0.5, 0.0]])
        off_surface = np.array([[0.7, 0.0, 0.0]])
        assert surface_distance(spec, on_surface) == pytest.approx(0.0, abs=1e-7)
        assert surface_distance(spec, off_surface) == pytest.approx(0.2, abs=1e-6)
        assert surface_distance(spec, np.zeros((0, 3))) is None

    def test_surface_distance_box(self):
        spec = SceneSpec(kind="analytic-box", half_extent=0.4)
        face = np.array([[0.4, 0.0, 0.0]])
        corner = np.array([[0.4, 0.4, 0.4]])
        outside = np.array([[0.5, 0.0, 0.0]])
        assert surface_distance(spec, face) == pytest.approx(0.0, abs=1e-7)
        assert surface_distance(spec, corner) == pytest.approx(0.0, abs=1e-7)
        assert surface_distance(spec, outside) == pytest.approx(0.1, abs=1e-6)


class TestExtractMesh:
    def test_sphere_vertices_near_surface(self):
        spec = SceneSpec(kind="analytic-sphere", radius=0.5, density=80.0)
        verts, faces = extract_mesh(scene_field(spec), grid_resolution=48)
        assert len(verts) > 100
        assert len(faces) > 100
        voxel = 2.0 / 47
        radii = np.linalg.norm(verts, axis=-1)
        assert float(np.abs(radii - 0.5).max()) < 2 * voxel

    def test_empty_field_gives_empty_mesh(self):
        field = tiny_field(15, density_bias=-20.0)
        verts, faces = extract_mesh(field, grid_resolution=16)
        assert verts.shape == (0, 3)
        assert faces.shape == (0, 3)

    def test_rejects_tiny_grid(self):
        with pytest.raises(ValueError):
            extract_mesh(tiny_field(16), grid_resolution=4)


class TestRunMetrics:
    def test_filter_and_jsonl(self, tmp_path):
        m = RunMetrics()
        m.append_step({"stage": 1, "iteration": 0, "losses": {}, "total": 1.0})
        m.append_step({"stage": 2, "iteration": 0, "losses": {}, "total": 2.0})
        m.append_eval({"stage": 1, "iteration": 0, "psnr": 11.0})
        m.append_stage_time(1, 3.5)
        assert len(m.steps()) == 2
        assert len(m.steps(stage=1)) == 1
        path = tmp_path / "m.jsonl"
        m.write_jsonl(path)
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(lines) == 4
        kinds = {l["kind"] for l in lines}
        assert kinds == {"step", "eval", "stage_time"}
