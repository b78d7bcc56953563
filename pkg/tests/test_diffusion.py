"""Schedule, timestep-law, forward-diffusion, SDS-rule, and synthetic-oracle
tests, with cumulative-product and symbolic-substitution oracles."""

import math

import pytest
import torch

from distillfield.diffusion import (
    CAP_ADAPT,
    CAP_TEXT,
    CAP_VIEW,
    Conditioning,
    NoiseSchedule,
    TargetImageOracle,
    adapt_oracle,
    build_schedule,
    forward_diffuse,
    sample_timestep,
    sds_grad,
    sds_loss_through,
)
from distillfield.errors import ConfigError, OracleError
from distillfield.render import Camera


def make_camera(width=8, height=8, phi=0.0):
    return Camera(rho=2.0, theta=math.pi / 2, phi=phi, fov_y=0.8,
                  width=width, height=height, near=1.2, far=2.8)


def constant_target_oracle(schedule, value=0.25, width=8, height=8,
                           capabilities=frozenset({CAP_VIEW})):
    target = torch.full((height, width, 3), value)
    return TargetImageOracle(lambda cam: target, schedule, capabilities=capabilities)


class TestSchedule:
    @pytest.mark.parametrize("profile", ["linear-beta", "cosine"])
    def test_near_identity_at_start(self, profile):
        s = build_schedule(1000, profile)
        assert float(s.alpha[0]) >= 0.999

    @pytest.mark.parametrize("profile", ["linear-beta", "cosine"])
    def test_variance_preserving(self, profile):
        s = build_schedule(1000, profile)
        err = (s.alpha**2 + s.sigma**2 - 1.0).abs().max()
        assert float(err) <= 1e-6

    @pytest.mark.parametrize("profile", ["linear-beta", "cosine"])
    def test_monotonicity(self, profile):
        s = build_schedule(500, profile)
        assert (s.alpha[1:] <= s.alpha[:-1] + 1e-12).all()
        assert (s.sigma[1:] >= s.sigma[:-1] - 1e-12).all()

    def test_linear_beta_matches_cumprod_oracle(self):
        s = build_schedule(1000, "linear-beta")
        acc = 1.0
        n = 1000
        for i in range(n):
            beta = 8.5e-4 + (1.2e-2 - 8.5e-4) * i / (n - 1)
            acc *= 1.0 - beta
        assert abs(float(s.alpha[-1] ** 2) - acc) <= 1e-6
        # frozen from the oracle above
        assert acc == pytest.approx(1.5789629e-3, rel=1e-6)

    @pytest.mark.parametrize("profile", ["linear-beta", "cosine"])
    def test_weight_positive(self, profile):
        for mode in ("sigma_sq", "one", "sigma_alpha"):
            s = build_schedule(200, profile, mode)
            assert float(s.weight.min()) > 0

    def test_weight_modes(self):
        s2 = build_schedule(100, "linear-beta", "sigma_sq")
        s1 = build_schedule(100, "linear-beta", "one")
        sa = build_schedule(100, "linear-beta", "sigma_alpha")
        assert torch.allclose(s2.weight, s2.sigma**2)
        assert (s1.weight == 1).all()
        assert torch.allclose(sa.weight, sa.sigma * sa.alpha)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            build_schedule(1)
        with pytest.raises(ConfigError):
            build_schedule(100, "quadratic")
        with pytest.raises(ConfigError):
            build_schedule(100, "cosine", "snr")

    def test_coefficients_bounds(self):
        s = build_schedule(100, "linear-beta")
        with pytest.raises(ValueError):
            s.coefficients(100)
        with pytest.raises(ValueError):
            s.coefficients(-1)


class TestTimestepLaw:
    def test_draws_within_bounds(self):
        s = build_schedule(1000, "linear-beta")
        g = torch.Generator().manual_seed(0)
        draws = [sample_timestep(s, g) for _ in range(10_000)]
        assert min(draws) >= 20
        assert max(draws) <= 980

    def test_mean_near_center(self):
        s = build_schedule(1000, "linear-beta")
        g = torch.Generator().manual_seed(1)
        draws = [sample_timestep(s, g) for _ in range(10_000)]
        mean = sum(draws) / len(draws)
        assert abs(mean - 500) / 500 < 0.02

    def test_seeded_sequence_reproducible(self):
        s = build_schedule(1000, "linear-beta")
        a = [sample_timestep(s, torch.Generator().manual_seed(2)) for _ in range(1)]
        ga, gb = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
        seq_a = [sample_timestep(s, ga) for _ in range(50)]
        seq_b = [sample_timestep(s, gb) for _ in range(50)]
        assert seq_a == seq_b

    def test_small_step_count_stays_in_range(self):
        s = build_schedule(10, "linear-beta")
        g = torch.Generator().manual_seed(4)
        draws = [sample_timestep(s, g) for _ in range(500)]
        assert min(draws) >= 0
        assert max(draws) <= 9


class TestForwardDiffuse:
    def test_zero_noise(self):
        s = build_schedule(100, "linear-beta")
        g = torch.Generator().manual_seed(5)
        x0 = torch.rand(4, 4, 3, generator=g)
        a, _, _ = s.coefficients(37)
        assert torch.equal(forward_diffuse(x0, 37, torch.zeros_like(x0), s), a * x0)

    def test_zero_signal(self):
        s = build_schedule(100, "linear-beta")
        g = torch.Generator().manual_seed(6)
        eps = torch.randn(4, 4, 3, generator=g)
        _, sig, _ = s.coefficients(80)
        assert torch.equal(forward_diffuse(torch.zeros_like(eps), 80, eps, s), sig * eps)

    def test_shape_mismatch_rejected(self):
        s = build_schedule(100, "linear-beta")
        with pytest.raises(ValueError):
            forward_diffuse(torch.zeros(2, 2), 10, torch.zeros(2, 3), s)

    def test_monte_carlo_moments(self):
        s = build_schedule(1000, "linear-beta")
        t = 400
        a, sig, _ = s.coefficients(t)
        g = torch.Generator().manual_seed(7)
        x0 = torch.rand(8, generator=g)
        n = 10_000
        eps = torch.randn(n, 8, generator=g)
        x_t = torch.stack([forward_diffuse(x0, t, e, s) for e in eps])
        mean_err = (x_t.mean(0) - a * x0).abs().max()
        assert float(mean_err) < 4.0 * sig / math.sqrt(n)
        var = x_t.var(0, correction=0).mean()
        assert abs(float(var) - sig**2) / sig**2 < 0.05


class TestSdsRule:
    def test_perfect_denoiser_zero_gradient(self):
        s = build_schedule(100, "linear-beta")
        g = torch.Generator().manual_seed(8)
        x0 = torch.rand(4, 4, 3, generator=g)
        eps = torch.randn(4, 4, 3, generator=g)
        grad = sds_grad(x0, 50, eps, eps, s)
        assert grad.abs().max() == 0

    def test_linear_in_residual(self):
        s = build_schedule(100, "linear-beta")
        g = torch.Generator().manual_seed(9)
        x0 = torch.rand(3, 3, 3, generator=g)
        eps = torch.randn(3, 3, 3, generator=g)
        pred = torch.randn(3, 3, 3, generator=g)
        g1 = sds_grad(x0, 30, eps, pred, s)
        g3 = sds_grad(x0, 30, eps, eps + 3.0 * (pred - eps), s)
        assert torch.allclose(g3, 3.0 * g1, atol=1e-6)

    def test_shape_mismatch_rejected(self):
        s = build_schedule(100, "linear-beta")
        with pytest.raises(ValueError):
            sds_grad(torch.zeros(2, 2), 10, torch.zeros(2, 2), torch.zeros(3, 2), s)

    def test_target_oracle_gradient_symbolic(self):
        # substituting the oracle's prediction into the residual gives
        # w(t) * (alpha/sigma) * (x0 - target)
        s = build_schedule(1000, "linear-beta")
        oracle = constant_target_oracle(s, 0.3)
        cam = make_camera()
        cond = Conditioning(camera=cam)
        g = torch.Generator().manual_seed(10)
        for t in (25, 300, 700, 975):
            x0 = torch.rand(8, 8, 3, generator=g)
            eps = torch.randn(8, 8, 3, generator=g)
            x_t = forward_diffuse(x0, t, eps, s)
            pred = oracle.predict_eps(x_t, t, cond)
            grad = sds_grad(x0, t, eps, pred, s)
            a, sig, w = s.coefficients(t)
            expected = w * (a / sig) * (x0 - oracle.target(cam))
            assert torch.allclose(grad, expected, atol=1e-5), f"t={t}"

    def test_gradient_direction_is_error_direction(self):
        s = build_schedule(1000, "linear-beta")
        oracle = constant_target_oracle(s, 0.6)
        cam = make_camera()
        g = torch.Generator().manual_seed(11)
        for trial in range(20):
            t = sample_timestep(s, g)
            x0 = torch.rand(8, 8, 3, generator=g)
            eps = torch.randn(8, 8, 3, generator=g)
            x_t = forward_diffuse(x0, t, eps, s)
            with torch.no_grad():
                pred = oracle.predict_eps(x_t, t, Conditioning(camera=cam))
            grad = sds_grad(x0, t, eps, pred, s)
            err = x0 - oracle.target(cam)
            cos = float((grad * err).sum() / (grad.norm() * err.norm()))
            assert cos == pytest.approx(1.0, abs=1e-5)

    def test_surrogate_loss_routes_gradient(self):
        x0 = torch.rand(4, 4, 3, generator=torch.Generator().manual_seed(12)).requires_grad_()
        grad = torch.randn(4, 4, 3, generator=torch.Generator().manual_seed(13))
        sds_loss_through(x0, grad).backward()
        assert torch.allclose(x0.grad, grad)


class TestTargetImageOracle:
    def test_recovers_injected_noise(self):
        s = build_schedule(1000, "linear-beta")
        oracle = constant_target_oracle(s, 0.4)
        cam = make_camera()
        g = torch.Generator().manual_seed(14)
        eps = torch.randn(8, 8, 3, generator=g)
        x_t = forward_diffuse(oracle.target(cam), 123, eps, s)
        pred = oracle.predict_eps(x_t, 123, Conditioning(camera=cam))
        assert torch.allclose(pred, eps, atol=1e-5)

    def test_clean_target_gives_zero(self):
        s = build_schedule(1000, "linear-beta")
        oracle = constant_target_oracle(s, 0.4)
        cam = make_camera()
        a, _, _ = s.coefficients(321)
        with torch.no_grad():
            pred = oracle.predict_eps(a * oracle.target(cam), 321, Conditioning(camera=cam))
        assert float(pred.abs().max()) < 1e-5

    def test_rejects_zero_sigma(self):
        base = build_schedule(100, "linear-beta")
        rigged = NoiseSchedule(
            alpha=torch.ones_like(base.alpha),
            sigma=torch.zeros_like(base.sigma),
            weight=torch.ones_like(base.weight),
            num_steps=base.num_steps,
            profile="linear-beta",
            weight_mode="one",
        )
        oracle = constant_target_oracle(rigged)
        with pytest.raises(OracleError):
            oracle.predict_eps(torch.zeros(8, 8, 3), 5, Conditioning(camera=make_camera()))

    def test_requires_camera(self):
        s = build_schedule(100, "linear-beta")
        oracle = constant_target_oracle(s)
        with pytest.raises(OracleError):
            oracle.predict_eps(torch.zeros(8, 8, 3), 50, Conditioning(prompt="x"))

    def test_rejects_shape_mismatch(self):
        s = build_schedule(100, "linear-beta")
        oracle = constant_target_oracle(s, width=8, height=8)
        with pytest.raises(OracleError):
            oracle.predict_eps(torch.zeros(4, 4, 3), 50, Conditioning(camera=make_camera()))

    def test_target_cache_one_render_per_camera(self):
        s = build_schedule(100, "linear-beta")
        calls = []

        def fn(cam):
            calls.append(cam.phi)
            return torch.zeros(8, 8, 3)

        oracle = TargetImageOracle(fn, s)
        cam_a, cam_b = make_camera(phi=0.0), make_camera(phi=1.0)
        for _ in range(3):
            oracle.target(cam_a)
            oracle.target(cam_b)
        assert len(calls) == 2

    def test_descent_on_pixels_converges(self):
        # gradient descent on x0 alone contracts toward the target; with this
        # oracle the SDS gradient is exactly w*(alpha/sigma)*(x0 - target), so
        # the error must shrink strictly every step
        s = build_schedule(1000, "linear-beta")
        oracle = constant_target_oracle(s, 0.35, width=4, height=4)
        cam = make_camera(width=4, height=4)
        cond = Conditioning(camera=cam)
        g = torch.Generator().manual_seed(15)
        final_mses = []
        with torch.no_grad():
            for trial in range(100):
                x = torch.rand(4, 4, 3, generator=g)
                prev = float(((x - oracle.target(cam)) ** 2).mean())
                for step in range(500):
                    t = sample_timestep(s, g)
                    eps = torch.randn(4, 4, 3, generator=g)
                    x_t = forward_diffuse(x, t, eps, s)
                    grad = sds_grad(x, t, eps, oracle.predict_eps(x_t, t, cond), s)
                    x = x - 0.1 * grad
                    cur = float(((x - oracle.target(cam)) ** 2).mean())
                    assert cur <= prev + 1e-12, f"error grew at trial {trial} step {step}"
                    prev = cur
                final_mses.append(prev)
        assert max(final_mses) < 1e-4


class TestAdaptation:
    def adaptable_oracle(self, schedule, value=0.2):
        return constant_target_oracle(
            schedule, value, capabilities=frozenset({CAP_TEXT, CAP_ADAPT})
        )

    def test_zero_adapter_matches_base(self):
        s = build_schedule(1000, "linear-beta")
        adapted = self.adaptable_oracle(s)
        plain = constant_target_oracle(s, 0.2)
        cam = make_camera()
        g = torch.Generator().manual_seed(16)
        x_t = torch.randn(8, 8, 3, generator=g)
        a = adapted.predict_eps(x_t, 77, Conditioning(camera=cam))
        b = plain.predict_eps(x_t, 77, Conditioning(camera=cam))
        assert torch.equal(a, b)

    @staticmethod
    def expected_adaptation_loss(oracle, obs, cond, schedule, n=400):
        # deterministic estimate of the least-squares objective the adapter
        # minimizes, on a frozen set of (t, eps) draws
        g = torch.Generator().manual_seed(99)
        total = 0.0
        with torch.no_grad():
            for _ in range(n):
                t = sample_timestep(schedule, g)
                eps = torch.randn(obs.shape, generator=g)
                z_t = forward_diffuse(obs, t, eps, schedule)
                pred = oracle.predict_eps(z_t, t, cond)
                _, _, w = schedule.coefficients(t)
                total += float(w * ((pred - eps) ** 2).mean())
        return total / n

    def test_adaptation_reduces_loss(self):
        s = build_schedule(1000, "linear-beta")
        oracle = self.adaptable_oracle(s, 0.2)
        cam = make_camera()
        cond = Conditioning(camera=cam, prompt="p")
        # fixed render distribution sitting off the target by a channel shift
        shift = torch.tensor([0.3, -0.2, 0.1])
        obs = oracle.target(cam) + shift
        before = self.expected_adaptation_loss(oracle, obs, cond, s)
        g = torch.Generator().manual_seed(17)
        for _ in range(200):
            adapt_oracle(oracle, [obs], [cond], s, g)
        after = self.expected_adaptation_loss(oracle, obs, cond, s)
        assert after <= 0.7 * before, f"adaptation loss went {before:.4f} -> {after:.4f}"

    def test_adapt_requires_capability(self):
        s = build_schedule(100, "linear-beta")
        oracle = constant_target_oracle(s)
        with pytest.raises(OracleError):
            adapt_oracle(oracle, [torch.zeros(8, 8, 3)], [Conditioning(camera=make_camera())], s)

    def test_adapt_rejects_empty_batch(self):
        s = build_schedule(100, "linear-beta")
        oracle = self.adaptable_oracle(s)
        with pytest.raises(OracleError):
            adapt_oracle(oracle, [], [], s)

    def test_adaptation_changes_predictions(self):
        s = build_schedule(1000, "linear-beta")
        oracle = self.adaptable_oracle(s)
        cam = make_camera()
        cond = Conditioning(camera=cam)
        g = torch.Generator().manual_seed(18)
        x_t = torch.randn(8, 8, 3, generator=g)
        before = oracle.predict_eps(x_t, 200, cond).clone()
        obs = oracle.target(cam) + 0.5
        for _ in range(5):
            adapt_oracle(oracle, [obs], [cond], s, g)
        after = oracle.predict_eps(x_t, 200, cond)
        assert not torch.equal(before, after)
        scale, bias = oracle.adapter_state()
        assert float(scale.abs().sum() + bias.abs().sum()) > 0
