import math

import numpy as np
import pytest
import torch

from scenediff.diffusion import (
    Condition,
    ConditionalDenoiser,
    DenoiserConfig,
    DiffusionDivergenceError,
    DiffusionError,
    DiffusionTrainConfig,
    NoiseSchedule,
    ScheduleError,
    apply_condition_dropout,
    cfg_predict,
    ddm_loss,
    diffuse_with_alpha_bar,
    forward_diffuse,
    sample_tensor,
    sinusoidal_embedding,
    strided_timesteps,
    train_diffusion,
)


class TestSchedule:
    def test_alpha_bar_matches_explicit_product(self):
        schedule = NoiseSchedule.linear(steps=50)
        product = 1.0
        for i, beta in enumerate(schedule.betas):
            product *= 1.0 - beta
            assert abs(schedule.alpha_bars[i] - product) <= 1e-12

    def test_default_schedule_endpoints(self):
        schedule = NoiseSchedule.linear()
        bars = schedule.alpha_bars
        assert bars[0] > 0.999          # first step barely noises
        assert bars[-1] < 1e-3          # last step is near pure noise
        assert (np.diff(bars) < 0).all()  # strictly decreasing

    def test_invalid_betas_rejected(self):
        with pytest.raises(ScheduleError):
            NoiseSchedule(betas=np.array([0.0, 0.1]))
        with pytest.raises(ScheduleError):
            NoiseSchedule(betas=np.array([0.5, 1.0]))
        with pytest.raises(ScheduleError):
            NoiseSchedule(betas=np.zeros((2, 2)))

    def test_alpha_bar_lookup_range(self):
        schedule = NoiseSchedule.linear(steps=10)
        assert schedule.alpha_bar(0) == 1.0
        with pytest.raises(ScheduleError):
            schedule.alpha_bar(11)


class TestForwardDiffuse:
    def test_alpha_bar_one_is_identity(self):
        x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(x0)
        assert torch.equal(diffuse_with_alpha_bar(x0, 1.0, eps), x0)

    def test_alpha_bar_zero_is_pure_noise(self):
        x0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(x0)
        assert torch.equal(diffuse_with_alpha_bar(x0, 0.0, eps), eps)

    def test_t_out_of_range(self):
        schedule = NoiseSchedule.linear(steps=10)
        x0 = torch.zeros(1, 1, 2, 2)
        with pytest.raises(ScheduleError):
            forward_diffuse(x0, 0, torch.zeros_like(x0), schedule)
        with pytest.raises(ScheduleError):
            forward_diffuse(x0, 11, torch.zeros_like(x0), schedule)

    def test_monte_carlo_marginal_moments(self):
        schedule = NoiseSchedule.linear(steps=100)
        t = 60
        a = float(schedule.alpha_bar(t))
        gen = torch.Generator().manual_seed(0)
        n = 100_000
        x0 = torch.zeros(n)
        eps = torch.randn(n, generator=gen)
        x_t = forward_diffuse(x0.reshape(n, 1, 1, 1), t, eps.reshape(n, 1, 1, 1), schedule)
        values = x_t.flatten()
        target_var = 1.0 - a
        mean_sigma = math.sqrt(target_var / n)
        var_sigma = target_var * math.sqrt(2.0 / (n - 1))
        assert abs(float(values.mean())) <= 3 * mean_sigma
        assert abs(float(values.var(unbiased=True)) - target_var) <= 3 * var_sigma

    def test_marginal_consistency_of_composition(self):
        # forward to s, then conditionally to t, matches the direct marginal
        schedule = NoiseSchedule.linear(steps=100)
        s, t = 30, 80
        a_s = float(schedule.alpha_bar(s))
        a_t = float(schedule.alpha_bar(t))
        gen = torch.Generator().manual_seed(1)
        n = 100_000
        x0 = torch.full((n,), 0.7)
        x_s = math.sqrt(a_s) * x0 + math.sqrt(1 - a_s) * torch.randn(n, generator=gen)
        ratio = a_t / a_s
        x_t = math.sqrt(ratio) * x_s + math.sqrt(1 - ratio) * torch.randn(n, generator=gen)
        target_mean = math.sqrt(a_t) * 0.7
        target_var = 1.0 - a_t
        mean_sigma = math.sqrt(target_var / n)
        var_sigma = target_var * math.sqrt(2.0 / (n - 1))
        assert abs(float(x_t.mean()) - target_mean) <= 3 * mean_sigma
        assert abs(float(x_t.var(unbiased=True)) - target_var) <= 3 * var_sigma


class TestCondition:
    def test_vector_condition_validated(self):
        cond = Condition(vector=np.array([1.0, 2.0]))
        assert not cond.null_flag
        with pytest.raises(DiffusionError):
            Condition(vector=np.array([np.inf, 0.0]))
        with pytest.raises(DiffusionError):
            Condition(vector=np.zeros((2, 2)))

    def test_null_condition_has_no_vector(self):
        assert Condition.null().vector is None
        with pytest.raises(DiffusionError):
            Condition(vector=np.zeros(3), null_flag=True)

    def test_dropout_rate_three_sigma(self):
        rng = np.random.default_rng(0)
        n = 10_000
        mask = apply_condition_dropout(n, 0.2, rng)
        sigma = math.sqrt(0.2 * 0.8 / n)
        assert abs(mask.mean() - 0.2) <= 3 * sigma


class _ConstantModel(torch.nn.Module):
    """Returns `value` when conditioned, `null_value` when unconditional."""

    def __init__(self, value, null_value):
        super().__init__()
        self.value = value
        self.null_value = null_value

    def forward(self, x, t, cond=None, null_mask=None):
        return self.null_value if cond is None else self.value


class TestCFG:
    def setup_method(self):
        self.x = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        self.cond = torch.zeros(1, 4, dtype=torch.float64)

    def test_omega_zero_identity(self):
        value = torch.randn(1, 1, 2, 2, dtype=torch.float64)
        model = _ConstantModel(value, torch.zeros_like(value))
        out = cfg_predict(model, self.x, 1, self.cond, omega=0.0)
        assert torch.equal(out, value)

    def test_equal_branches_cancel(self):
        value = torch.randn(1, 1, 2, 2, dtype=torch.float64)
        model = _ConstantModel(value, value)
        out = cfg_predict(model, self.x, 1, self.cond, omega=3.7)
        assert torch.allclose(out, value, atol=1e-12)

    def test_arithmetic_example(self):
        ones = torch.ones(1, 1, 2, 2, dtype=torch.float64)
        model = _ConstantModel(ones, torch.zeros_like(ones))
        out = cfg_predict(model, self.x, 1, self.cond, omega=2.0)
        assert torch.equal(out, 3.0 * ones)

    def test_affine_in_omega(self):
        value = torch.randn(1, 1, 3, 3, dtype=torch.float64)
        null = torch.randn(1, 1, 3, 3, dtype=torch.float64)
        model = _ConstantModel(value, null)
        for omega1, omega2 in [(0.0, 2.0), (1.0, 5.0), (0.3, 0.7)]:
            lhs = cfg_predict(model, self.x, 1, self.cond, omega1) + cfg_predict(
                model, self.x, 1, self.cond, omega2
            )
            rhs = 2.0 * cfg_predict(model, self.x, 1, self.cond, (omega1 + omega2) / 2)
            assert (lhs - rhs).abs().max() <= 1e-12


class _ZeroModel(torch.nn.Module):
    def forward(self, x, t, cond=None, null_mask=None):
        return torch.zeros_like(x)


class _PerfectOracle(torch.nn.Module):
    """Recovers the injected noise from x_t, knowing x0 and the schedule."""

    def __init__(self, x0, schedule):
        super().__init__()
        self.x0 = x0
        self.schedule = schedule

    def forward(self, x, t, cond=None, null_mask=None):
        a = torch.from_numpy(np.asarray(self.schedule.alpha_bar(t.numpy()))).float()
        a = a.reshape(-1, 1, 1, 1)
        return (x - torch.sqrt(a) * self.x0) / torch.sqrt(1.0 - a)


class TestDDMLoss:
    def test_zero_model_gives_unit_loss(self):
        schedule = NoiseSchedule.linear(steps=100)
        x0 = torch.zeros(64, 1, 16, 16)
        cond = torch.zeros(64, 4)
        loss, _ = ddm_loss(
            x0, cond, _ZeroModel(), schedule,
            rng=np.random.default_rng(0),
            noise_generator=torch.Generator().manual_seed(0),
        )
        assert abs(float(loss) - 1.0) < 0.05

    def test_perfect_oracle_gives_zero_loss(self):
        schedule = NoiseSchedule.linear(steps=50)
        gen = torch.Generator().manual_seed(1)
        x0 = torch.randn(8, 2, 4, 4, generator=gen)
        model = _PerfectOracle(x0, schedule)
        loss, _ = ddm_loss(
            x0, torch.zeros(8, 4), model, schedule,
            rng=np.random.default_rng(1), noise_generator=gen,
        )
        assert float(loss) < 1e-10

    def test_reported_dropout_mask_matches_rate(self):
        schedule = NoiseSchedule.linear(steps=10)
        x0 = torch.zeros(512, 1, 4, 4)
        dropped = 0
        rng = np.random.default_rng(3)
        gen = torch.Generator().manual_seed(3)
        for _ in range(20):
            _, info = ddm_loss(
                x0, torch.zeros(512, 4), _ZeroModel(), schedule,
                drop_prob=0.2, rng=rng, noise_generator=gen,
            )
            dropped += int(info["dropped"].sum())
        n = 512 * 20
        sigma = math.sqrt(0.2 * 0.8 / n)
        assert abs(dropped / n - 0.2) <= 3 * sigma

    def test_nan_aborts(self):
        schedule = NoiseSchedule.linear(steps=10)
        x0 = torch.full((2, 1, 4, 4), torch.nan)

        class _Echo(torch.nn.Module):
            def forward(self, x, t, cond=None, null_mask=None):
                return x

        with pytest.raises(DiffusionDivergenceError):
            ddm_loss(x0, torch.zeros(2, 4), _Echo(), schedule)


class TestDenoiser:
    def setup_method(self):
        torch.manual_seed(0)
        self.config = DenoiserConfig(
            in_channels=3, cond_dim=8, base_channels=8, channel_mults=(1, 2), emb_dim=16
        )
        self.model = ConditionalDenoiser(self.config).eval()

    def test_output_shape_matches_input(self):
        x = torch.randn(2, 3, 16, 16)
        out = self.model(x, torch.tensor([1, 5]), torch.randn(2, 8))
        assert out.shape == x.shape

    def test_null_mask_equals_unconditional(self):
        x = torch.randn(2, 3, 16, 16)
        t = torch.tensor([3, 3])
        cond = torch.randn(2, 8)
        with torch.no_grad():
            uncond = self.model(x, t, None)
            masked = self.model(x, t, cond, null_mask=np.array([True, True]))
        assert torch.equal(uncond, masked)

    def test_null_token_is_learned_not_zero(self):
        assert self.model.null_condition.requires_grad
        assert not torch.equal(self.model.null_condition, torch.zeros(8))

    def test_sinusoidal_embedding_shape(self):
        emb = sinusoidal_embedding(torch.tensor([1, 2, 3]), 16)
        assert emb.shape == (3, 16)
        assert torch.isfinite(emb).all()


class TestSampling:
    def setup_method(self):
        torch.manual_seed(0)
        config = DenoiserConfig(
            in_channels=1, cond_dim=4, base_channels=8, channel_mults=(1, 2), emb_dim=16
        )
        self.model = ConditionalDenoiser(config).eval()
        self.schedule = NoiseSchedule.linear(steps=40)

    def test_seed_determinism(self):
        cond = torch.randn(2, 4, generator=torch.Generator().manual_seed(5))
        runs = [
            sample_tensor(
                self.model, self.schedule, (2, 1, 8, 8), cond, omega=1.5,
                generator=torch.Generator().manual_seed(9),
            )
            for _ in range(2)
        ]
        assert torch.equal(runs[0], runs[1])

    def test_strided_schedule_terminates_with_finite_output(self):
        out = sample_tensor(
            self.model, self.schedule, (1, 1, 8, 8), None, steps=7,
            generator=torch.Generator().manual_seed(0),
        )
        assert torch.isfinite(out).all()

    def test_strided_timesteps_structure(self):
        steps = strided_timesteps(100, 10)
        assert steps[0] == 100 and steps[-1] == 1
        assert all(a > b for a, b in zip(steps, steps[1:]))
        assert strided_timesteps(5, None) == [5, 4, 3, 2, 1]
        with pytest.raises(DiffusionError):
            strided_timesteps(10, 0)


class TestTraining:
    def test_loss_decreases_and_ema_tracks(self):
        torch.manual_seed(0)
        config = DenoiserConfig(
            in_channels=1, cond_dim=4, base_channels=8, channel_mults=(1, 2), emb_dim=16
        )
        model = ConditionalDenoiser(config)
        schedule = NoiseSchedule.linear(steps=50)
        rng = np.random.default_rng(0)
        x0 = rng.uniform(-1, 1, size=(32, 1, 8, 8)).astype(np.float32)
        cond = rng.standard_normal((32, 4)).astype(np.float32)
        trained, ema, history = train_diffusion(
            x0, cond, model, schedule,
            DiffusionTrainConfig(epochs=8, batch_size=8, lr=1e-3, seed=0),
            val_x0=x0[:8], val_cond=cond[:8],
        )
        assert history["val_loss"][-1] < history["val_loss"][0]
        ema_params = torch.cat([p.flatten() for p in ema.parameters()])
        live_params = torch.cat([p.flatten() for p in trained.parameters()])
        assert torch.isfinite(ema_params).all()
        assert not torch.equal(ema_params, live_params)

    def test_empty_or_misaligned_data_rejected(self):
        config = DenoiserConfig(in_channels=1, cond_dim=4, base_channels=8, channel_mults=(1,))
        model = ConditionalDenoiser(config)
        schedule = NoiseSchedule.linear(steps=10)
        with pytest.raises(DiffusionError):
            train_diffusion(
                np.zeros((0, 1, 4, 4), np.float32), np.zeros((0, 4), np.float32),
                model, schedule, DiffusionTrainConfig(epochs=1),
            )
        with pytest.raises(DiffusionError):
            train_diffusion(
                np.zeros((4, 1, 4, 4), np.float32), np.zeros((3, 4), np.float32),
                model, schedule, DiffusionTrainConfig(epochs=1),
            )
