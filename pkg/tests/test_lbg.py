import numpy as np
import pytest

from core.errors import ConfigError, ContractError, DimensionError
from core.lbg import (STAGE_A, STAGE_B, LossWeights, PerceptualExtractor, StageSchedule, TrainState, bound_terms,
                      generate_reconstructions, loss_bound, loss_f16, loss_rec, regularizer_tv, stage_a_step,
                      stage_b_step)
from core.optim import AdamW
from core.pipeline import super_resolve
from core.rng import CounterRng
from core.tensorcore import Tensor, backward, grad, gradcheck, tmean
from core.vae import VaeModel, free_energy, init_f16_from_f8


def _build_state(tiny_config, seed=0):
    ref = VaeModel(tiny_config, seed=seed)
    ref.set_trainable(False)
    lb = ref.clone()
    f16 = init_f16_from_f8(ref, seed=seed + 1)
    return TrainState(
        f16=f16, ref=ref, lb=lb,
        perceptual=PerceptualExtractor(3, (4, 4, 4), seed=seed),
        opt_theta=AdamW(f16.trainable_parameters()),
        opt_phi=AdamW(lb.named_parameters()),
        scale=4, seed=seed)


@pytest.fixture
def state(float64, tiny_config):
    return _build_state(tiny_config)


@pytest.fixture
def batch():
    r = CounterRng(99, "batch")
    return r.uniform((2, 3, 8, 8)), r.uniform((2, 3, 32, 32))


def _perturbed(model, scale=0.05, seed=3):
    twin = model.clone()
    r = CounterRng(seed, "perturb")
    for _, p in twin.named_parameters():
        p.data = p.data + scale * r.normal(p.shape)
    return twin


# =============================================================================
# Loss weights and schedule
# =============================================================================

class TestConfiguration:

    @pytest.mark.parametrize("kwargs", [
        {"beta": 0.5}, {"lambda_b": -1.0}, {"sigma_rec": 0.0}, {"mc_samples": 0},
        {"bound_clip": 0.0}, {"reduction": "max"},
    ])
    def test_invalid_weights(self, kwargs):
        with pytest.raises(ConfigError):
            LossWeights(**kwargs)

    def test_alternating_schedule(self):
        schedule = StageSchedule(a_steps=2, b_steps=1)
        assert [schedule.stage_for(k) for k in range(6)] == [STAGE_A, STAGE_A, STAGE_B] * 2

    def test_schedule_without_stage_b(self):
        assert {StageSchedule(1, 0).stage_for(k) for k in range(5)} == {STAGE_A}

    def test_invalid_schedule(self):
        with pytest.raises(ConfigError):
            StageSchedule(a_steps=0)


# =============================================================================
# Reconstruction loss
# =============================================================================

class TestLossRec:

    def test_zero_for_identical_images(self, state, batch):
        y = Tensor(batch[1])
        assert loss_rec(y, batch[1], LossWeights(), state.perceptual).item() == 0.0

    def test_pixel_term_is_mean_squared_error(self, state, batch):
        a = CounterRng(1).uniform(batch[1].shape)
        w = LossWeights(lambda_perc=0.0)
        expected = np.mean((a - batch[1]) ** 2)
        assert loss_rec(Tensor(a), batch[1], w, state.perceptual).item() == pytest.approx(expected, rel=1e-12)

    def test_sum_reduction(self, state, batch):
        a = CounterRng(1).uniform(batch[1].shape)
        w = LossWeights(lambda_perc=0.0, reduction="sum")
        expected = np.sum((a - batch[1]) ** 2)
        assert loss_rec(Tensor(a), batch[1], w, state.perceptual).item() == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self, state):
        with pytest.raises(DimensionError):
            loss_rec(Tensor(np.zeros((1, 3, 8, 8))), np.zeros((1, 3, 16, 16)), LossWeights(), state.perceptual)

    def test_gradient(self, state):
        target = CounterRng(2).uniform((1, 3, 8, 8))
        w = LossWeights(lambda_perc=0.5)
        fn = lambda y: loss_rec(y, Tensor(target), w, state.perceptual)
        assert gradcheck(fn, [CounterRng(3).uniform((1, 3, 8, 8))]) < 1e-4


# =============================================================================
# Bound loss
# =============================================================================

class TestLossBound:

    def test_identical_models_give_zero(self, state, batch):
        y = Tensor(batch[1])
        assert loss_bound(y, state.ref, state.lb, rng=CounterRng(5)).item() == 0.0

    def test_no_gradient_reaches_either_vae(self, state, batch):
        lb = _perturbed(state.lb)
        state.ref.set_trainable(True)
        lb.set_trainable(True)
        y = Tensor(batch[1], requires_grad=True)
        backward(loss_bound(y, state.ref, lb, rng=CounterRng(5)))
        assert all(p.grad is None for p in state.ref.parameters())
        assert all(p.grad is None for p in lb.parameters())
        assert all(p.requires_grad for p in state.ref.parameters() + lb.parameters())
        assert y.grad is not None and np.any(y.grad != 0.0)

    def test_gradient_is_difference_of_free_energy_gradients(self, state, batch):
        lb = _perturbed(state.lb)
        y = Tensor(batch[1], requires_grad=True)
        (g_bound,) = grad(loss_bound(y, state.ref, lb, rng=CounterRng(5, "bound")), [y])

        noise = [CounterRng(5, "bound").normal((2, 2, 8, 8))]
        per_element = 1.0 / (3 * 32 * 32)
        f_ref = free_energy(state.ref, y, noise=noise).total * per_element
        f_lb = free_energy(lb, y, noise=noise).total * per_element
        (g_ref,) = grad(tmean(f_ref), [y])
        (g_lb,) = grad(tmean(f_lb), [y])
        np.testing.assert_allclose(g_bound, g_ref - g_lb, rtol=1e-9, atol=1e-15)

    def test_needs_rng(self, state, batch):
        with pytest.raises(ContractError):
            loss_bound(Tensor(batch[1]), state.ref, state.lb)

    def test_per_sample_clip(self, state, batch):
        lb = _perturbed(state.lb, scale=0.5)
        terms = bound_terms(Tensor(batch[1]), state.ref, lb, 1, 1.0, CounterRng(5), clip_value=1e-9)
        assert terms.clipped > 0
        assert abs(terms.loss.item()) <= 1e-9
        assert terms.f_ref.shape == terms.f_lb.shape == (2,)


# =============================================================================
# Total-variation regulariser
# =============================================================================

class TestRegularizer:

    def test_constant_image(self, float64):
        assert regularizer_tv(Tensor(np.full((2, 3, 8, 8), 0.7))).item() == 0.0

    def test_vertical_step_edge(self, float64):
        image = np.zeros((1, 1, 6, 5))
        image[..., 2:] = 1.0
        eps = 1e-6
        expected = (np.sqrt(1.0 + eps) - np.sqrt(eps)) / 4
        value = regularizer_tv(Tensor(image), eps).item()
        assert value == pytest.approx(expected, rel=1e-12)
        assert value == pytest.approx(1 / 4, abs=2e-3)

    def test_gradient(self):
        image = CounterRng(8).uniform((1, 2, 5, 5))
        assert gradcheck(regularizer_tv, [image]) < 1e-4

    def test_rank_one_rejected(self, float64):
        with pytest.raises(DimensionError):
            regularizer_tv(Tensor(np.zeros(5)))


# =============================================================================
# Full generator objective
# =============================================================================

class TestLossF16:

    def test_reduces_to_reconstruction_loss(self, state, batch):
        y_hat = super_resolve(state.f16, batch[0], 4)
        w = LossWeights(lambda_b=0.0, lambda_reg=0.0)
        total, parts = loss_f16(y_hat, batch[1], state, w)
        assert total.item() == loss_rec(y_hat, batch[1], w, state.perceptual).item()
        assert parts["F_ref"] is None

    def test_all_weights_zero(self, state, batch):
        y_hat = super_resolve(state.f16, batch[0], 4)
        w = LossWeights(lambda_mse=0.0, lambda_perc=0.0, lambda_b=0.0, lambda_reg=0.0)
        assert loss_f16(y_hat, batch[1], state, w)[0].item() == 0.0

    def test_breakdown_adds_up(self, state, batch):
        state.lb = _perturbed(state.lb)
        y_hat = super_resolve(state.f16, batch[0], 4)
        w = LossWeights()
        total, parts = loss_f16(y_hat, batch[1], state, w, CounterRng(1))
        combined = parts["loss_rec"] + w.lambda_b * parts["loss_bound"] + w.lambda_reg * parts["loss_reg"]
        assert total.item() == pytest.approx(combined, rel=1e-12)
        assert parts["loss_total"] == total.item()

    def test_two_stage_backward_matches_direct_gradient(self, state, batch):
        state.lb = _perturbed(state.lb)
        params = [p for _, p in state.f16.trainable_parameters()]
        y_hat = super_resolve(state.f16, batch[0], 4)
        total, _ = loss_f16(y_hat, batch[1], state, LossWeights(), CounterRng(1))
        direct = grad(total, params)
        (g_y,) = grad(total, [y_hat])
        chained = grad(y_hat, params, grad_output=g_y)
        for a, b in zip(direct, chained):
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-14)


# =============================================================================
# Stage steps
# =============================================================================

class TestStageA:

    def test_only_decoder_changes(self, state, batch):
        state.lb.set_trainable(True)
        encoder = state.f16.group_checksum("encoder")
        decoder = state.f16.group_checksum("decoder.trunk")
        ref, lb = state.ref.checksum(), state.lb.checksum()
        for _ in range(100):
            record = stage_a_step(state, batch, LossWeights(), lr=1e-3)
            assert record.stage == STAGE_A and not record.skipped
        assert state.f16.group_checksum("encoder") == encoder
        assert state.f16.group_checksum("decoder.trunk") != decoder
        assert state.ref.checksum() == ref and state.lb.checksum() == lb
        assert state.step == 100

    def test_zero_learning_rate_is_a_no_op(self, state, batch):
        before = state.f16.checksum()
        record = stage_a_step(state, batch, LossWeights(), lr=0.0)
        assert state.f16.checksum() == before
        assert np.isfinite(record.loss_total) and record.grad_norm > 0

    def test_small_steps_descend(self, float64, tiny_config):
        w = LossWeights(lambda_perc=0.0, lambda_b=0.0, lambda_reg=0.0)
        descended = 0
        for seed in range(20):
            state = _build_state(tiny_config, seed)
            r = CounterRng(seed, "descent")
            lr_frames, hr_frames = r.uniform((2, 3, 8, 8)), r.uniform((2, 3, 32, 32))
            before = stage_a_step(state, (lr_frames, hr_frames), w, lr=1e-5).loss_total
            after = loss_rec(super_resolve(state.f16, lr_frames, 4), hr_frames, w, state.perceptual).item()
            descended += after < before
        assert descended >= 19

    def test_non_finite_loss_skips_update(self, state, batch):
        before = state.f16.checksum()
        hr = batch[1].copy()
        hr[0, 0, 0, 0] = np.nan
        record = stage_a_step(state, (batch[0], hr), LossWeights(), lr=1e-3)
        assert record.skipped
        assert state.f16.checksum() == before
        assert state.step == 1


class TestStageB:

    def test_only_lower_bound_vae_changes(self, state, batch):
        f16, ref, lb = state.f16.checksum(), state.ref.checksum(), state.lb.checksum()
        y_hat = generate_reconstructions(state, batch[0])
        record = stage_b_step(state, y_hat, LossWeights(), lr=1e-3)
        assert record.stage == STAGE_B and not record.skipped
        assert state.f16.checksum() == f16 and state.ref.checksum() == ref
        assert state.lb.checksum() != lb
        assert not any(p.requires_grad for p in state.lb.parameters())

    def test_zero_learning_rate_is_a_no_op(self, state, batch):
        lb = state.lb.checksum()
        stage_b_step(state, generate_reconstructions(state, batch[0]), LossWeights(), lr=0.0)
        assert state.lb.checksum() == lb

    def test_non_finite_input_skips_update(self, state, batch):
        lb = state.lb.checksum()
        y_hat = generate_reconstructions(state, batch[0])
        y_hat[1, 2, 3, 4] = np.inf
        assert stage_b_step(state, y_hat, LossWeights(), lr=1e-3).skipped
        assert state.lb.checksum() == lb

    def test_repeated_updates_do_not_loosen_the_bound(self, state, batch):
        y_hat = generate_reconstructions(state, batch[0])
        w = LossWeights()
        values = [stage_b_step(state, y_hat, w, lr=1e-3, rng=CounterRng(0, "fixed")).F_lb for _ in range(60)]
        first, last = np.mean(values[:10]), np.mean(values[-10:])
        assert last <= first + 0.05 * abs(first)
