"""Attack tests: hand-replicated update steps on a linear victim, budget
invariants, bit-identical degeneracies between attack variants, and the
randomized-transform gradient stream."""

import pytest
import torch
import torch.nn.functional as F

from fpba.attacks import (
    AttackConfig,
    ensemble_attack,
    fpba,
    ifgsm,
    mifgsm,
    pgd,
    project,
    spectrum_attack,
)
from fpba.bayes import AppendedHead, BayesEnsemble, PostTrainConfig, post_train
from fpba.detectors import Detector, build_detector
from fpba.errors import (
    CapabilityError,
    InvalidInputError,
    InvalidParameterError,
    PreconditionError,
)
from fpba.frequency import SpectrumTransformParams, spectrum_transform


class LinearVictim(Detector):
    """Logit = <w, x> + b on raw pixels; closed-form input gradients."""

    arch = "linear-victim"

    def __init__(self, size=8, seed=0, scale=1.0, bias=0.0):
        super().__init__(input_size=size, feature_dim=3 * size * size, mean=(0.0,) * 3, std=(1.0,) * 3)
        g = torch.Generator().manual_seed(seed)
        w = torch.randn(3 * size * size, generator=g) * scale
        with torch.no_grad():
            self.classifier.weight.copy_(w.view(1, -1))
            self.classifier.bias.fill_(bias)

    def features(self, x):
        return self.preprocess(x).flatten(1)


def _identity_cfg(**kw):
    base = dict(
        epsilon=8 / 255,
        alpha=2 / 255,
        iterations=3,
        spectrum_samples=1,
        spectrum=SpectrumTransformParams.identity(),
        random_start=False,
    )
    base.update(kw)
    return AttackConfig(**base)


@pytest.fixture(scope="module")
def victim():
    v = LinearVictim(size=8, seed=0)
    v.eval()
    return v


@pytest.fixture(scope="module")
def batch():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(6, 3, 8, 8, generator=g)
    y = torch.tensor([0, 1, 0, 1, 0, 1])
    return x, y


class TestProject:
    def test_inside_ball_untouched(self):
        x = torch.rand(2, 3, 4, 4, generator=torch.Generator().manual_seed(0)) * 0.5 + 0.25
        x_adv = x + 0.01
        out = project(x_adv, x, 0.05)
        assert torch.equal(out, x_adv)

    def test_clips_to_ball_and_range(self):
        x = torch.tensor([[[[0.02, 0.5], [0.98, 0.5]]]])
        x_adv = torch.tensor([[[[-0.5, 0.9], [2.0, 0.51]]]])
        out = project(x_adv, x, 0.1)
        want = torch.tensor([[[[0.0, 0.6], [1.0, 0.51]]]])
        assert torch.allclose(out, want)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            project(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 5), 0.1)

    def test_negative_epsilon(self):
        with pytest.raises(InvalidParameterError):
            project(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4), -0.1)


class TestIfgsm:
    def test_single_step_matches_hand_formula(self, victim, batch):
        x, y = batch
        cfg = AttackConfig(epsilon=8 / 255, alpha=8 / 255, iterations=1, random_start=False)
        res = ifgsm(victim, x, y, cfg)
        with torch.no_grad():
            z = victim(x)
            # d/dx sum BCE = (sigmoid(z) - y) * w
            coeff = (torch.sigmoid(z) - y.float()).view(-1, 1)
            grad = (coeff * victim.classifier.weight).view(x.shape)
        want = project(x + cfg.alpha * grad.sign(), x, cfg.epsilon)
        assert torch.equal(res.adversarial, want)

    def test_budget_respected(self, victim, batch):
        x, y = batch
        cfg = AttackConfig(epsilon=6 / 255, alpha=2 / 255, iterations=5, random_start=False)
        res = ifgsm(victim, x, y, cfg)
        assert res.linf.max().item() <= cfg.epsilon + 1e-6
        assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1

    def test_increases_loss(self, victim, batch):
        x, y = batch
        res = ifgsm(victim, x, y, AttackConfig(iterations=5, random_start=False))
        with torch.no_grad():
            before = F.binary_cross_entropy_with_logits(victim(x), y.float())
            after = F.binary_cross_entropy_with_logits(victim(res.adversarial), y.float())
        assert after > before

    def test_epsilon_zero_identity(self, victim, batch):
        x, y = batch
        res = ifgsm(victim, x, y, AttackConfig(epsilon=0.0, alpha=0.0, iterations=3))
        assert torch.equal(res.adversarial, x)

    def test_deterministic(self, victim, batch):
        x, y = batch
        cfg = AttackConfig(iterations=3, random_start=False)
        assert torch.equal(ifgsm(victim, x, y, cfg).adversarial, ifgsm(victim, x, y, cfg).adversarial)

    def test_input_validation(self, victim):
        y = torch.tensor([0])
        with pytest.raises(InvalidInputError):
            ifgsm(victim, torch.rand(1, 3, 8, 8) + 0.5, y, AttackConfig())  # exceeds [0, 1]
        with pytest.raises(InvalidInputError):
            ifgsm(victim, torch.rand(2, 3, 8, 8), y, AttackConfig())  # label count
        with pytest.raises(InvalidInputError):
            ifgsm(victim, torch.rand(3, 8, 8), torch.tensor([0]), AttackConfig())  # rank

    def test_capability_error(self, batch):
        class Detached(torch.nn.Module):
            def forward(self, x):
                return x.detach().sum(dim=(1, 2, 3))

        x, y = batch
        with pytest.raises(CapabilityError):
            ifgsm(Detached(), x, y, AttackConfig())


class TestMifgsm:
    def test_two_step_momentum_hand_replication(self, victim, batch):
        x, y = batch
        cfg = AttackConfig(epsilon=8 / 255, alpha=2 / 255, iterations=2, momentum=1.0, random_start=False)
        res = mifgsm(victim, x, y, cfg)

        def grad_at(adv):
            xg = adv.clone().requires_grad_(True)
            loss = F.binary_cross_entropy_with_logits(victim(xg), y.float(), reduction="sum")
            (g,) = torch.autograd.grad(loss, xg)
            return g

        adv = x.clone()
        buf = torch.zeros_like(x)
        for _ in range(2):
            g = grad_at(adv)
            norm = g.abs().flatten(1).sum(dim=1).view(-1, 1, 1, 1)
            g_hat = torch.where(norm > 0, g / norm.clamp(min=1e-12), g)
            buf = cfg.momentum * buf + g_hat
            adv = project(adv + cfg.alpha * buf.sign(), x, cfg.epsilon)
        assert torch.equal(res.adversarial, adv)

    def test_zero_gradient_is_safe(self, batch):
        flat = LinearVictim(size=8, seed=0, scale=0.0)  # constant logit, zero grads
        flat.eval()
        x, y = batch
        res = mifgsm(flat, x, y, AttackConfig(iterations=3, momentum=1.0))
        assert torch.isfinite(res.adversarial).all()
        assert torch.equal(res.adversarial, x)  # sign(0) steps never move

    def test_budget(self, victim, batch):
        x, y = batch
        res = mifgsm(victim, x, y, AttackConfig(epsilon=4 / 255, alpha=1 / 255, iterations=6))
        assert res.linf.max().item() <= 4 / 255 + 1e-6


class TestPgd:
    def test_no_random_start_equals_ifgsm(self, victim, batch):
        x, y = batch
        cfg = AttackConfig(iterations=4, random_start=False)
        a = pgd(victim, x, y, cfg)
        b = ifgsm(victim, x, y, cfg)
        assert torch.equal(a.adversarial, b.adversarial)
        assert torch.equal(a.success, b.success)

    def test_random_start_inside_budget(self, victim, batch):
        x, y = batch
        cfg = AttackConfig(epsilon=8 / 255, alpha=2 / 255, iterations=1, random_start=True, rng_seed=3)
        res = pgd(victim, x, y, cfg)
        assert res.linf.max().item() <= cfg.epsilon + 1e-6
        assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1

    def test_random_start_seed_reproducible(self, victim, batch):
        x, y = batch
        cfg = AttackConfig(iterations=2, random_start=True, rng_seed=9)
        assert torch.equal(pgd(victim, x, y, cfg).adversarial, pgd(victim, x, y, cfg).adversarial)
        other = AttackConfig(iterations=2, random_start=True, rng_seed=10)
        assert not torch.equal(pgd(victim, x, y, cfg).adversarial, pgd(victim, x, y, other).adversarial)


class TestSpectrumAttack:
    def test_degenerates_to_ifgsm(self, victim, batch):
        x, y = batch
        cfg = _identity_cfg(iterations=3)
        a = spectrum_attack(victim, x, y, cfg)
        b = ifgsm(victim, x, y, cfg)
        assert torch.equal(a.adversarial, b.adversarial)

    def test_single_iteration_matches_manual_transform_average(self, victim, batch):
        x, y = batch
        params = SpectrumTransformParams(rho=0.4, sigma_noise=0.03, rng_seed=21)
        cfg = AttackConfig(
            epsilon=8 / 255, alpha=8 / 255, iterations=1, spectrum_samples=3,
            spectrum=params, random_start=False,
        )
        res = spectrum_attack(victim, x, y, cfg)
        # Replay the same three draws from an identically seeded stream.
        gen = params.make_generator()
        xg = x.clone().requires_grad_(True)
        total = None
        for _ in range(3):
            zt = spectrum_transform(xg, params, gen)
            loss = F.binary_cross_entropy_with_logits(victim(zt), y.float(), reduction="sum") / 3
            total = loss if total is None else total + loss
        (g,) = torch.autograd.grad(total, xg)
        want = project(x + cfg.alpha * g.sign(), x, cfg.epsilon)
        assert torch.allclose(res.adversarial, want, atol=1e-7)

    def test_iterations_consume_fresh_draws(self, victim, batch):
        # If the stream were reset per iteration, two iterations at alpha=0 each
        # would see identical gradients; instead later iterations differ.
        x, y = batch
        params = SpectrumTransformParams(rho=0.5, sigma_noise=0.05, rng_seed=4)
        one = spectrum_attack(victim, x, y, AttackConfig(
            iterations=1, spectrum_samples=2, spectrum=params, random_start=False))
        # Repeating from the final iterate with a fresh attack (stream reseeded)
        # is not the same as continuing the original two-iteration run.
        two = spectrum_attack(victim, x, y, AttackConfig(
            iterations=2, spectrum_samples=2, spectrum=params, random_start=False))
        resumed = spectrum_attack(victim, one.adversarial, y, AttackConfig(
            iterations=1, spectrum_samples=2, spectrum=params, random_start=False))
        assert not torch.equal(two.adversarial, resumed.adversarial)

    def test_nested_mode_differs(self, victim, batch):
        x, y = batch
        params = SpectrumTransformParams(rho=0.5, sigma_noise=0.05, rng_seed=5)
        kw = dict(iterations=2, spectrum_samples=3, spectrum=params, random_start=False)
        flat = spectrum_attack(victim, x, y, AttackConfig(**kw))
        nested = spectrum_attack(victim, x, y, AttackConfig(nested_spectrum=True, **kw))
        assert not torch.equal(flat.adversarial, nested.adversarial)

    def test_budget_under_heavy_transform(self, victim, batch):
        x, y = batch
        res = spectrum_attack(victim, x, y, AttackConfig(iterations=4, spectrum_samples=4))
        assert res.linf.max().item() <= 8 / 255 + 1e-6
        assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1


class TestEnsembleAttack:
    def test_single_model_equals_ifgsm(self, victim, batch):
        x, y = batch
        cfg = AttackConfig(iterations=3, random_start=False)
        a = ensemble_attack([victim], x, y, cfg)
        b = ifgsm(victim, x, y, cfg)
        assert torch.equal(a.adversarial, b.adversarial)

    def test_two_models_budget_and_determinism(self, batch):
        x, y = batch
        models = [LinearVictim(size=8, seed=s) for s in (0, 7)]
        for m in models:
            m.eval()
        cfg = AttackConfig(iterations=3)
        a = ensemble_attack(models, x, y, cfg)
        b = ensemble_attack(models, x, y, cfg)
        assert torch.equal(a.adversarial, b.adversarial)
        assert a.linf.max().item() <= cfg.epsilon + 1e-6

    def test_empty_model_list(self, batch):
        x, y = batch
        with pytest.raises(InvalidInputError):
            ensemble_attack([], x, y, AttackConfig())


@pytest.fixture(scope="module")
def zero_head_ensemble(victim):
    ens = BayesEnsemble(victim, [AppendedHead(victim.feature_dim) for _ in range(3)])
    ens.post_trained = True  # heads untouched: exact no-ops
    return ens


class TestFpba:
    def test_requires_post_training(self, victim, batch):
        x, y = batch
        raw = BayesEnsemble(victim, [AppendedHead(victim.feature_dim)])
        with pytest.raises(PreconditionError):
            fpba(raw, x, y, AttackConfig())

    def test_degenerates_to_ifgsm(self, zero_head_ensemble, victim, batch):
        x, y = batch
        cfg = _identity_cfg(iterations=3, head_count=1)
        a = fpba(zero_head_ensemble, x, y, cfg)
        b = ifgsm(victim, x, y, cfg)
        assert torch.equal(a.adversarial, b.adversarial)

    def test_head_count_validation(self, zero_head_ensemble, batch):
        x, y = batch
        with pytest.raises(InvalidParameterError):
            fpba(zero_head_ensemble, x, y, AttackConfig(head_count=4))

    def test_runs_on_sampled_ensemble(self, batch):
        import types

        x, y = batch
        base = build_detector("spatial-cnn", input_size=16, seed=0)
        base.eval()
        g = torch.Generator().manual_seed(2)
        xt = torch.rand(24, 3, 16, 16, generator=g)
        yt = (torch.arange(24) % 2).long()
        data = types.SimpleNamespace(split=lambda name: (xt, yt))
        ens = post_train(base, data, PostTrainConfig(heads=2, iterations=10, batch_size=8, seed=0))
        x16 = torch.rand(4, 3, 16, 16, generator=torch.Generator().manual_seed(3))
        y16 = torch.tensor([0, 1, 0, 1])
        res = fpba(ens, x16, y16, AttackConfig(iterations=2, spectrum_samples=2))
        assert res.adversarial.shape == x16.shape
        assert res.linf.max().item() <= 8 / 255 + 1e-6
        assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1

    def test_deterministic(self, zero_head_ensemble, batch):
        x, y = batch
        cfg = AttackConfig(iterations=2, spectrum_samples=2, rng_seed=6)
        a = fpba(zero_head_ensemble, x, y, cfg)
        b = fpba(zero_head_ensemble, x, y, cfg)
        assert torch.equal(a.adversarial, b.adversarial)

    def test_rejects_bare_detector(self, victim, batch):
        x, y = batch
        with pytest.raises(InvalidInputError):
            fpba(victim, x, y, AttackConfig())


class TestAttackConfig:
    def test_validation(self):
        with pytest.raises(InvalidParameterError):
            AttackConfig(epsilon=1.5)
        with pytest.raises(InvalidParameterError):
            AttackConfig(epsilon=4 / 255, alpha=8 / 255)
        with pytest.raises(InvalidParameterError):
            AttackConfig(alpha=-0.01)
        with pytest.raises(InvalidParameterError):
            AttackConfig(iterations=0)
        with pytest.raises(InvalidParameterError):
            AttackConfig(spectrum_samples=0)
        with pytest.raises(InvalidParameterError):
            AttackConfig(momentum=-1.0)
        with pytest.raises(InvalidParameterError):
            AttackConfig(head_count=0)

    def test_resolved_spectrum_defaults(self):
        cfg = AttackConfig(epsilon=4 / 255, alpha=1 / 255, rng_seed=11)
        p = cfg.resolved_spectrum()
        assert p.rho == 0.5
        assert p.sigma_noise == 4 / 255
        assert p.rng_seed == 11

    def test_explicit_spectrum_wins(self):
        params = SpectrumTransformParams(rho=0.2, sigma_noise=0.01, rng_seed=5)
        assert AttackConfig(spectrum=params).resolved_spectrum() is params

    def test_asr_property(self, victim, batch):
        x, y = batch
        res = ifgsm(victim, x, y, AttackConfig(iterations=5, random_start=False))
        assert res.asr == pytest.approx(100.0 * res.success.float().mean().item())
