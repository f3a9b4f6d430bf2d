"""Evasion attacks on real/fake detectors, spatial and spectral.

All attacks maximize the classification loss at the true labels inside an
L-infinity ball of radius epsilon around the clean pixels, intersected with
[0, 1]:

    x_adv <- project(x_adv + alpha * sign(g))

They differ in how the gradient estimate ``g`` is built:

- ``ifgsm``: the plain input gradient.
- ``mifgsm``: L1-normalized gradients accumulated with momentum.
- ``pgd``: ``ifgsm`` from a random point of the ball (the random start is the
  only difference, and is what lets it escape flat, saturated loss regions).
- ``spectrum_attack``: the gradient averaged over random spectrum
  transformations of the current iterate (a frequency-domain model ensemble).
- ``ensemble_attack``: the gradient of the mean loss over several models.
- ``fpba``: the hybrid attack over a posterior-head ensemble; per head, the
  spectrum-averaged gradient plus the plain spatial gradient, averaged over
  heads, sign taken last.

Every attack takes raw pixels in [0, 1], differentiates through the victim's
own preprocessing, and is deterministic for a fixed config.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .bayes import BayesEnsemble
from .detectors import Detector, _eval_mode, predict_labels
from .errors import (
    CapabilityError,
    InvalidInputError,
    InvalidParameterError,
    PreconditionError,
)
from .frequency import SpectrumTransformParams, spectrum_transform

__all__ = [
    "AttackConfig",
    "AttackResult",
    "project",
    "ifgsm",
    "mifgsm",
    "pgd",
    "spectrum_attack",
    "ensemble_attack",
    "fpba",
    "ATTACK_NAMES",
]


@dataclass(frozen=True)
class AttackConfig:
    """Shared attack budget and sampling knobs.

    ``epsilon``/``alpha`` are on the [0, 1] pixel scale. ``spectrum`` of None
    resolves to mask scale 0.5 and noise stddev equal to epsilon, seeded from
    ``rng_seed``. ``head_count`` of None means every head of the ensemble.
    ``nested_spectrum`` chains each transform draw onto the previous one
    instead of drawing independently around the current iterate.
    """

    epsilon: float = 8.0 / 255.0
    alpha: float = 2.0 / 255.0
    iterations: int = 10
    spectrum_samples: int = 10
    momentum: float = 1.0
    random_start: bool = True
    rng_seed: int = 0
    spectrum: SpectrumTransformParams | None = None
    head_count: int | None = None
    nested_spectrum: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidParameterError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.alpha <= self.epsilon:
            raise InvalidParameterError(
                f"alpha must be in [0, epsilon={self.epsilon}], got {self.alpha}"
            )
        if self.iterations < 1:
            raise InvalidParameterError(f"iterations must be >= 1, got {self.iterations}")
        if self.spectrum_samples < 1:
            raise InvalidParameterError(f"spectrum_samples must be >= 1, got {self.spectrum_samples}")
        if self.momentum < 0:
            raise InvalidParameterError(f"momentum must be >= 0, got {self.momentum}")
        if self.head_count is not None and self.head_count < 1:
            raise InvalidParameterError(f"head_count must be >= 1, got {self.head_count}")

    def resolved_spectrum(self) -> SpectrumTransformParams:
        if self.spectrum is not None:
            return self.spectrum
        return SpectrumTransformParams(rho=0.5, sigma_noise=self.epsilon, rng_seed=self.rng_seed)

    def replace(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


@dataclass
class AttackResult:
    """Outcome of one attack run on one batch."""

    adversarial: Tensor
    success: Tensor          # bool per image: crafting model's prediction != true label
    linf: Tensor             # per-image L-inf distance to the clean input
    iterations_used: int
    attack: str

    @property
    def asr(self) -> float:
        """Success rate against the crafting model, in percent."""
        if self.success.numel() == 0:
            return 0.0
        return 100.0 * self.success.float().mean().item()


def project(x_adv: Tensor, x: Tensor, epsilon: float) -> Tensor:
    """Clamp ``x_adv`` into the epsilon-ball around ``x`` intersected with [0, 1]."""
    if x_adv.shape != x.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(x_adv.shape)} vs {tuple(x.shape)}")
    if epsilon < 0:
        raise InvalidParameterError(f"epsilon must be >= 0, got {epsilon}")
    return torch.clamp(torch.min(torch.max(x_adv, x - epsilon), x + epsilon), 0.0, 1.0)


def _check_inputs(x: Tensor, y: Tensor) -> None:
    if x.dim() != 4:
        raise InvalidInputError(f"expected rank-4 pixel batch, got shape {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InvalidInputError("input contains non-finite values")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise InvalidInputError("input pixels must lie in [0, 1]")
    if y.shape[0] != x.shape[0]:
        raise InvalidInputError(f"batch size mismatch: {x.shape[0]} images, {y.shape[0]} labels")


def _backward_loss(loss: Tensor) -> None:
    try:
        loss.backward()
    except RuntimeError as exc:
        raise CapabilityError(f"model does not expose a gradient path to its input: {exc}") from exc


def _iterate(
    x0: Tensor,
    cfg: AttackConfig,
    grad_fn: Callable[[Tensor], Tensor],
    *,
    random_start: bool = False,
    momentum: float = 0.0,
) -> Tensor:
    """The shared sign-step projected loop."""
    x0 = x0.detach()
    adv = x0.clone()
    if random_start:
        gen = torch.Generator(device=x0.device.type)
        gen.manual_seed(cfg.rng_seed)
        noise = (torch.rand(x0.shape, generator=gen, dtype=x0.dtype, device=x0.device) * 2.0 - 1.0) * cfg.epsilon
        adv = (x0 + noise).clamp(0.0, 1.0)
    buf = torch.zeros_like(x0) if momentum > 0 else None
    for _ in range(cfg.iterations):
        g = grad_fn(adv)
        if buf is not None:
            norm = g.abs().flatten(1).sum(dim=1).view(-1, *([1] * (g.dim() - 1)))
            # Images with an exactly-zero gradient contribute nothing this step.
            g_hat = torch.where(norm > 0, g / norm.clamp(min=1e-12), g)
            buf = momentum * buf + g_hat
            step = buf
        else:
            step = g
        adv = project(adv + cfg.alpha * step.sign(), x0, cfg.epsilon)
    return adv.detach()


def _detector_grad_fn(detector: Detector, y: Tensor) -> Callable[[Tensor], Tensor]:
    y = y.detach()

    def grad_fn(adv: Tensor) -> Tensor:
        xg = adv.detach().clone().requires_grad_(True)
        loss = F.binary_cross_entropy_with_logits(detector(xg), y.to(torch.float32), reduction="sum")
        _backward_loss(loss)
        return xg.grad

    return grad_fn


def _finish(detector: Detector, x0: Tensor, adv: Tensor, y: Tensor, name: str, iters: int) -> AttackResult:
    success = predict_labels(detector, adv) != y.long()
    linf = (adv - x0).abs().flatten(1).amax(dim=1) if adv.numel() else torch.empty(0)
    return AttackResult(adversarial=adv, success=success, linf=linf, iterations_used=iters, attack=name)


def ifgsm(detector: Detector, x: Tensor, y: Tensor, cfg: AttackConfig) -> AttackResult:
    """Iterative FGSM: repeated signed gradient steps from the clean input."""
    _check_inputs(x, y)
    with _eval_mode(detector):
        adv = _iterate(x, cfg, _detector_grad_fn(detector, y))
    return _finish(detector, x, adv, y, "ifgsm", cfg.iterations)


def mifgsm(detector: Detector, x: Tensor, y: Tensor, cfg: AttackConfig) -> AttackResult:
    """Momentum IFGSM: decays an L1-normalized gradient accumulator."""
    _check_inputs(x, y)
    with _eval_mode(detector):
        adv = _iterate(x, cfg, _detector_grad_fn(detector, y), momentum=cfg.momentum)
    return _finish(detector, x, adv, y, "mifgsm", cfg.iterations)


def pgd(detector: Detector, x: Tensor, y: Tensor, cfg: AttackConfig) -> AttackResult:
    """Projected gradient descent: IFGSM from a uniform random start.

    With ``cfg.random_start`` off this is bit-identical to :func:`ifgsm`.
    """
    _check_inputs(x, y)
    with _eval_mode(detector):
        adv = _iterate(x, cfg, _detector_grad_fn(detector, y), random_start=cfg.random_start)
    return _finish(detector, x, adv, y, "pgd", cfg.iterations)


def spectrum_attack(detector: Detector, x: Tensor, y: Tensor, cfg: AttackConfig) -> AttackResult:
    """Average the loss gradient over random spectrum transformations.

    Each iteration draws ``cfg.spectrum_samples`` fresh transformations from a
    stream seeded once per attack, so iterations see different draws but the
    whole run replays exactly. With one sample and identity transform
    parameters this reduces bit-identically to :func:`ifgsm`.
    """
    _check_inputs(x, y)
    params = cfg.resolved_spectrum()
    gen = params.make_generator(x.device)
    n = cfg.spectrum_samples
    yf = y.to(torch.float32)

    def grad_fn(adv: Tensor) -> Tensor:
        xg = adv.detach().clone().requires_grad_(True)
        if cfg.nested_spectrum:
            z = xg
            total = None
            for _ in range(n):
                z = spectrum_transform(z, params, gen)
                term = F.binary_cross_entropy_with_logits(detector(z), yf, reduction="sum")
                total = term if total is None else total + term
            _backward_loss(total / n)
        else:
            for _ in range(n):
                zt = spectrum_transform(xg, params, gen)
                loss = F.binary_cross_entropy_with_logits(detector(zt), yf, reduction="sum")
                _backward_loss(loss / n)
        return xg.grad

    with _eval_mode(detector):
        adv = _iterate(x, cfg, grad_fn)
    return _finish(detector, x, adv, y, "spectrum", cfg.iterations)


def ensemble_attack(detectors: Sequence[Detector], x: Tensor, y: Tensor, cfg: AttackConfig) -> AttackResult:
    """Attack the mean loss of several models at once (loss averaging).

    Success is judged by the averaged probability of the ensemble. With a
    single model this is bit-identical to :func:`ifgsm`.
    """
    if len(detectors) == 0:
        raise InvalidInputError("ensemble_attack needs at least one model")
    _check_inputs(x, y)
    yf = y.to(torch.float32)
    m = len(detectors)

    def grad_fn(adv: Tensor) -> Tensor:
        xg = adv.detach().clone().requires_grad_(True)
        for det in detectors:
            loss = F.binary_cross_entropy_with_logits(det(xg), yf, reduction="sum")
            _backward_loss(loss / m)
        return xg.grad

    with contextlib.ExitStack() as stack:
        for det in detectors:
            stack.enter_context(_eval_mode(det))
        adv = _iterate(x, cfg, grad_fn)
        with torch.no_grad():
            probs = [torch.sigmoid(det(adv)) for det in detectors]
            acc = torch.zeros_like(probs[0])
            for p in probs[1:]:
                acc = acc + (p - probs[0])
            mean_prob = probs[0] + acc / m
    success = (mean_prob >= 0.5).long() != y.long()
    linf = (adv - x).abs().flatten(1).amax(dim=1) if adv.numel() else torch.empty(0)
    return AttackResult(adversarial=adv, success=success, linf=linf, iterations_used=cfg.iterations, attack="ensemble")


def fpba(ensemble: BayesEnsemble, x: Tensor, y: Tensor, cfg: AttackConfig) -> AttackResult:
    """Frequency post-train Bayesian attack.

    Per iteration and per posterior head: the gradient of the log-likelihood
    averaged over random spectrum transformations, plus the plain spatial
    gradient at the current iterate; all head contributions are averaged and
    the sign is taken once, outside the average. Requires an ensemble that
    went through posterior sampling (``post_trained``).
    """
    if not isinstance(ensemble, BayesEnsemble):
        raise InvalidInputError(f"fpba expects a posterior-head ensemble, got {type(ensemble).__name__}")
    if not ensemble.post_trained:
        raise PreconditionError("ensemble has not been posterior-sampled; run post_train first")
    k = cfg.head_count if cfg.head_count is not None else ensemble.num_heads
    if not 1 <= k <= ensemble.num_heads:
        raise InvalidParameterError(f"head_count {k} out of range [1, {ensemble.num_heads}]")
    _check_inputs(x, y)
    params = cfg.resolved_spectrum()
    gen = params.make_generator(x.device)
    n = cfg.spectrum_samples
    yf = y.to(torch.float32)

    def head_loss(head_idx: int, z: Tensor) -> Tensor:
        return F.binary_cross_entropy_with_logits(ensemble.combined_logits(head_idx, z), yf, reduction="sum")

    def grad_fn(adv: Tensor) -> Tensor:
        xg = adv.detach().clone().requires_grad_(True)
        for head_idx in range(k):
            if cfg.nested_spectrum:
                z = xg
                total = None
                for _ in range(n):
                    z = spectrum_transform(z, params, gen)
                    term = head_loss(head_idx, z)
                    total = term if total is None else total + term
                _backward_loss(total / (n * k))
            else:
                for _ in range(n):
                    zt = spectrum_transform(xg, params, gen)
                    _backward_loss(head_loss(head_idx, zt) / (n * k))
            _backward_loss(head_loss(head_idx, xg) / k)
        return xg.grad

    with _eval_mode(ensemble):
        adv = _iterate(x, cfg, grad_fn)
    success = ensemble.bma_labels(adv, head_count=k) != y.long()
    linf = (adv - x).abs().flatten(1).amax(dim=1) if adv.numel() else torch.empty(0)
    return AttackResult(adversarial=adv, success=success, linf=linf, iterations_used=cfg.iterations, attack="fpba")


ATTACK_NAMES = ("ifgsm", "mifgsm", "pgd", "spectrum", "ensemble", "fpba")
