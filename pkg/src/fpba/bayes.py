"""Bayesian posterior heads over a frozen detector backbone.

A trained detector is split into backbone features and a linear classifier.
This module grafts K small MLP heads onto the frozen backbone; each head's
output is added to the frozen classifier's logit (a skip connection), so a
zero-initialized head leaves the detector's behavior exactly unchanged.
Heads are sampled from the posterior over head weights with stochastic
gradient Hamiltonian Monte Carlo (SGHMC) in its preconditioned form:

    theta <- theta - sigma^2 * C^(-1/2) h + N(0, 2 F sigma^3 C^(-1) - sigma^4 I)
    C     <- (1 - 1/tau) C + (1/tau) h^2        (elementwise)

where h is the stochastic gradient of the potential (dataset-scaled negative
log-likelihood plus a Gaussian prior), C is a diagonal preconditioner, F is a
friction constant, and the noise variance is floored at zero elementwise.
Model averaging over the sampled heads approximates the posterior predictive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .detectors import DETECTOR_ARCHS, Detector, _eval_mode, state_checksum
from .errors import (
    CheckpointError,
    DivergedChainError,
    InvalidDatasetError,
    InvalidInputError,
    InvalidParameterError,
)

__all__ = [
    "AppendedHead",
    "BayesEnsemble",
    "SghmcConfig",
    "SghmcState",
    "sghmc_step",
    "PostTrainConfig",
    "post_train",
    "save_ensemble",
    "load_ensemble",
]


class AppendedHead(nn.Module):
    """One posterior head: feature vector -> scalar logit correction.

    A single hidden layer with sigmoid activation; the output layer starts at
    exactly zero so a fresh head is an exact no-op on the combined logit.
    """

    def __init__(self, feature_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden if hidden is not None else min(feature_dim, 128)
        if hidden < 1:
            raise InvalidParameterError(f"hidden width must be >= 1, got {hidden}")
        self.fc1 = nn.Linear(feature_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, feats: Tensor) -> Tensor:
        return self.fc2(torch.sigmoid(self.fc1(feats))).squeeze(-1)


class BayesEnsemble(nn.Module):
    """A frozen base detector plus K appended posterior heads.

    The base is put in eval mode with gradients disabled on its parameters at
    construction and stays there (``train()`` never touches it), so attacks
    can still differentiate through it with respect to the input while its
    weights and buffers remain bit-frozen.
    """

    def __init__(self, base: Detector, heads: list[AppendedHead]):
        super().__init__()
        if not heads:
            raise InvalidParameterError("ensemble needs at least one head")
        self.base = base
        self.base.eval()
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.heads = nn.ModuleList(heads)
        self.post_trained = False
        self.record: dict | None = None

    def train(self, mode: bool = True) -> "BayesEnsemble":
        super().train(mode)
        self.base.eval()
        return self

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def combined_logits(self, k: int, x: Tensor) -> Tensor:
        """Base logit plus head k's correction; differentiable w.r.t. ``x``."""
        if not 0 <= k < self.num_heads:
            raise InvalidParameterError(f"head index {k} out of range [0, {self.num_heads})")
        feats = self.base.features(x)
        return self.base.classify(feats) + self.heads[k](feats)

    def bma_predict(self, x: Tensor, head_count: int | None = None, batch_size: int = 256) -> Tensor:
        """Posterior-predictive fake probability, averaged over heads.

        The average is anchored on head 0 (p0 + mean of differences), which
        keeps it bitwise equal to the base probability when every head is an
        exact no-op.
        """
        k = self.num_heads if head_count is None else head_count
        if not 1 <= k <= self.num_heads:
            raise InvalidParameterError(f"head_count {k} out of range [1, {self.num_heads}]")
        outs = []
        with _eval_mode(self), torch.no_grad():
            for start in range(0, x.shape[0], batch_size):
                chunk = x[start : start + batch_size]
                probs = [torch.sigmoid(self.combined_logits(i, chunk)) for i in range(k)]
                acc = torch.zeros_like(probs[0])
                for p in probs[1:]:
                    acc = acc + (p - probs[0])
                outs.append(probs[0] + acc / k)
        return torch.cat(outs) if outs else torch.empty(0)

    def bma_labels(self, x: Tensor, head_count: int | None = None, batch_size: int = 256) -> Tensor:
        return (self.bma_predict(x, head_count, batch_size) >= 0.5).long()


# ---------------------------------------------------------------------------
# SGHMC


@dataclass(frozen=True)
class SghmcConfig:
    """Sampler constants. ``step_size`` of None resolves to
    ``base_step * sqrt(batch_size / n_train)`` when the chain is set up."""

    step_size: float | None = None
    base_step: float = 1e-3
    friction: float = 0.05
    tau: float = 256.0
    adapt_tau: bool = True
    burn_in: int = 100

    def __post_init__(self) -> None:
        if self.step_size is not None and self.step_size <= 0:
            raise InvalidParameterError(f"step_size must be > 0, got {self.step_size}")
        if self.base_step <= 0:
            raise InvalidParameterError(f"base_step must be > 0, got {self.base_step}")
        if self.friction <= 0:
            raise InvalidParameterError(f"friction must be > 0, got {self.friction}")
        if self.tau <= 1:
            raise InvalidParameterError(f"tau must be > 1, got {self.tau}")
        if self.burn_in < 0:
            raise InvalidParameterError(f"burn_in must be >= 0, got {self.burn_in}")

    def resolve_step_size(self, batch_size: int, n_train: int) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.base_step * math.sqrt(batch_size / max(1, n_train))


class SghmcState:
    """Mutable per-chain state: preconditioner, adaptation buffers, RNG."""

    def __init__(self, params: dict[str, Tensor], cfg: SghmcConfig, sigma: float, generator: torch.Generator):
        if sigma <= 0:
            raise InvalidParameterError(f"resolved step size must be > 0, got {sigma}")
        self.cfg = cfg
        self.sigma = float(sigma)
        self.generator = generator
        self.c = {n: torch.ones_like(p) for n, p in params.items()}
        self.g_smooth = {n: torch.zeros_like(p) for n, p in params.items()}
        self.tau_t = {n: torch.full_like(p, cfg.tau) for n, p in params.items()}
        self.steps = 0

    @classmethod
    def for_module(
        cls,
        module: nn.Module,
        cfg: SghmcConfig,
        batch_size: int,
        n_train: int,
        generator: torch.Generator,
    ) -> "SghmcState":
        params = dict(module.named_parameters())
        return cls(params, cfg, cfg.resolve_step_size(batch_size, n_train), generator)


def sghmc_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: SghmcState) -> None:
    """Advance every parameter one SGHMC step in place.

    Per parameter: dynamics first (using the current preconditioner), then the
    preconditioner EMA, then, while inside the burn-in window with adaptation
    on, the horizon/smoothed-gradient adaptation. Non-finite gradients abort
    with chain diagnostics rather than propagating NaNs into the weights.
    """
    if set(params) != set(grads):
        raise InvalidInputError("params and grads must share the same keys")
    for name, h in grads.items():
        if not torch.isfinite(h).all():
            raise DivergedChainError(f"non-finite gradient for {name!r} at sampler step {state.steps}")
    sigma = state.sigma
    fric = state.cfg.friction
    with torch.no_grad():
        for name, p in params.items():
            h = grads[name]
            c = state.c[name]
            var = (2.0 * fric * sigma**3 / c - sigma**4).clamp_(min=0.0)
            noise = torch.randn(p.shape, generator=state.generator, dtype=p.dtype, device=p.device)
            p.add_(-(sigma**2) * h / c.sqrt() + var.sqrt() * noise)
            if state.cfg.adapt_tau and state.steps < state.cfg.burn_in:
                tau = state.tau_t[name]
                g = state.g_smooth[name]
                tau.mul_(1.0 - g * g / c.clamp(min=1e-12)).add_(1.0).clamp_(min=1.0)
                inv = 1.0 / tau
                g.mul_(1.0 - inv).add_(inv * h)
                c.mul_(1.0 - inv).add_(inv * h * h)
            else:
                inv = 1.0 / state.tau_t[name]
                c.mul_(1.0 - inv).add_(inv * h * h)
    state.steps += 1


# ---------------------------------------------------------------------------
# Post-train loop


@dataclass(frozen=True)
class PostTrainConfig:
    heads: int = 3
    iterations: int = 300
    steps_per_head: int = 1
    batch_size: int = 64
    hidden: int | None = None
    prior_precision: float = 1.0
    schedule: str = "interleaved"
    seed: int = 0
    sghmc: SghmcConfig = field(default_factory=SghmcConfig)

    def __post_init__(self) -> None:
        if self.heads < 1:
            raise InvalidParameterError(f"heads must be >= 1, got {self.heads}")
        if self.iterations < 0:
            raise InvalidParameterError(f"iterations must be >= 0, got {self.iterations}")
        if self.steps_per_head < 1:
            raise InvalidParameterError(f"steps_per_head must be >= 1, got {self.steps_per_head}")
        if self.batch_size < 1:
            raise InvalidParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.prior_precision < 0:
            raise InvalidParameterError(f"prior_precision must be >= 0, got {self.prior_precision}")
        if self.schedule not in ("interleaved", "sequential"):
            raise InvalidParameterError(f"schedule must be 'interleaved' or 'sequential', got {self.schedule!r}")


class _HeadChain:
    """One head with its private SGHMC state and RNG streams."""

    def __init__(self, base: Detector, cfg: PostTrainConfig, k: int, n_train: int):
        ss = np.random.SeedSequence([cfg.seed, k])
        idx_child, noise_child, init_child = ss.spawn(3)
        self.index_rng = np.random.default_rng(idx_child)
        torch.manual_seed(int(init_child.generate_state(1)[0]))
        self.head = AppendedHead(base.feature_dim, cfg.hidden)
        gen = torch.Generator()
        gen.manual_seed(int(noise_child.generate_state(1)[0]))
        self.state = SghmcState.for_module(self.head, cfg.sghmc, cfg.batch_size, n_train, gen)

    def update(self, base: Detector, x: Tensor, y: Tensor, cfg: PostTrainConfig, iteration: int, k: int) -> None:
        n = x.shape[0]
        idx = torch.from_numpy(self.index_rng.integers(0, n, size=min(cfg.batch_size, n)))
        with torch.no_grad():
            feats = base.features(x[idx])
            base_logits = base.classify(feats)
        logits = base_logits + self.head(feats)
        nll = F.binary_cross_entropy_with_logits(logits, y[idx].float(), reduction="sum")
        if not torch.isfinite(nll):
            raise DivergedChainError(
                f"non-finite likelihood at iteration {iteration}, head {k}: {nll.item()}"
            )
        potential = (n / idx.shape[0]) * nll
        if cfg.prior_precision > 0:
            potential = potential + 0.5 * cfg.prior_precision * sum(
                (p**2).sum() for p in self.head.parameters()
            )
        names = [n_ for n_, _ in self.head.named_parameters()]
        grads_t = torch.autograd.grad(potential, [p for _, p in self.head.named_parameters()])
        grads = dict(zip(names, grads_t))
        params = dict(self.head.named_parameters())
        # One stochastic gradient can drive several consecutive steps.
        for _ in range(cfg.steps_per_head):
            sghmc_step(params, grads, self.state)


def post_train(base: Detector, data, cfg: PostTrainConfig | None = None) -> BayesEnsemble:
    """Sample K posterior heads over a frozen base detector.

    ``data`` must expose ``split(name) -> (images, labels)``. Each head runs
    its own chain with independent RNG streams derived from ``cfg.seed``, so
    the interleaved and sequential schedules produce identical ensembles.
    ``iterations = 0`` yields a valid ensemble whose heads still carry their
    exact-zero output layers. The base detector's weights are untouched
    (checksum-stable).
    """
    cfg = cfg if cfg is not None else PostTrainConfig()
    x_tr, y_tr = data.split("train")
    if cfg.iterations > 0:
        if x_tr.shape[0] == 0:
            raise InvalidDatasetError("train split is empty")
        if len(torch.unique(y_tr)) < 2:
            raise InvalidDatasetError("train split must contain both classes")
    base_sum_before = state_checksum(base)
    n_train = int(x_tr.shape[0])
    chains = [_HeadChain(base, cfg, k, n_train) for k in range(cfg.heads)]
    base.eval()
    if cfg.schedule == "interleaved":
        for j in range(cfg.iterations):
            for k, chain in enumerate(chains):
                chain.update(base, x_tr, y_tr, cfg, j, k)
    else:
        for k, chain in enumerate(chains):
            for j in range(cfg.iterations):
                chain.update(base, x_tr, y_tr, cfg, j, k)
    ensemble = BayesEnsemble(base, [c.head for c in chains])
    ensemble.post_trained = True
    record = {
        "config": asdict(cfg),
        "n_train": n_train,
        "base_checksum": base_sum_before,
        "step_size": chains[0].state.sigma if chains else None,
    }
    x_val, y_val = data.split("val")
    if x_val.shape[0]:
        with torch.no_grad():
            base_acc = ((base(x_val) >= 0).long() == y_val).float().mean().item()
        ens_acc = (ensemble.bma_labels(x_val) == y_val).float().mean().item()
        record["base_val_acc"] = base_acc
        record["ensemble_val_acc"] = ens_acc
    ensemble.record = record
    assert state_checksum(base) == base_sum_before  # the backbone must stay frozen
    return ensemble


# ---------------------------------------------------------------------------
# Checkpoints


_ENS_FORMAT = "fpba-ensemble"


def save_ensemble(ensemble: BayesEnsemble, path: str | Path) -> None:
    """Write a self-contained ensemble checkpoint (base weights included)."""
    base = ensemble.base
    payload = {
        "format": _ENS_FORMAT,
        "version": 1,
        "base_arch": base.arch,
        "base_input_size": base.input_size,
        "base_checksum": state_checksum(base),
        "base_state_dict": {k: v.cpu() for k, v in base.state_dict().items()},
        "feature_dim": base.feature_dim,
        "head_hidden": ensemble.heads[0].fc1.out_features,
        "head_state_dicts": [{k: v.cpu() for k, v in h.state_dict().items()} for h in ensemble.heads],
        "post_trained": ensemble.post_trained,
        "record": ensemble.record,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_ensemble(path: str | Path, base: Detector | None = None) -> BayesEnsemble:
    """Rebuild an ensemble checkpoint.

    With ``base`` given, its checksum must match the one recorded at save
    time; otherwise the base is reconstructed from the embedded weights.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != _ENS_FORMAT:
        raise CheckpointError(f"{path} is not an ensemble checkpoint")
    if base is None:
        arch = payload.get("base_arch")
        if arch not in DETECTOR_ARCHS:
            raise CheckpointError(f"{path} names unknown base architecture {arch!r}")
        base = DETECTOR_ARCHS[arch](input_size=payload["base_input_size"])
        base.load_state_dict(payload["base_state_dict"])
        base.eval()
    expected = payload.get("base_checksum")
    actual = state_checksum(base)
    if actual != expected:
        raise CheckpointError(
            f"base detector does not match the one this ensemble was sampled for "
            f"(checksum {actual[:12]}... vs recorded {str(expected)[:12]}...)"
        )
    heads = []
    for sd in payload["head_state_dicts"]:
        head = AppendedHead(payload["feature_dim"], payload["head_hidden"])
        head.load_state_dict(sd)
        heads.append(head)
    ensemble = BayesEnsemble(base, heads)
    ensemble.post_trained = bool(payload.get("post_trained", False))
    ensemble.record = payload.get("record")
    return ensemble
