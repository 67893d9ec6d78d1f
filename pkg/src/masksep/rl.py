"""Clipped trust-region policy optimization over the Beta mask policy.

Each step samples masks from a frozen snapshot of the separator, scores
the reconstructions with embedding rewards, normalizes advantages against
an EMA baseline (and group-relative scaling within the batch), then takes
one gradient step on the clipped surrogate with entropy and KL terms. The
snapshot is refreshed after every step (single-pass updates), so the first
gradient evaluation after a snapshot always sits at ratio exactly 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError
from .optim import AdamWState
from .policy import (
    BetaPolicyParams,
    PolicyMath,
    entropy_grad_math,
    entropy_math,
    kappa_schedule,
    kl_divergence,
    kl_divergence_grad,
    log_prob_grad_math,
    log_prob_math,
    params_from_proposal,
    sample,
)
from .reward import MlbpParams, RewardTargets, composite_reward
from .separator import (
    ParamGrads,
    SeparatorModel,
    apply_adamw_step,
    backward,
    forward,
    params_equal,
    save_model,
    snapshot,
)
from .spectral import Mask, Spectrogram, apply_mask_reconstruct

RATIO_LOG_CLAMP = 20.0


@dataclass
class RlConfig:
    """Training hyperparameters; config-file keys match field names."""

    clip_epsilon: float = 0.2
    entropy_coef: float = 0.003
    kl_coef: float = 0.01
    ema_beta: float = 0.92
    grpo_enabled: bool = True
    grpo_eps: float = 1e-6
    mc_samples: int = 1
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    kappa_start: float = 4.0
    kappa_end: float = 9.0
    kappa_ramp_frac: float = 0.2
    sample_clamp: float = 1e-5
    reward_mode: str = "pooled"
    query_modality: str = "text"
    segment_samples: int = 2048
    val_interval: int = 100
    patience: int = 10
    warm_start: bool = True
    warm_start_steps: int = 300
    warm_start_lr: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ConfigError("clip_epsilon must lie in (0, 1)")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ConfigError("ema_beta must lie in [0, 1)")
        if self.grpo_eps <= 0.0:
            raise ConfigError("grpo_eps must be positive")
        if self.mc_samples < 1 or self.steps < 0 or self.batch_size < 1:
            raise ConfigError("mc_samples/steps/batch_size out of range")
        if self.reward_mode not in ("audio", "text", "video", "mixup", "pooled"):
            raise ConfigError(f"unknown reward_mode {self.reward_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RlConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def kappa_at(self, step: int) -> float:
        return kappa_schedule(
            step, self.steps, self.kappa_start, self.kappa_end, self.kappa_ramp_frac
        )


@dataclass
class TrainItem:
    """One prepared training example: a mixture crop plus its query and
    reward-side target embeddings.

    ``ideal_mask``/``bce_weight`` back the optional supervised warm start
    (ideal ratio mask of the crop and normalized magnitude weights)."""

    item_id: str
    category: str
    mix_spec: Spectrogram
    log_mag: np.ndarray
    query: np.ndarray
    targets: RewardTargets
    ideal_mask: np.ndarray | None = None
    bce_weight: np.ndarray | None = None


@dataclass
class RewardContext:
    """Everything needed to turn a reconstruction into a scalar reward."""

    embedder: object  # AudioFeatureEmbedder
    mode: str = "pooled"
    mlbp: MlbpParams | None = None
    mixup_weights: tuple = (1.0, 1.0, 1.0)

    def reward(self, item: TrainItem, waveform) -> float:
        if float(np.max(np.abs(waveform.samples))) == 0.0:
            return -1.0  # silent output: worst case rather than an abort
        e_sep = self.embedder.embed(waveform)
        return composite_reward(
            self.mode, e_sep, item.targets, mlbp=self.mlbp,
            mixup_weights=self.mixup_weights,
        )


def update_baseline(b: float, batch_mean_reward: float, ema_beta: float) -> float:
    """EMA of batch-mean rewards."""
    return ema_beta * b + (1.0 - ema_beta) * batch_mean_reward


def normalize_advantages(a, eps: float, enabled: bool = True) -> np.ndarray:
    """Group-relative normalization (population std); identity if disabled."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("advantage vector must be nonempty")
    if not enabled:
        return a.copy()
    if np.ptp(a) == 0.0:
        return np.zeros_like(a)
    return (a - a.mean()) / (a.std() + eps)


def importance_ratio(logp_new: float, logp_old: float) -> float:
    """exp(logp_new - logp_old), with the difference clamped to +/-20."""
    return float(np.exp(np.clip(logp_new - logp_old, -RATIO_LOG_CLAMP,
                                RATIO_LOG_CLAMP)))


def clipped_surrogate(ratio: float, adv: float, clip_epsilon: float):
    """min(r * A, clip(r) * A); ties count as unclipped."""
    if not 0.0 < clip_epsilon < 1.0:
        raise ValueError("clip_epsilon must lie in (0, 1)")
    unclipped = ratio * adv
    clipped = float(np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)) * adv
    if clipped < unclipped:
        return clipped, "clipped"
    return unclipped, "unclipped"


def surrogate_logp_grad(ratio: float, adv: float, clip_epsilon: float,
                        log_diff: float) -> float:
    """d(surrogate)/d(logp_new).

    Zero when the clipped branch is active (the clip binds there) or when
    the ratio's log-space clamp binds; otherwise r * A since dr/dlogp = r.
    """
    _, branch = clipped_surrogate(ratio, adv, clip_epsilon)
    if branch == "clipped" or abs(log_diff) > RATIO_LOG_CLAMP:
        return 0.0
    return ratio * adv


@dataclass
class SampledItem:
    """One item's sampled masks with their old-policy scores and
    (normalized) advantages.

    When the old policy coincided with the live model at sampling time,
    ``proposal``/``cache`` carry that forward pass so the gradient step can
    reuse it: the new policy then equals the old one bin for bin, making
    every ratio exactly 1 and the KL term exactly 0."""

    item: TrainItem
    params_old: BetaPolicyParams
    masks: list
    logp_old: list
    rewards: list
    advantages: list = field(default_factory=list)
    proposal: np.ndarray | None = None
    cache: object | None = None
    math: PolicyMath | None = None


@dataclass
class ObjectiveResult:
    objective: float
    grads: ParamGrads
    surrogate: float
    entropy: float
    kl: float
    ratio_mean: float
    frac_clipped: float


def rl_objective(ratios, advantages, entropies, kls, clip_epsilon: float,
                 entropy_coef: float, kl_coef: float):
    """Scalar objective from per-sample surrogate terms and per-item
    entropy/KL terms. Returns (J, per-sample d(surrogate)/d(logp_new))."""
    values = []
    grads = []
    for r, a in zip(ratios, advantages):
        v, branch = clipped_surrogate(r, a, clip_epsilon)
        values.append(v)
        grads.append(r * a if branch == "unclipped" else 0.0)
    j = (
        float(np.mean(values))
        + entropy_coef * float(np.mean(entropies))
        - kl_coef * float(np.mean(kls))
    )
    return j, values, grads


def objective_and_grads(
    model: SeparatorModel,
    batch: list[SampledItem],
    cfg: RlConfig,
    kappa: float,
) -> ObjectiveResult:
    """Objective J for a sampled batch and the gradients of -J w.r.t. the
    live model's parameters (Beta-shape chain rule through the proposal).

    Items carrying a live-model forward cache take the parameter-equality
    shortcut: ratios are exactly 1 (ties count as unclipped) and the KL
    term is exactly 0 with zero gradient, which is what the closed forms
    yield at that point."""
    n_items = len(batch)
    n_samples = sum(len(s.masks) for s in batch)
    total = None
    ratios_all, values_all, entropies, kls = [], [], [], []
    n_clipped = 0

    for sampled in batch:
        item = sampled.item
        shared = sampled.cache is not None and sampled.cache.matches(model)
        if shared:
            cache = sampled.cache
            params_new = sampled.params_old
            math_new = sampled.math or PolicyMath(params_new)
        else:
            proposal, cache = forward(model, item.log_mag, item.query)
            params_new = params_from_proposal(proposal, kappa)
            math_new = PolicyMath(params_new)

        d_alpha = np.zeros(params_new.shape)
        d_beta = np.zeros(params_new.shape)
        for mask, logp_old, adv in zip(
            sampled.masks, sampled.logp_old, sampled.advantages
        ):
            logp_new = logp_old if shared else log_prob_math(math_new, mask)
            log_diff = logp_new - logp_old
            ratio = importance_ratio(logp_new, logp_old)
            value, branch = clipped_surrogate(ratio, adv, cfg.clip_epsilon)
            coeff = surrogate_logp_grad(ratio, adv, cfg.clip_epsilon, log_diff)
            if branch == "clipped":
                n_clipped += 1
            ratios_all.append(ratio)
            values_all.append(value)
            if coeff != 0.0:
                g_a, g_b = log_prob_grad_math(math_new, mask)
                d_alpha += (coeff / n_samples) * g_a
                d_beta += (coeff / n_samples) * g_b

        entropies.append(entropy_math(math_new))
        kls.append(0.0 if shared else kl_divergence(params_new, sampled.params_old))
        if cfg.entropy_coef != 0.0:
            h_a, h_b = entropy_grad_math(math_new)
            d_alpha += (cfg.entropy_coef / n_items) * h_a
            d_beta += (cfg.entropy_coef / n_items) * h_b
        if cfg.kl_coef != 0.0 and not shared:
            k_a, k_b = kl_divergence_grad(params_new, sampled.params_old)
            d_alpha -= (cfg.kl_coef / n_items) * k_a
            d_beta -= (cfg.kl_coef / n_items) * k_b

        # alpha = 1 + kappa P, beta = 1 + kappa (1 - P); loss = -J
        upstream_loss = -kappa * (d_alpha - d_beta)
        grads = backward(model, cache, upstream_loss)
        if total is None:
            total = grads
        else:
            for name in ("w1", "b1", "w2", "b2"):
                setattr(total, name, getattr(total, name) + getattr(grads, name))

    j = (
        float(np.mean(values_all))
        + cfg.entropy_coef * float(np.mean(entropies))
        - cfg.kl_coef * float(np.mean(kls))
    )
    return ObjectiveResult(
        objective=j,
        grads=total,
        surrogate=float(np.mean(values_all)),
        entropy=float(np.mean(entropies)),
        kl=float(np.mean(kls)),
        ratio_mean=float(np.mean(ratios_all)),
        frac_clipped=n_clipped / max(1, n_samples),
    )


@dataclass
class TrainStepReport:
    step: int
    mean_reward: float
    baseline: float
    objective: float
    surrogate: float
    entropy: float
    kl: float
    ratio_mean: float
    frac_clipped: float
    grad_norm: float
    kl_post: float

    def to_dict(self) -> dict:
        return asdict(self)

    def validate_finite(self) -> None:
        for key, value in self.to_dict().items():
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite {key} at step {self.step}: {value}"
                )


@dataclass
class TrainStepResult:
    report: TrainStepReport
    baseline: float
    snapshot: SeparatorModel


def train_step(
    model: SeparatorModel,
    old_snapshot: SeparatorModel,
    items: list[TrainItem],
    cfg: RlConfig,
    rng: np.random.Generator,
    reward_ctx: RewardContext,
    step_index: int = 0,
    baseline: float = 0.0,
    opt_state: AdamWState | None = None,
) -> TrainStepResult:
    """One full update: sample from the old policy, score reconstructions,
    normalize advantages, step the live model, refresh the snapshot."""
    if opt_state is None:
        opt_state = AdamWState()
    kappa = cfg.kappa_at(step_index)
    same_params = params_equal(model, old_snapshot)

    sampled_batch = []
    rewards_flat = []
    for item in items:
        if same_params:
            # the old policy coincides with the live model: one forward
            # serves sampling now and the gradient pass later
            proposal_old, cache = forward(model, item.log_mag, item.query)
        else:
            proposal_old, _ = forward(old_snapshot, item.log_mag, item.query)
            cache = None
        params_old = params_from_proposal(proposal_old, kappa)
        math_old = PolicyMath(params_old)
        masks, logps, rewards = [], [], []
        for _ in range(cfg.mc_samples):
            ps = sample(params_old, rng, clamp_eps=cfg.sample_clamp,
                        with_entropy=False, math=math_old)
            wav = apply_mask_reconstruct(item.mix_spec, Mask(ps.mask[:, :, 0]))
            r = reward_ctx.reward(item, wav)
            masks.append(ps.mask)
            logps.append(ps.log_prob)
            rewards.append(r)
            rewards_flat.append(r)
        sampled_batch.append(
            SampledItem(
                item=item,
                params_old=params_old,
                masks=masks,
                logp_old=logps,
                rewards=rewards,
                proposal=proposal_old if same_params else None,
                cache=cache,
                math=math_old if same_params else None,
            )
        )

    mean_reward = float(np.mean(rewards_flat))
    raw_adv = np.asarray(rewards_flat) - baseline
    norm_adv = normalize_advantages(raw_adv, cfg.grpo_eps, cfg.grpo_enabled)
    pos = 0
    for sampled in sampled_batch:
        k = len(sampled.masks)
        sampled.advantages = [float(a) for a in norm_adv[pos : pos + k]]
        pos += k
    new_baseline = update_baseline(baseline, mean_reward, cfg.ema_beta)

    result = objective_and_grads(model, sampled_batch, cfg, kappa)
    if not np.isfinite(result.objective):
        raise DivergenceError(
            f"non-finite objective at step {step_index}: "
            f"surrogate={result.surrogate} entropy={result.entropy} kl={result.kl}"
        )
    grad_norm = apply_adamw_step(
        model,
        result.grads,
        opt_state,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm,
    )

    # trust-region telemetry after the update, measured on the leading
    # batch item (a full-batch measurement would double the forward cost)
    kl_probe = sampled_batch[:1]
    kl_post = 0.0
    for sampled in kl_probe:
        proposal_post, _ = forward(model, sampled.item.log_mag, sampled.item.query)
        params_post = params_from_proposal(proposal_post, kappa)
        kl_post += kl_divergence(params_post, sampled.params_old)
    kl_post /= len(kl_probe)

    report = TrainStepReport(
        step=step_index,
        mean_reward=mean_reward,
        baseline=new_baseline,
        objective=result.objective,
        surrogate=result.surrogate,
        entropy=result.entropy,
        kl=result.kl,
        ratio_mean=result.ratio_mean,
        frac_clipped=result.frac_clipped,
        grad_norm=grad_norm,
        kl_post=kl_post,
    )
    report.validate_finite()
    return TrainStepResult(
        report=report,
        baseline=new_baseline,
        snapshot=snapshot(model, step=step_index + 1),
    )


def proposal_mask(model: SeparatorModel, item: TrainItem) -> Mask:
    """Deterministic inference mask: the proposal itself (the per-bin mode)."""
    proposal, _ = forward(model, item.log_mag, item.query)
    return Mask(proposal[:, :, 0])


def evaluate_mean_reward(
    model: SeparatorModel, items: list[TrainItem], reward_ctx: RewardContext
) -> float:
    """Mean composite reward of deterministic-proposal reconstructions."""
    total = 0.0
    for item in items:
        wav = apply_mask_reconstruct(item.mix_spec, proposal_mask(model, item))
        total += reward_ctx.reward(item, wav)
    return total / len(items)


@dataclass
class TrainLoopResult:
    steps_run: int
    best_step: int
    best_val_reward: float
    initial_val_reward: float
    final_val_reward: float
    stopped_early: bool


def warm_start(
    model: SeparatorModel,
    train_items: list[TrainItem],
    cfg: RlConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Supervised pretraining phase: weighted BCE toward the items' ideal
    ratio masks, mirroring how the supervised baseline initializes the
    separator before policy optimization."""
    from .separator import warm_start_supervised

    usable = [
        it for it in train_items
        if it.ideal_mask is not None and it.bce_weight is not None
    ]
    if not usable:
        raise ValueError("warm start requires items with ideal_mask/bce_weight")
    state = AdamWState()
    batches = []
    size = min(8, len(usable))
    for _ in range(cfg.warm_start_steps):
        idx = rng.choice(len(usable), size=size, replace=False)
        batches.append(
            [
                (usable[i].log_mag, usable[i].query,
                 usable[i].ideal_mask, usable[i].bce_weight)
                for i in idx
            ]
        )
    return warm_start_supervised(model, batches, state, lr=cfg.warm_start_lr)


def train_loop(
    model: SeparatorModel,
    train_items: list[TrainItem],
    val_items: list[TrainItem],
    cfg: RlConfig,
    reward_ctx: RewardContext,
    log_path,
    checkpoint_dir,
) -> TrainLoopResult:
    """Run cfg.steps updates with minibatch sampling, periodic validation,
    best-checkpoint retention and early stopping. Fully seeded.

    When cfg.warm_start is set, the untrained initial checkpoint is written
    first, then the separator is pretrained on ideal-ratio-mask targets
    before any policy step (the paper-style supervised-then-fine-tune
    pipeline); validation step 0 refers to the warm-started model.
    """
    if not train_items:
        raise ValueError("training set is empty")
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    save_model(checkpoint_dir / "init.json", model)

    rng = np.random.default_rng(cfg.seed)
    if cfg.warm_start and cfg.warm_start_steps > 0:
        warm_start(model, train_items, cfg, rng)
    old = snapshot(model, 0)
    opt_state = AdamWState()
    baseline = 0.0

    initial_val = (
        evaluate_mean_reward(model, val_items, reward_ctx) if val_items else 0.0
    )
    best_val = initial_val
    best_step = 0
    if cfg.steps > 0:
        save_model(checkpoint_dir / "best.json", model)
    evals_since_best = 0
    stopped_early = False
    steps_run = 0

    with open(log_path, "w") as log:
        log.write(
            json.dumps(
                {"event": "validation", "step": 0, "val_reward": initial_val},
                sort_keys=True,
            )
            + "\n"
        )
        for step in range(cfg.steps):
            size = min(cfg.batch_size, len(train_items))
            idx = rng.choice(len(train_items), size=size, replace=False)
            batch = [train_items[i] for i in idx]
            result = train_step(
                model,
                old,
                batch,
                cfg,
                rng,
                reward_ctx,
                step_index=step,
                baseline=baseline,
                opt_state=opt_state,
            )
            old = result.snapshot
            baseline = result.baseline
            log.write(json.dumps(result.report.to_dict(), sort_keys=True) + "\n")
            steps_run = step + 1

            if val_items and (step + 1) % cfg.val_interval == 0:
                val_reward = evaluate_mean_reward(model, val_items, reward_ctx)
                log.write(
                    json.dumps(
                        {
                            "event": "validation",
                            "step": step + 1,
                            "val_reward": val_reward,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                if val_reward > best_val:
                    best_val = val_reward
                    best_step = step + 1
                    evals_since_best = 0
                    save_model(checkpoint_dir / "best.json", model)
                else:
                    evals_since_best += 1
                    if evals_since_best >= cfg.patience:
                        stopped_early = True
                        break

    if cfg.steps > 0:
        save_model(checkpoint_dir / "last.json", model)
    final_val = (
        evaluate_mean_reward(model, val_items, reward_ctx)
        if val_items
        else 0.0
    )
    return TrainLoopResult(
        steps_run=steps_run,
        best_step=best_step,
        best_val_reward=best_val,
        initial_val_reward=initial_val,
        final_val_reward=final_val,
        stopped_early=stopped_early,
    )
