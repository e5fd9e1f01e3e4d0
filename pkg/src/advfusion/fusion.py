"""Feature fusion: graft a robust class latent onto a clean image.

The attack works in two coupled spaces. In latent space, a spatial attention
map derived from the ensemble's gradient marks where the clean image's own
class evidence lives; those locations are suppressed and a channel-blend
weight alpha mixes in the target's robust feature. In pixel space, a pattern
mask confines the decoded fusion to as small and smooth a region as the
objective allows while SSIM pulls the composite toward the clean image.
Both alpha and the mask live behind sigmoids, so optimization is over logits.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .archives import load_tensors, read_json, save_tensors, write_json
from .autoencoder import ConvAutoencoder
from .disentangle import RobustFeature
from .ensemble import ModelEnsemble
from .images import quantize, save_png
from .metrics import l1_norm, ssim, total_variation
from .physical import ViewCondition, ViewDistribution, simulate_view
from .seeding import derive_seed

ATTENTION_NORMALIZATIONS = ("none", "mean", "zscore")


@dataclass(frozen=True)
class FusionWeights:
    """Loss weights and optimizer knobs for the fusion attack.

    mask_l1_per_pixel is a per-pixel budget; the loop scales it by 1/(H*W) so
    the sparsity pressure does not grow with image resolution.
    """

    target_weight: float = 1.0       # toward the target class
    clean_weight: float = 0.1        # away from the clean class, clipped
    mask_l1_per_pixel: float = 1e-3  # sparsity pressure on the pattern mask
    mask_tv_weight: float = 1e-2     # smoothness pressure on the pattern mask
    ssim_weight: float = 1.0         # similarity reward toward the clean image
    tau: float = 0.7                 # transparency applied at emission
    lr: float = 0.05
    iterations: int = 300

    def __post_init__(self):
        for name in ("target_weight", "clean_weight", "mask_l1_per_pixel",
                     "mask_tv_weight", "ssim_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass(frozen=True)
class EotLoop:
    """In-loop view sampling; off means the loop sees only the raw composite."""

    enabled: bool = True
    samples: int = 4
    distribution: ViewDistribution = field(default_factory=ViewDistribution)
    include_identity: bool = True
    anchor_hardest: bool = True

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")

    def hardest_condition(self) -> ViewCondition:
        """Corner of the distribution: max angle at min scale, no photometrics.

        Random draws almost never land on both extremes at once, so without
        this anchor the optimizer leaves the far-oblique small-scale view
        untrained even though it dominates the worst case.
        """
        return ViewCondition(
            distance_scale=self.distribution.scale_range[0],
            angle_deg=self.distribution.angle_range[1],
        )


@dataclass
class AttackResult:
    """Everything one fusion attack produced, ready for persistence."""

    adversarial: torch.Tensor        # emitted image, 8-bit lattice
    clean: torch.Tensor              # quantized clean reference
    clean_class: int
    target_class: int
    success: bool                    # ensemble consensus says target_class
    per_model_success: dict[str, bool]
    ssim_value: float
    iterations_run: int
    stopped_early: bool
    # Index into loss_history of the state the result carries; equals
    # len(loss_history) when the post-final-step state was returned.
    returned_iteration: int
    alpha_logits: torch.Tensor
    mask_logits: torch.Tensor
    attention: torch.Tensor
    loss_history: list[tuple[float, float, float]]  # (adversarial, cognitive, total)
    seed: int
    settings: dict = field(default_factory=dict)


def spatial_attention(
    clean_latent: torch.Tensor,
    clean_class: int,
    ensemble: ModelEnsemble,
    codec: ConvAutoencoder,
    normalization: str = "mean",
) -> torch.Tensor:
    """Latent-shaped map in (0, 1) of where the clean class evidence sits.

    Gradient of the ensemble loss toward the clean class, taken at the clean
    latent, magnitude-normalized, squashed by a sigmoid. A zero gradient field
    degrades to a uniform 0.5 map rather than NaN.
    """
    if normalization not in ATTENTION_NORMALIZATIONS:
        raise ValueError(
            f"normalization must be one of {ATTENTION_NORMALIZATIONS}, got {normalization!r}"
        )
    latent = clean_latent.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = ensemble.ce_loss(codec.decode(latent), clean_class)
        (grad,) = torch.autograd.grad(loss, latent)
    magnitude = grad.abs()

    if normalization == "mean":
        scale = magnitude.mean()
        if scale > 0:
            magnitude = magnitude / scale
    elif normalization == "zscore":
        std = magnitude.std(unbiased=False)
        if std > 0:
            magnitude = (magnitude - magnitude.mean()) / std
        else:
            magnitude = magnitude - magnitude.mean()
    return torch.sigmoid(magnitude)


def suppress_clean_features(clean_latent: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Damp the latent where attention is high: (1 - S) * latent."""
    if clean_latent.shape != attention.shape:
        raise ValueError(
            f"latent and attention shapes differ: {tuple(clean_latent.shape)}"
            f" vs {tuple(attention.shape)}"
        )
    return (1.0 - attention) * clean_latent


def fuse(
    target_latent: torch.Tensor,
    alpha: torch.Tensor,
    suppressed_latent: torch.Tensor,
    mask: torch.Tensor,
    clean_image: torch.Tensor,
    codec: ConvAutoencoder,
) -> torch.Tensor:
    """Decode alpha-blended latents and composite onto the clean image via the mask."""
    if alpha.shape != target_latent.shape:
        raise ValueError("alpha must match the latent shape")
    decoded = codec.decode(alpha * target_latent + suppressed_latent)
    if mask.dim() != 3 or mask.shape[-2:] != decoded.shape[-2:]:
        raise ValueError(
            f"mask must be (1,H,W) or (C,H,W) matching the image, got {tuple(mask.shape)}"
        )
    return mask * decoded + (1.0 - mask) * clean_image


def adversarial_loss(
    adv: torch.Tensor,
    target_class: int,
    clean_class: int,
    ensemble: ModelEnsemble,
    target_weight: float,
    clean_weight: float,
    clean_ce_ceiling: float = 10.0,
) -> torch.Tensor:
    """w_t * CE(target) - w_c * min(CE(clean), ceiling), ensemble-averaged.

    The repulsion term is capped: once the clean class is thoroughly lost,
    pushing its cross-entropy toward infinity would dominate the objective
    for no gain. Accepts a single image or a batch of views (mean over views).
    """
    if int(target_class) == int(clean_class):
        raise ValueError("target_class and clean_class must differ")
    pull = ensemble.ce_loss(adv, target_class)
    push = ensemble.ce_loss(adv, clean_class)
    return target_weight * pull - clean_weight * torch.clamp(push, max=clean_ce_ceiling)


def cognitive_loss(
    mask: torch.Tensor,
    adv: torch.Tensor,
    clean: torch.Tensor,
    l1_weight: float,
    tv_weight: float,
    ssim_weight: float,
) -> torch.Tensor:
    """Stealth pressure: small mask, smooth mask, composite similar to clean."""
    return (
        l1_weight * l1_norm(mask)
        + tv_weight * total_variation(mask)
        - ssim_weight * ssim(adv, clean)
    )


def apply_transparency(
    alpha: torch.Tensor,
    mask: torch.Tensor,
    tau: float,
    target_latent: torch.Tensor,
    suppressed_latent: torch.Tensor,
    clean_image: torch.Tensor,
    codec: ConvAutoencoder,
) -> torch.Tensor:
    """Final composite with the mask scaled by tau; tau=0 returns the clean image."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    return fuse(target_latent, alpha, suppressed_latent, tau * mask, clean_image, codec)


def optimize_fusion(
    clean_image: torch.Tensor,
    clean_class: int,
    feature: RobustFeature,
    ensemble: ModelEnsemble,
    codec: ConvAutoencoder,
    weights: FusionWeights = FusionWeights(),
    seed: int = 0,
    *,
    eot: EotLoop | None = None,
    attention_normalization: str = "mean",
    ssim_floor: float = 0.75,
    stop_confidence: float = 0.85,
    clean_ce_ceiling: float = 10.0,
    check_every: int = 10,
    per_channel_mask: bool = False,
    optimize_at_tau: bool = True,
) -> AttackResult:
    """Jointly optimize the channel blend and the pattern mask for one image.

    Success checks run on the emitted image: transparency applied, pixels
    snapped to the 8-bit lattice, exactly what evaluation will reload from
    disk. With ``optimize_at_tau`` (the default) the loss also sees the
    tau-scaled composite, so the loop optimizes the image it will actually
    emit; disabling it optimizes the raw-mask composite, which at low tau can
    leave the emitted image well short of the loss's apparent progress.

    The loop stops early once the ensemble consensus reaches the target with
    average target probability at least ``stop_confidence`` while SSIM holds
    the floor; the confidence requirement keeps gradients flowing past the
    bare decision flip, which is what gives the pattern a margin that
    survives transformations and carries to unseen models. Otherwise it keeps
    the best successful candidate seen, and failing that, returns the final
    state flagged unsuccessful.
    """
    if clean_image.dim() != 3:
        raise ValueError("optimize_fusion takes a single (C,H,W) image")
    if int(feature.target_class) == int(clean_class):
        raise ValueError("target class equals the clean class; nothing to attack")

    clean = clean_image.detach()
    clean_q = quantize(clean)
    with torch.no_grad():
        clean_latent = codec.encode(clean)
    attention = spatial_attention(
        clean_latent, clean_class, ensemble, codec, attention_normalization
    ).detach()
    suppressed = suppress_clean_features(clean_latent, attention).detach()
    target_latent = feature.latent.detach()

    mask_channels = clean.shape[0] if per_channel_mask else 1
    alpha_logits = torch.zeros_like(target_latent, requires_grad=True)
    mask_logits = torch.zeros(
        (mask_channels, clean.shape[1], clean.shape[2]), requires_grad=True
    )
    optimizer = torch.optim.Adam([alpha_logits, mask_logits], lr=weights.lr)
    l1_weight = weights.mask_l1_per_pixel / (clean.shape[1] * clean.shape[2])

    def emit(a_logits: torch.Tensor, m_logits: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            composite = apply_transparency(
                torch.sigmoid(a_logits), torch.sigmoid(m_logits), weights.tau,
                target_latent, suppressed, clean, codec,
            )
        return quantize(composite)

    best: dict | None = None
    target = int(feature.target_class)

    def consider(a_logits: torch.Tensor, m_logits: torch.Tensor, iteration: int):
        nonlocal best
        emitted = emit(a_logits, m_logits)
        member = [ensemble.predict(emitted, mid).probabilities for mid in ensemble.ids]
        hit = int(torch.stack(member).mean(dim=0).argmax()) == target
        all_hit = all(int(p.argmax()) == target for p in member)
        # Weakest member gates the margin; a pattern only one surrogate likes
        # is exactly the kind that fails to transfer.
        confidence = min(float(p[target]) for p in member)
        similarity = float(ssim(emitted, clean_q))
        key = (hit, all_hit, confidence >= stop_confidence, similarity)
        if hit and (best is None or key > best["key"]):
            best = {
                "alpha_logits": a_logits.detach().clone(),
                "mask_logits": m_logits.detach().clone(),
                "emitted": emitted,
                "ssim": similarity,
                "iteration": iteration,
                "key": key,
            }
        return hit and all_hit, confidence, similarity

    history: list[tuple[float, float, float]] = []
    stopped_early = False
    for it in range(weights.iterations):
        alpha = torch.sigmoid(alpha_logits)
        mask = torch.sigmoid(mask_logits)
        loop_mask = weights.tau * mask if optimize_at_tau else mask
        adv = fuse(target_latent, alpha, suppressed, loop_mask, clean, codec)

        views = adv.unsqueeze(0)
        if eot is not None and eot.enabled:
            sampled = [
                simulate_view(adv, eot.distribution.sample(derive_seed(seed, "eot", it, k)))
                for k in range(eot.samples)
            ]
            stack = ([adv] if eot.include_identity else []) + sampled
            if eot.anchor_hardest:
                stack.append(simulate_view(adv, eot.hardest_condition()))
            views = torch.stack(stack)

        l_adv = adversarial_loss(
            views, feature.target_class, clean_class, ensemble,
            weights.target_weight, weights.clean_weight, clean_ce_ceiling,
        )
        l_cog = cognitive_loss(
            mask, adv, clean, l1_weight, weights.mask_tv_weight, weights.ssim_weight
        )
        total = l_adv + l_cog
        history.append(
            (float(l_adv.detach()), float(l_cog.detach()), float(total.detach()))
        )

        if it % check_every == 0:
            hit, confidence, similarity = consider(alpha_logits, mask_logits, it)
            if hit and confidence >= stop_confidence and similarity >= ssim_floor:
                stopped_early = True
                break

        optimizer.zero_grad()
        total.backward()
        optimizer.step()

    if not stopped_early:
        # Final state after the last step still deserves a look.
        consider(alpha_logits, mask_logits, len(history))

    if best is not None:
        chosen_alpha, chosen_mask = best["alpha_logits"], best["mask_logits"]
        emitted, similarity = best["emitted"], best["ssim"]
        returned_iteration = best["iteration"]
    else:
        chosen_alpha = alpha_logits.detach().clone()
        chosen_mask = mask_logits.detach().clone()
        emitted = emit(chosen_alpha, chosen_mask)
        similarity = float(ssim(emitted, clean_q))
        returned_iteration = len(history)

    per_model = {
        mid: int(ensemble.predict(emitted, mid).logits.argmax()) == int(feature.target_class)
        for mid in ensemble.ids
    }
    success = ensemble.consensus_label(emitted) == int(feature.target_class)

    settings = {
        "weights": asdict(weights),
        "attention_normalization": attention_normalization,
        "ssim_floor": ssim_floor,
        "stop_confidence": stop_confidence,
        "clean_ce_ceiling": clean_ce_ceiling,
        "check_every": check_every,
        "per_channel_mask": per_channel_mask,
        "optimize_at_tau": optimize_at_tau,
        "eot": None if eot is None else {
            "enabled": eot.enabled,
            "samples": eot.samples,
            "include_identity": eot.include_identity,
            "anchor_hardest": eot.anchor_hardest,
            "distribution": asdict(eot.distribution),
        },
    }
    return AttackResult(
        adversarial=emitted,
        clean=clean_q,
        clean_class=int(clean_class),
        target_class=int(feature.target_class),
        success=bool(success),
        per_model_success=per_model,
        ssim_value=similarity,
        iterations_run=len(history),
        stopped_early=stopped_early,
        returned_iteration=int(returned_iteration),
        alpha_logits=chosen_alpha,
        mask_logits=chosen_mask,
        attention=attention,
        loss_history=history,
        seed=int(seed),
        settings=settings,
    )


def save_attack_result(directory: Path | str, result: AttackResult) -> None:
    """Persist one attack: PNGs, named tensors, and a JSON record."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_png(directory / "adversarial.png", result.adversarial)
    save_png(directory / "clean.png", result.clean)
    save_tensors(
        directory / "tensors.npz",
        alpha_logits=result.alpha_logits,
        mask_logits=result.mask_logits,
        attention=result.attention,
    )
    write_json(
        directory / "record.json",
        {
            "clean_class": result.clean_class,
            "target_class": result.target_class,
            "success": result.success,
            "per_model_success": dict(sorted(result.per_model_success.items())),
            "ssim": round(result.ssim_value, 4),
            "iterations_run": result.iterations_run,
            "stopped_early": result.stopped_early,
            "returned_iteration": result.returned_iteration,
            "seed": result.seed,
            "loss_final": [round(v, 6) for v in result.loss_history[-1]],
            "settings": result.settings,
        },
    )


def load_attack_record(directory: Path | str) -> dict:
    directory = Path(directory)
    record = read_json(directory / "record.json")
    record["tensors"] = load_tensors(directory / "tensors.npz")
    return record
