"""Extraction of class-level robust features by latent-space optimization.

A robust feature for a target class is a latent whose decoded image the whole
surrogate ensemble keeps assigning to that class while the pixels are pushed
around inside an epsilon-ball. The latent starts from the mean encoding of a
few exemplars and is optimized against noise until the measured robustness
score clears the acceptance threshold.
"""

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .archives import load_tensors, read_json, save_tensors, write_json
from .autoencoder import ConvAutoencoder
from .ensemble import ModelEnsemble
from .exceptions import RobustFeatureRejected
from .seeding import derive_seed, torch_generator

NOISE_MODES = ("expectation", "worst_case")


@dataclass(frozen=True)
class NoiseSpec:
    """Pixel-space perturbation budget the feature must survive."""

    epsilon: float = 8.0 / 255.0
    n_samples: int = 100
    mode: str = "expectation"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.mode not in NOISE_MODES:
            raise ValueError(f"mode must be one of {NOISE_MODES}, got {self.mode!r}")


@dataclass
class RobustFeature:
    """An accepted class-level latent plus the evidence that it qualified."""

    latent: torch.Tensor
    target_class: int
    robustness_score: float
    gamma_threshold: float
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DisentangleSettings:
    gamma: float = 0.8
    lr: float = 1e-2
    iterations: int = 500
    draws_per_step: int = 4
    worst_case_steps: int = 5
    early_stop_loss: float = 0.02
    early_stop_patience: int = 10
    eval_draws: int | None = None  # None: reuse spec.n_samples for scoring
    unanimous: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.draws_per_step < 1:
            raise ValueError(f"draws_per_step must be >= 1, got {self.draws_per_step}")
        if self.worst_case_steps < 1:
            raise ValueError(f"worst_case_steps must be >= 1, got {self.worst_case_steps}")


def init_target_latent(exemplars: torch.Tensor, codec: ConvAutoencoder) -> torch.Tensor:
    """Mean latent of the exemplar batch; the optimization starting point."""
    if exemplars.dim() != 4 or exemplars.shape[0] < 1:
        raise ValueError(f"expected (K,C,H,W) exemplars, got shape {tuple(exemplars.shape)}")
    with torch.no_grad():
        return codec.encode(exemplars).mean(dim=0)


def sample_bounded_noise(shape, epsilon: float, n: int, seed: int) -> torch.Tensor:
    """(n, *shape) uniform draws from the L-infinity ball of radius epsilon."""
    gen = torch_generator(seed)
    return (torch.rand(n, *shape, generator=gen) * 2 - 1) * epsilon


def ascend_noise(
    decoded: torch.Tensor,
    noise: torch.Tensor,
    ensemble: ModelEnsemble,
    target: int,
    epsilon: float,
    steps: int,
) -> torch.Tensor:
    """Signed-gradient ascent of the ensemble loss over the noise ball.

    The decoded image is treated as fixed; only the perturbation moves. Each
    draw in the batch climbs its own loss surface.
    """
    base = decoded.detach().unsqueeze(0)
    delta = noise.detach().clone()
    step = epsilon / 4.0
    for _ in range(steps):
        delta.requires_grad_(True)
        perturbed = torch.clamp(base + delta, 0.0, 1.0)
        loss = ensemble.ce_loss(perturbed, target)
        (grad,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            delta = torch.clamp(delta + step * grad.sign(), -epsilon, epsilon)
    return delta.detach()


def _success_mask(
    perturbed: torch.Tensor, ensemble: ModelEnsemble, target: int, unanimous: bool
) -> torch.Tensor:
    """(B,) bool: which perturbed images the ensemble assigns to the target."""
    if unanimous:
        votes = [ensemble.predict_batch(perturbed, mid) == target for mid in ensemble.ids]
        return torch.stack(votes).all(dim=0)
    return ensemble.consensus_labels(perturbed) == target


def robustness_score(
    latent: torch.Tensor,
    target_class: int,
    ensemble: ModelEnsemble,
    codec: ConvAutoencoder,
    spec: NoiseSpec,
    seed: int,
    unanimous: bool = False,
    worst_case_steps: int = 5,
) -> float:
    """Fraction of noise draws the decoded latent survives as the target class.

    In worst_case mode each draw is first driven uphill; a draw counts as
    survived only if both the raw draw and its ascended version classify as
    the target, so the score lower-bounds the expectation-mode score.
    """
    with torch.no_grad():
        decoded = codec.decode(latent)
    noise = sample_bounded_noise(decoded.shape, spec.epsilon, spec.n_samples,
                                 derive_seed(seed, "score", target_class))
    survived = None
    for chunk_start in range(0, spec.n_samples, 64):
        chunk = noise[chunk_start : chunk_start + 64]
        candidates = [torch.clamp(decoded.unsqueeze(0) + chunk, 0.0, 1.0)]
        if spec.mode == "worst_case":
            worst = ascend_noise(decoded, chunk, ensemble, target_class,
                                 spec.epsilon, worst_case_steps)
            candidates.append(torch.clamp(decoded.unsqueeze(0) + worst, 0.0, 1.0))
        ok = torch.ones(chunk.shape[0], dtype=torch.bool)
        for cand in candidates:
            ok &= _success_mask(cand, ensemble, target_class, unanimous)
        survived = ok if survived is None else torch.cat([survived, ok])
    return float(survived.to(torch.float64).mean())


def disentangle_robust_features(
    target_class: int,
    exemplars: torch.Tensor,
    ensemble: ModelEnsemble,
    codec: ConvAutoencoder,
    spec: NoiseSpec,
    settings: DisentangleSettings = DisentangleSettings(),
    seed: int = 0,
) -> RobustFeature:
    """Optimize a latent that decodes to noise-robust target-class evidence.

    Raises RobustFeatureRejected (carrying the achieved score) when the final
    latent scores below ``settings.gamma``.
    """
    if not 0 <= int(target_class) < ensemble.class_count:
        raise ValueError(f"target_class {target_class} outside [0, {ensemble.class_count})")
    latent = init_target_latent(exemplars, codec).detach().clone().requires_grad_(True)
    optimizer = torch.optim.Adam([latent], lr=settings.lr)

    image_shape = (codec.in_channels, codec.image_size, codec.image_size)
    history: list[float] = []
    calm_steps = 0
    for it in range(settings.iterations):
        noise = sample_bounded_noise(
            image_shape, spec.epsilon, settings.draws_per_step,
            derive_seed(seed, "draw", target_class, it),
        )
        decoded = codec.decode(latent)
        if spec.mode == "worst_case":
            noise = ascend_noise(decoded, noise, ensemble, target_class,
                                 spec.epsilon, settings.worst_case_steps)
        perturbed = torch.clamp(decoded.unsqueeze(0) + noise, 0.0, 1.0)
        loss = ensemble.ce_loss(perturbed, target_class)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(float(loss.detach()))

        calm_steps = calm_steps + 1 if history[-1] <= settings.early_stop_loss else 0
        if calm_steps >= settings.early_stop_patience:
            break

    final = latent.detach()
    eval_spec = spec if settings.eval_draws is None else NoiseSpec(
        epsilon=spec.epsilon, n_samples=settings.eval_draws, mode=spec.mode
    )
    score = robustness_score(
        final, target_class, ensemble, codec, eval_spec,
        seed=derive_seed(seed, "eval", target_class),
        unanimous=settings.unanimous,
        worst_case_steps=settings.worst_case_steps,
    )
    objective = torch.tensor(history[-min(len(history), 20):])
    provenance = {
        "seed": int(seed),
        "iterations_run": len(history),
        "final_loss": round(float(history[-1]), 6),
        "loss_tail_mean": round(float(objective.mean()), 6),
        "loss_tail_std": round(float(objective.std(unbiased=False)), 6),
        "exemplar_count": int(exemplars.shape[0]),
        "noise": {"epsilon": spec.epsilon, "n_samples": eval_spec.n_samples, "mode": spec.mode},
        "unanimous": settings.unanimous,
    }
    if score < settings.gamma:
        raise RobustFeatureRejected(
            f"class {target_class}: robustness score {score:.4f} below threshold"
            f" {settings.gamma:.4f}",
            achieved_score=score,
            threshold=settings.gamma,
        )
    return RobustFeature(
        latent=final,
        target_class=int(target_class),
        robustness_score=score,
        gamma_threshold=settings.gamma,
        provenance=provenance,
    )


def save_robust_feature(directory: Path | str, rf: RobustFeature) -> tuple[Path, Path]:
    """Persist latent + metadata as class_<k>.npz / class_<k>.json."""
    directory = Path(directory)
    stem = f"class_{rf.target_class:03d}"
    tensor_path = directory / f"{stem}.npz"
    meta_path = directory / f"{stem}.json"
    save_tensors(tensor_path, latent=rf.latent)
    write_json(
        meta_path,
        {
            "target_class": rf.target_class,
            "robustness_score": round(rf.robustness_score, 6),
            "gamma_threshold": rf.gamma_threshold,
            "latent_shape": list(rf.latent.shape),
            "provenance": rf.provenance,
        },
    )
    return tensor_path, meta_path


def load_robust_feature(tensor_path: Path | str) -> RobustFeature:
    tensor_path = Path(tensor_path)
    meta = read_json(tensor_path.with_suffix(".json"))
    latent = load_tensors(tensor_path)["latent"]
    return RobustFeature(
        latent=latent,
        target_class=int(meta["target_class"]),
        robustness_score=float(meta["robustness_score"]),
        gamma_threshold=float(meta["gamma_threshold"]),
        provenance=meta.get("provenance", {}),
    )
