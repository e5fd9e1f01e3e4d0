"""Pipeline stages over one run directory.

Each stage reads the validated config plus earlier artifacts, writes its own
artifacts under the run directory, and records them in the manifest. Layout:

    <run>/models/    autoencoder + classifier weights with sidecars
    <run>/rf/        robust feature archives, one per class, plus index
    <run>/attacks/   one folder per attacked image, plus targets and index
    <run>/reports/   metrics, sweep, summary, plots
"""

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .archives import read_json, write_json
from .autoencoder import build_autoencoder, load_autoencoder, save_autoencoder
from .config import ExperimentConfig, config_hash, normalized_dict
from .data import IndexedDataset, SplitSpec, assign_targets, ingest_dataset
from .disentangle import (
    DisentangleSettings,
    NoiseSpec,
    disentangle_robust_features,
    load_robust_feature,
    save_robust_feature,
)
from .ensemble import ModelEnsemble
from .exceptions import MissingArtifactError, RobustFeatureRejected
from .fusion import EotLoop, FusionWeights, load_attack_record, optimize_fusion, save_attack_result
from .images import load_png
from .manifest import RunManifest
from .metrics import MetricReport, clean_accuracy, perceptual_distance, ssim, tasr
from .models import build_model, save_model
from .physical import ViewCondition, ViewDistribution, robustness_sweep
from .seeding import derive_seed, numpy_generator
from .training import TrainSettings, train_autoencoder, train_classifier

log = logging.getLogger(__name__)

ENV_OUT_VAR = "ADVFUSION_OUT"


def resolve_out_dir(cfg: ExperimentConfig, cli_out: str | None) -> Path:
    """--out beats config output_dir beats $ADVFUSION_OUT beats ./runs/<hash>."""
    if cli_out:
        return Path(cli_out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    env = os.environ.get(ENV_OUT_VAR)
    if env:
        return Path(env) / config_hash(cfg)[:12]
    return Path("runs") / config_hash(cfg)[:12]


@dataclass
class StageSummary:
    stage: str
    artifacts: list[Path] = field(default_factory=list)
    details: dict = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def _load_dataset(cfg: ExperimentConfig) -> IndexedDataset:
    split = SplitSpec(
        train=cfg.dataset.split.train,
        val=cfg.dataset.split.val,
        attack=cfg.dataset.split.attack,
    )
    return ingest_dataset(
        cfg.dataset.path,
        image_size=cfg.dataset.image_size,
        split=split,
        seed=cfg.seed,
        channels=cfg.dataset.channels,
    )


def _images_float(dataset: IndexedDataset, indices: list[int]) -> torch.Tensor:
    return dataset.images[torch.tensor(indices)].to(torch.float32) / 255.0


def _codec(out: Path):
    path = out / "models" / "autoencoder.pt"
    if not path.exists():
        raise MissingArtifactError(f"autoencoder weights missing at {path}; run train-ae first")
    codec, _ = load_autoencoder(path)
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec


def _ensemble(cfg: ExperimentConfig, out: Path, model_ids: list[str]) -> ModelEnsemble:
    model_dir = out / "models"
    for mid in model_ids:
        if not (model_dir / f"{mid}.pt").exists():
            raise MissingArtifactError(
                f"classifier weights missing at {model_dir / (mid + '.pt')}; run train-models first"
            )
    # The stored sidecars are the authority on the label space.
    k = read_json((model_dir / f"{model_ids[0]}.pt").with_suffix(".json"))["class_count"]
    return ModelEnsemble.from_weights(model_dir, model_ids, k)


def _manifest(cfg: ExperimentConfig, out: Path) -> RunManifest:
    out.mkdir(parents=True, exist_ok=True)
    return RunManifest.open(out, config_hash(cfg))


def stage_train_autoencoder(cfg: ExperimentConfig, out: Path) -> StageSummary:
    dataset = _load_dataset(cfg)
    seed = derive_seed(cfg.seed, "train", "autoencoder")
    codec = build_autoencoder(
        cfg.dataset.channels, cfg.autoencoder.latent_channels, cfg.dataset.image_size,
        init_seed=seed,
    )
    settings = TrainSettings(
        epochs=cfg.autoencoder.train.epochs,
        batch_size=cfg.autoencoder.train.batch_size,
        lr=cfg.autoencoder.train.lr,
        seed=seed,
    )
    outcome = train_autoencoder(
        codec, dataset.images, dataset.splits["train"], dataset.splits["val"],
        settings, mae_budget=cfg.autoencoder.train.mae_budget,
    )
    path = out / "models" / "autoencoder.pt"
    save_autoencoder(codec, path, training_seed=seed, metrics={"val_mae": outcome["val_mae"]})
    summary = StageSummary(
        stage="train-ae",
        artifacts=[path, path.with_suffix(".json")],
        details={"val_mae": round(outcome["val_mae"], 6)},
    )
    _manifest(cfg, out).record_stage("train-ae", summary.artifacts, summary.details)
    log.info("autoencoder trained: val MAE %.4f", outcome["val_mae"])
    return summary


def stage_train_models(cfg: ExperimentConfig, out: Path) -> StageSummary:
    dataset = _load_dataset(cfg)
    summary = StageSummary(stage="train-models")
    for mid in cfg.models.surrogates + cfg.models.held_out:
        seed = derive_seed(cfg.seed, "train", mid)
        model = build_model(
            mid, class_count=dataset.class_count, in_channels=cfg.dataset.channels,
            image_size=cfg.dataset.image_size, init_seed=seed,
        )
        settings = TrainSettings(
            epochs=cfg.models.train.epochs,
            batch_size=cfg.models.train.batch_size,
            lr=cfg.models.train.lr,
            seed=seed,
        )
        augment = None
        if cfg.models.train.augment_views:
            augment = ViewDistribution(
                angle_range=tuple(cfg.eot.angle_range),
                scale_range=tuple(cfg.eot.scale_range),
                brightness_jitter=cfg.eot.brightness_jitter,
                noise_sigma=cfg.eot.noise_sigma,
            )
        outcome = train_classifier(
            model, dataset.images, dataset.labels,
            dataset.splits["train"], dataset.splits["val"], settings,
            augment_views=augment,
        )
        accuracy = outcome["val_accuracy"]
        path = out / "models" / f"{mid}.pt"
        save_model(
            model, path,
            architecture=mid,
            input_shape=(cfg.dataset.channels, cfg.dataset.image_size, cfg.dataset.image_size),
            class_count=dataset.class_count,
            training_seed=seed,
            metrics={"val_accuracy": accuracy},
        )
        summary.artifacts += [path, path.with_suffix(".json")]
        summary.details[mid] = {"val_accuracy": round(accuracy, 4)}
        if accuracy < cfg.models.train.accuracy_floor:
            summary.failures.append(
                f"{mid}: val accuracy {accuracy:.4f} below floor {cfg.models.train.accuracy_floor}"
            )
        log.info("classifier %s trained: val accuracy %.4f", mid, accuracy)
    _manifest(cfg, out).record_stage("train-models", summary.artifacts, summary.details)
    return summary


def stage_extract(cfg: ExperimentConfig, out: Path) -> StageSummary:
    dataset = _load_dataset(cfg)
    codec = _codec(out)
    ensemble = _ensemble(cfg, out, cfg.models.surrogates)
    spec = NoiseSpec(
        epsilon=cfg.noise.epsilon, n_samples=cfg.noise.n_samples, mode=cfg.noise.mode
    )
    settings = DisentangleSettings(
        gamma=cfg.disentangle.gamma,
        lr=cfg.disentangle.lr,
        iterations=cfg.disentangle.iterations,
        draws_per_step=cfg.disentangle.draws_per_step,
        worst_case_steps=cfg.disentangle.worst_case_steps,
        early_stop_loss=cfg.disentangle.early_stop_loss,
        early_stop_patience=cfg.disentangle.early_stop_patience,
        unanimous=cfg.disentangle.unanimous,
    )

    rf_dir = out / "rf"
    summary = StageSummary(stage="extract")
    accepted: list[int] = []
    rejected: dict[str, float] = {}
    train_by_class: dict[int, list[int]] = {}
    for idx in dataset.splits["train"]:
        train_by_class.setdefault(int(dataset.labels[idx]), []).append(idx)

    for class_id in range(dataset.class_count):
        pool = train_by_class.get(class_id, [])
        if not pool:
            summary.failures.append(f"class {class_id}: no training exemplars")
            continue
        picker = numpy_generator(derive_seed(cfg.seed, "exemplars", class_id))
        count = min(cfg.disentangle.exemplars, len(pool))
        chosen = sorted(int(i) for i in picker.choice(pool, size=count, replace=False))
        exemplars = _images_float(dataset, chosen)
        try:
            rf = disentangle_robust_features(
                class_id, exemplars, ensemble, codec, spec, settings,
                seed=derive_seed(cfg.seed, "extract", class_id),
            )
        except RobustFeatureRejected as err:
            rejected[str(class_id)] = round(err.achieved_score, 4)
            summary.failures.append(f"class {class_id}: {err}")
            log.warning("robust feature rejected for class %d: %s", class_id, err)
            continue
        tensor_path, meta_path = save_robust_feature(rf_dir, rf)
        summary.artifacts += [tensor_path, meta_path]
        accepted.append(class_id)
        log.info("robust feature class %d: score %.4f", class_id, rf.robustness_score)

    index_path = rf_dir / "index.json"
    write_json(index_path, {
        "accepted": accepted,
        "rejected": rejected,
        "gamma": cfg.disentangle.gamma,
        "noise": {"epsilon": cfg.noise.epsilon, "n_samples": cfg.noise.n_samples,
                  "mode": cfg.noise.mode},
    })
    summary.artifacts.append(index_path)
    summary.details = {"accepted": len(accepted), "rejected": len(rejected)}
    _manifest(cfg, out).record_stage("extract", summary.artifacts, summary.details)
    return summary


def _attack_items(cfg: ExperimentConfig, dataset: IndexedDataset) -> list[dict]:
    """Deterministic attack subset with assigned targets; empty split is vacuous."""
    pool = list(dataset.splits["attack"])
    if not pool:
        return []
    picker = numpy_generator(derive_seed(cfg.seed, "attack-pick"))
    count = min(cfg.dataset.attack_count, len(pool))
    chosen = sorted(int(i) for i in picker.choice(pool, size=count, replace=False))
    labels = [int(dataset.labels[i]) for i in chosen]
    targets = assign_targets(labels, dataset.class_count, derive_seed(cfg.seed, "targets"))
    return [
        {"item": pos, "index": idx, "label": lab, "target": tgt}
        for pos, (idx, lab, tgt) in enumerate(zip(chosen, labels, targets))
    ]


def _eot_loop(cfg: ExperimentConfig) -> EotLoop | None:
    if not cfg.fusion.eot_in_loop:
        return None
    dist = ViewDistribution(
        angle_range=tuple(cfg.eot.angle_range),
        scale_range=tuple(cfg.eot.scale_range),
        brightness_jitter=cfg.eot.brightness_jitter,
        noise_sigma=cfg.eot.noise_sigma,
    )
    return EotLoop(
        enabled=True,
        samples=cfg.fusion.eot_samples,
        distribution=dist,
        anchor_hardest=cfg.fusion.eot_anchor_hardest,
    )


def stage_attack(cfg: ExperimentConfig, out: Path) -> StageSummary:
    dataset = _load_dataset(cfg)
    codec = _codec(out)
    ensemble = _ensemble(cfg, out, cfg.models.surrogates)
    rf_index_path = out / "rf" / "index.json"
    if not rf_index_path.exists():
        raise MissingArtifactError(f"no robust feature index at {rf_index_path}; run extract first")
    rf_index = read_json(rf_index_path)
    available = set(rf_index["accepted"])

    weights = FusionWeights(
        target_weight=cfg.fusion.target_weight,
        clean_weight=cfg.fusion.clean_weight,
        mask_l1_per_pixel=cfg.fusion.mask_l1_per_pixel,
        mask_tv_weight=cfg.fusion.mask_tv_weight,
        ssim_weight=cfg.fusion.ssim_weight,
        tau=cfg.fusion.tau,
        lr=cfg.fusion.lr,
        iterations=cfg.fusion.iterations,
    )
    eot = _eot_loop(cfg)

    attacks_dir = out / "attacks"
    items = _attack_items(cfg, dataset)
    targets_path = attacks_dir / "targets.json"
    write_json(targets_path, {"items": items})

    summary = StageSummary(stage="attack")
    summary.artifacts.append(targets_path)
    index = []
    succeeded = 0
    started = time.monotonic()
    features = {cid: load_robust_feature(out / "rf" / f"class_{cid:03d}.npz")
                for cid in sorted(available)}
    for entry in items:
        item_dir = attacks_dir / f"item_{entry['item']:04d}"
        if entry["target"] not in available:
            summary.failures.append(
                f"item {entry['item']}: no accepted robust feature for class {entry['target']}"
            )
            index.append({**entry, "status": "skipped", "reason": "robust feature unavailable"})
            continue
        result = optimize_fusion(
            dataset.image(entry["index"]),
            entry["label"],
            features[entry["target"]],
            ensemble,
            codec,
            weights,
            seed=derive_seed(cfg.seed, "attack", entry["item"]),
            eot=eot,
            attention_normalization=cfg.fusion.attention_normalization,
            ssim_floor=cfg.fusion.ssim_floor,
            stop_confidence=cfg.fusion.stop_confidence,
            clean_ce_ceiling=cfg.fusion.clean_ce_ceiling,
            check_every=cfg.fusion.check_every,
            per_channel_mask=cfg.fusion.per_channel_mask,
            optimize_at_tau=cfg.fusion.optimize_at_tau,
        )
        save_attack_result(item_dir, result)
        succeeded += int(result.success)
        if not result.success:
            summary.failures.append(
                f"item {entry['item']}: unsuccessful after {result.iterations_run} iterations"
            )
        index.append({
            **entry,
            "status": "done",
            "success": result.success,
            "ssim": round(result.ssim_value, 4),
            "iterations_run": result.iterations_run,
            "dir": item_dir.name,
        })
        summary.artifacts += [
            item_dir / "adversarial.png", item_dir / "clean.png",
            item_dir / "tensors.npz", item_dir / "record.json",
        ]
        log.info(
            "attack item %d: label %d -> target %d, success=%s, ssim=%.3f (%d iters)",
            entry["item"], entry["label"], entry["target"],
            result.success, result.ssim_value, result.iterations_run,
        )

    index_path = attacks_dir / "index.json"
    write_json(index_path, {"items": index, "eot_in_loop": cfg.fusion.eot_in_loop})
    summary.artifacts.append(index_path)
    summary.details = {
        "attacked": len(items),
        "succeeded": succeeded,
        "elapsed_seconds": round(time.monotonic() - started, 1),
    }
    _manifest(cfg, out).record_stage("attack", summary.artifacts, summary.details)
    return summary


def _perceptual_backend(name: str):
    if name == "none":
        return None
    if name == "lpips":
        try:
            import lpips  # type: ignore
        except ImportError:
            return None

        class _LpipsBackend:
            name = "lpips"

            def __init__(self):
                self._net = lpips.LPIPS(net="alex", verbose=False)

            def distance(self, a, b):
                with torch.no_grad():
                    return float(self._net(a.unsqueeze(0) * 2 - 1, b.unsqueeze(0) * 2 - 1))

        return _LpipsBackend()
    return None


def _load_attacks(out: Path) -> tuple[list[dict], list[torch.Tensor], list[torch.Tensor], list[int]]:
    index_path = out / "attacks" / "index.json"
    if not index_path.exists():
        raise MissingArtifactError(f"no attack index at {index_path}; run attack first")
    entries = [e for e in read_json(index_path)["items"] if e.get("status") == "done"]
    if not entries:
        raise MissingArtifactError("attack index holds no completed items")
    adv, clean, targets = [], [], []
    for e in entries:
        item_dir = out / "attacks" / e["dir"]
        adv.append(load_png(item_dir / "adversarial.png"))
        clean.append(load_png(item_dir / "clean.png"))
        targets.append(int(e["target"]))
    return entries, adv, clean, targets


def stage_evaluate(cfg: ExperimentConfig, out: Path) -> StageSummary:
    dataset = _load_dataset(cfg)
    all_ids = cfg.models.surrogates + cfg.models.held_out
    ensemble = _ensemble(cfg, out, all_ids)
    entries, adv, clean, targets = _load_attacks(out)

    tasr_by_model = {mid: tasr(adv, targets, ensemble, mid) for mid in all_ids}

    val_images = dataset.split_images("val")
    val_labels = dataset.split_labels("val")
    clean_acc = {mid: clean_accuracy(val_images, val_labels, ensemble, mid) for mid in all_ids}

    ssim_values = [float(ssim(a, c)) for a, c in zip(adv, clean)]
    ssim_mean = sum(ssim_values) / len(ssim_values)

    backend = _perceptual_backend(cfg.evaluation.perceptual_backend)
    perceptual_mean = None
    backend_name = None
    if backend is not None:
        distances = [perceptual_distance(a, c, backend) for a, c in zip(adv, clean)]
        perceptual_mean = sum(distances) / len(distances)
        backend_name = backend.name
    elif cfg.evaluation.perceptual_backend != "none":
        log.warning(
            "perceptual backend %r unavailable; reporting it as such",
            cfg.evaluation.perceptual_backend,
        )

    report = MetricReport(
        tasr_by_model=tasr_by_model,
        clean_accuracy_by_model=clean_acc,
        ssim_mean=ssim_mean,
        ssim_values=ssim_values,
        perceptual_mean=perceptual_mean,
        perceptual_backend=backend_name,
        attack_count=len(entries),
    )
    reports_dir = out / "reports"
    report.write(reports_dir / "metrics.json", reports_dir / "metrics.csv")

    conditions = {
        c.name: ViewCondition(
            distance_scale=c.distance_scale,
            angle_deg=c.angle_deg,
            brightness_jitter=c.brightness_jitter,
            noise_sigma=c.noise_sigma,
            seed=derive_seed(cfg.seed, "sweep", c.name),
        )
        for c in cfg.evaluation.view_grid
    }
    sweep = robustness_sweep(adv, targets, conditions, ensemble, all_ids)
    sweep.notes = {"surrogates": cfg.models.surrogates, "held_out": cfg.models.held_out}
    sweep.write(reports_dir / "sweep.json", reports_dir / "sweep.csv")

    summary = StageSummary(
        stage="evaluate",
        artifacts=[
            reports_dir / "metrics.json", reports_dir / "metrics.csv",
            reports_dir / "sweep.json", reports_dir / "sweep.csv",
        ],
        details={
            "tasr": {k: round(v, 4) for k, v in tasr_by_model.items()},
            "ssim_mean": round(ssim_mean, 4),
        },
    )
    _manifest(cfg, out).record_stage("evaluate", summary.artifacts, summary.details)
    return summary


def stage_report(cfg: ExperimentConfig, out: Path) -> StageSummary:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports_dir = out / "reports"
    metrics_path = reports_dir / "metrics.json"
    sweep_path = reports_dir / "sweep.json"
    if not metrics_path.exists() or not sweep_path.exists():
        raise MissingArtifactError(f"reports missing under {reports_dir}; run evaluate first")
    metrics = read_json(metrics_path)
    sweep = read_json(sweep_path)

    plots_dir = reports_dir / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    models = list(metrics["tasr"])
    ax.bar(models, [metrics["tasr"][m] for m in models], color="#4878a8")
    ax.set_ylabel("tASR")
    ax.set_ylim(0, 1)
    ax.set_title("targeted attack success rate")
    fig.tight_layout()
    tasr_plot = plots_dir / "tasr.png"
    fig.savefig(tasr_plot, dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 3.5))
    for mid, per in sweep["tasr"].items():
        labels = sweep["conditions"]
        ax.plot(labels, [per[l] for l in labels], marker="o", label=mid)
    ax.set_ylabel("tASR")
    ax.set_ylim(0, 1.05)
    ax.tick_params(axis="x", rotation=30)
    ax.legend(fontsize=8)
    ax.set_title("robustness across view conditions")
    fig.tight_layout()
    sweep_plot = plots_dir / "sweep.png"
    fig.savefig(sweep_plot, dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(metrics["ssim_values"], bins=20, range=(0, 1), color="#6a9a58")
    ax.set_xlabel("SSIM vs clean")
    ax.set_ylabel("count")
    ax.set_title("stealthiness distribution")
    fig.tight_layout()
    ssim_plot = plots_dir / "ssim_hist.png"
    fig.savefig(ssim_plot, dpi=120)
    plt.close(fig)

    lines = [
        "# Run summary",
        "",
        f"Attacked images: {metrics['attack_count']}",
        "",
        "## Targeted success rate",
        "",
        "| model | tASR | clean accuracy |",
        "| --- | --- | --- |",
    ]
    for mid in metrics["tasr"]:
        lines.append(
            f"| {mid} | {metrics['tasr'][mid]:.4f} | {metrics['clean_accuracy'][mid]:.4f} |"
        )
    lines += [
        "",
        f"Mean SSIM vs clean: {metrics['ssim_mean']:.4f}",
        "",
        "## Perceptual distance",
        "",
    ]
    perceptual = metrics["perceptual"]
    if perceptual["available"]:
        lines.append(f"{perceptual['backend']}: {perceptual['mean']:.4f}")
    else:
        lines.append("unavailable (no perceptual backend configured or installed)")
    lines += [
        "",
        "## Robustness sweep",
        "",
        "| model | " + " | ".join(sweep["conditions"]) + " |",
        "| --- | " + " | ".join("---" for _ in sweep["conditions"]) + " |",
    ]
    for mid, per in sweep["tasr"].items():
        lines.append(
            "| " + mid + " | " + " | ".join(f"{per[l]:.4f}" for l in sweep["conditions"]) + " |"
        )
    lines += ["", "![tASR](plots/tasr.png)", "![sweep](plots/sweep.png)",
              "![ssim](plots/ssim_hist.png)", ""]
    summary_path = reports_dir / "summary.md"
    summary_path.write_text("\n".join(lines), encoding="utf-8")

    summary = StageSummary(
        stage="report",
        artifacts=[summary_path, tasr_plot, sweep_plot, ssim_plot],
    )
    _manifest(cfg, out).record_stage("report", summary.artifacts)
    return summary


def validate_summary(cfg: ExperimentConfig) -> dict:
    """What the validate verb prints: effective config plus its hash."""
    return {"config": normalized_dict(cfg), "config_hash": config_hash(cfg)}
