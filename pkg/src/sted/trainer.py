"""Optimization loops.

Ties data, model, and losses together: per-step pair sampling, one
discriminator and one generator update per batch, step-based learning
rate decay, JSON-lines loss logging, checkpointing, and the estimator
pretraining recipe.  Ablation modes determine both the factor list and
the set of active loss terms.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .checkpoint import load_estimator, module_sha256, save_checkpoint
from .errors import ConfigurationError, TrainingAborted
from .losses import LossWeights, TrainingBatch, loss_gan, loss_full
from .model import (
    EstimatorFd,
    EstimatorFdPrime,
    Generator,
    ModelConfig,
    PatchDiscriminator,
    images_to_tensor,
)
from .rotor import angular_error, pitchyaw_to_vector
from .synthdata import DatasetReader, load_manifest, sample_pair_batch

MODES = ("T-ED", "ST-ED", "ST-ED+fu", "full")

# Stream labels for deriving independent rng streams from one seed.
_BATCH_STREAM = 0xBA7C
_MIX_STREAM = 0x3117
_ESTIMATOR_STREAM = 0xE571


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    The learning rate at step s is ``lr_initial * lr_decay_factor ** (s //
    lr_decay_interval_steps)``, applied to both networks (the
    discriminator additionally scaled by ``disc_lr_ratio``).
    ``checkpoint_interval_steps=0`` writes only the final checkpoint.
    """

    model: ModelConfig
    total_steps: int
    batch_size: int = 20
    lr_initial: float = 1e-3
    lr_decay_factor: float = 0.8
    lr_decay_interval_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablation_mode: str = "full"
    disc_lr_ratio: float = 1.0
    checkpoint_interval_steps: int = 0

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigurationError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr_initial > 0 and math.isfinite(self.lr_initial)):
            raise ConfigurationError(f"lr_initial must be positive, got {self.lr_initial}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigurationError(
                f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}"
            )
        if self.lr_decay_interval_steps < 1:
            raise ConfigurationError("lr_decay_interval_steps must be >= 1")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ConfigurationError(f"{name} must be in [0, 1), got {v}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.ablation_mode not in MODES:
            raise ConfigurationError(
                f"ablation_mode must be one of {MODES}, got {self.ablation_mode!r}"
            )
        if self.disc_lr_ratio <= 0:
            raise ConfigurationError("disc_lr_ratio must be positive")
        if self.checkpoint_interval_steps < 0:
            raise ConfigurationError("checkpoint_interval_steps must be >= 0")


def paper_train_config(model: ModelConfig, dataset_size: int, total_steps: int) -> TrainConfig:
    """Published recipe: batch 20, Adam(0.9, 0.999) at 1e-3 with weight
    decay 1e-4, learning rate times 0.8 every half epoch."""
    half_epoch = max(1, round(dataset_size / (2 * 20)))
    return TrainConfig(
        model=model,
        total_steps=total_steps,
        batch_size=20,
        lr_initial=1e-3,
        lr_decay_factor=0.8,
        lr_decay_interval_steps=half_epoch,
        beta1=0.9,
        beta2=0.999,
        weight_decay=1e-4,
    )


def mode_model_config(cfg: TrainConfig) -> ModelConfig:
    """Factor list for the configured mode: the two baseline modes keep
    only the supervised factors, the factorized modes keep everything."""
    if cfg.ablation_mode in ("T-ED", "ST-ED"):
        return replace(cfg.model, factors=[f for f in cfg.model.factors if f.supervised])
    return cfg.model


def mode_loss_weights(cfg: TrainConfig) -> LossWeights:
    """Active loss terms per mode; inactive terms get weight zero."""
    w = cfg.loss_weights
    if cfg.ablation_mode == "T-ED":
        return replace(w, pseudo_labels=0.0, functional=0.0, disentanglement=0.0)
    if cfg.ablation_mode in ("ST-ED", "ST-ED+fu"):
        return replace(w, functional=0.0, disentanglement=0.0)
    return w


def mode_condition_source(mode: str) -> str:
    return "label" if mode == "T-ED" else "pseudo"


def lr_at(cfg: TrainConfig, step: int) -> float:
    return cfg.lr_initial * cfg.lr_decay_factor ** (step // cfg.lr_decay_interval_steps)


class NonFiniteLossError(ArithmeticError):
    """A training loss came out NaN or infinite; parameters are still the
    pre-update values when this is raised."""


def _stream_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def _to_training_batch(pair) -> TrainingBatch:
    return TrainingBatch(
        image_i=images_to_tensor(pair.input_images),
        image_t=images_to_tensor(pair.target_images),
        gaze_i=torch.as_tensor(pair.input_gaze, dtype=torch.float32),
        head_i=torch.as_tensor(pair.input_head, dtype=torch.float32),
        gaze_t=torch.as_tensor(pair.target_gaze, dtype=torch.float32),
        head_t=torch.as_tensor(pair.target_head, dtype=torch.float32),
        labeled_i=torch.as_tensor(pair.input_labeled, dtype=torch.bool),
    )


def train_step(
    generator: Generator,
    discriminator: PatchDiscriminator,
    estimator,
    batch: TrainingBatch,
    weights: LossWeights,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    mix_rng: torch.Generator,
    condition_source: str,
):
    """One paired update: generator objective, then the discriminator on
    the same (detached) generated batch.  Each optimizer only ever sees
    its own network's gradients.  Returns (breakdown, d_loss)."""
    breakdown, generated = loss_full(
        generator, discriminator, estimator, batch, weights, mix_rng, condition_source
    )
    if not bool(torch.isfinite(breakdown.total)):
        raise NonFiniteLossError(f"generator total is {float(breakdown.total.detach())!r}")
    opt_g.zero_grad(set_to_none=True)
    breakdown.total.backward()
    d_loss = loss_gan(discriminator, generated.detach(), batch.image_t, role="discriminator")
    if not bool(torch.isfinite(d_loss)):
        raise NonFiniteLossError(f"discriminator loss is {float(d_loss.detach())!r}")
    opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    opt_g.step()
    opt_d.step()
    return breakdown, d_loss


def _params_finite(*modules) -> bool:
    return all(
        bool(torch.isfinite(p).all()) for m in modules for p in m.parameters()
    )


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    steps: int
    final_losses: dict | None


def train(
    cfg: TrainConfig,
    manifest,
    out_dir: str,
    estimator=None,
    on_step=None,
) -> TrainResult:
    """Train a redirector on `manifest`, writing into `out_dir`.

    `estimator` (module or checkpoint path) is required whenever the
    functional term is active; it is frozen in place.  `on_step(step,
    generator, breakdown)` runs after each update when given.  A
    non-finite loss aborts with a reference to the newest checkpoint
    whose parameters are sound.
    """
    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    weights = mode_loss_weights(cfg)
    source = mode_condition_source(cfg.ablation_mode)
    if cfg.ablation_mode == "T-ED" and not all(r.labeled for r in manifest.records):
        raise ConfigurationError(
            "ground-truth transforms need every record labeled; relabel or switch modes"
        )
    if weights.functional and estimator is None:
        raise ConfigurationError(
            "the functional term needs a pretrained estimator; pass one or use a mode without it"
        )
    if isinstance(estimator, str):
        estimator, _ = load_estimator(estimator)
    if estimator is not None:
        estimator.eval()
        estimator.requires_grad_(False)
    # Fingerprint of the training-time estimator lands in every checkpoint so
    # evaluation can refuse to score a model with the estimator it trained on.
    estimator_sha = module_sha256(estimator) if estimator is not None else None

    model_cfg = mode_model_config(cfg)
    torch.manual_seed(cfg.seed)
    generator = Generator(model_cfg)
    discriminator = PatchDiscriminator(model_cfg)
    opt_g = torch.optim.Adam(
        generator.parameters(),
        lr=cfg.lr_initial,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(),
        lr=cfg.lr_initial * cfg.disc_lr_ratio,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    reader = DatasetReader(manifest)
    batch_rng = np.random.RandomState(_stream_seed(cfg.seed, _BATCH_STREAM))
    mix_rng = torch.Generator().manual_seed(_stream_seed(cfg.seed, _MIX_STREAM))

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "losses.jsonl")

    def save(tag: str, step: int) -> str:
        return save_checkpoint(
            os.path.join(out_dir, tag),
            {"generator": generator, "discriminator": discriminator},
            model_cfg,
            extra={
                "step": step,
                "ablation_mode": cfg.ablation_mode,
                "seed": cfg.seed,
                "train_config": train_config_to_dict(cfg),
                "estimator_sha256": estimator_sha,
            },
        )

    last_good = None
    last_row = None
    with open(log_path, "w") as log:
        for step in range(cfg.total_steps):
            lr = lr_at(cfg, step)
            for group in opt_g.param_groups:
                group["lr"] = lr
            for group in opt_d.param_groups:
                group["lr"] = lr * cfg.disc_lr_ratio
            pair = sample_pair_batch(reader, cfg.batch_size, rng=batch_rng)
            batch = _to_training_batch(pair)
            try:
                breakdown, d_loss = train_step(
                    generator, discriminator, estimator, batch, weights,
                    opt_g, opt_d, mix_rng, source,
                )
            except NonFiniteLossError as err:
                if _params_finite(generator, discriminator):
                    last_good = save("checkpoint_abort", step)
                raise TrainingAborted(
                    f"aborted at step {step}: {err}", step=step, checkpoint_path=last_good
                ) from err
            last_row = {"step": step, "lr": lr, "discriminator": float(d_loss.detach())}
            # Terms disabled by the mode are omitted entirely, not logged as 0.
            full = breakdown.as_dict()
            last_row.update(
                {k: v for k, v in full.items() if k == "total" or getattr(weights, k) != 0}
            )
            log.write(json.dumps(last_row, sort_keys=True) + "\n")
            if on_step is not None:
                on_step(step, generator, breakdown)
            interval = cfg.checkpoint_interval_steps
            if interval and (step + 1) % interval == 0 and step + 1 < cfg.total_steps:
                last_good = save(f"checkpoint_step{step + 1:06d}", step + 1)
    final = save("checkpoint", cfg.total_steps)
    return TrainResult(
        checkpoint_path=final, log_path=log_path, steps=cfg.total_steps, final_losses=last_row
    )


@dataclass
class PretrainResult:
    checkpoint_path: str
    log_path: str
    val_gaze_error: float
    val_head_error: float
    train_size: int


def _angular_sum(pred_gaze, pred_head, gaze, head):
    out = angular_error(pitchyaw_to_vector(pred_gaze), pitchyaw_to_vector(gaze)).mean()
    return out + angular_error(pitchyaw_to_vector(pred_head), pitchyaw_to_vector(head)).mean()


def pretrain_estimator(
    which: str,
    manifest,
    labeled_only: bool,
    cfg: TrainConfig,
    out_dir: str,
) -> PretrainResult:
    """Train an estimator on gaze+head regression with summed angular loss.

    ``which`` picks the network: ``training`` (feature-tap backbone, used
    inside the functional term) or ``evaluation`` (linear-head backbone,
    used for measuring).  Roughly a tenth of the persons (at least one)
    are held out; their records score the final validation errors.
    """
    if which not in ("training", "evaluation"):
        raise ConfigurationError(f"which must be 'training' or 'evaluation', got {which!r}")
    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    persons = manifest.person_ids()
    holdout = set(persons[-max(1, len(persons) // 10):])
    train_ids = [
        r.id
        for r in manifest.records
        if r.person_id not in holdout and (r.labeled or not labeled_only)
    ]
    val_ids = [r.id for r in manifest.records if r.person_id in holdout]
    if not train_ids:
        raise ConfigurationError(
            "no usable training records (labeled_only with an unlabeled split?)"
        )

    torch.manual_seed(cfg.seed)
    est = EstimatorFd(cfg.model) if which == "training" else EstimatorFdPrime(cfg.model)
    opt = torch.optim.Adam(
        est.parameters(),
        lr=cfg.lr_initial,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    reader = DatasetReader(manifest)
    rng = np.random.RandomState(_stream_seed(cfg.seed, _ESTIMATOR_STREAM))
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "losses.jsonl")
    with open(log_path, "w") as log:
        for step in range(cfg.total_steps):
            lr = lr_at(cfg, step)
            for group in opt.param_groups:
                group["lr"] = lr
            ids = [train_ids[i] for i in rng.randint(len(train_ids), size=cfg.batch_size)]
            images = images_to_tensor(reader.images(ids))
            gaze, head = reader.labels(ids)
            out = est(images)
            loss = _angular_sum(
                out.gaze,
                out.head,
                torch.as_tensor(gaze, dtype=torch.float32),
                torch.as_tensor(head, dtype=torch.float32),
            )
            if not bool(torch.isfinite(loss)):
                raise TrainingAborted(
                    f"aborted at step {step}: estimator loss is {float(loss)!r}",
                    step=step,
                    checkpoint_path=None,
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.write(
                json.dumps(
                    {"step": step, "lr": lr, "loss": float(loss.detach())}, sort_keys=True
                )
                + "\n"
            )

    est.eval()
    gaze_errors, head_errors = [], []
    with torch.no_grad():
        for lo in range(0, len(val_ids), 64):
            ids = val_ids[lo : lo + 64]
            images = images_to_tensor(reader.images(ids))
            gaze, head = reader.labels(ids)
            out = est(images)
            gaze_errors.append(
                angular_error(
                    pitchyaw_to_vector(out.gaze),
                    pitchyaw_to_vector(torch.as_tensor(gaze, dtype=torch.float32)),
                )
            )
            head_errors.append(
                angular_error(
                    pitchyaw_to_vector(out.head),
                    pitchyaw_to_vector(torch.as_tensor(head, dtype=torch.float32)),
                )
            )
    val_gaze = float(torch.cat(gaze_errors).mean()) if gaze_errors else float("nan")
    val_head = float(torch.cat(head_errors).mean()) if head_errors else float("nan")

    path = save_checkpoint(
        os.path.join(out_dir, "checkpoint"),
        {"estimator": est},
        cfg.model,
        extra={
            "estimator_kind": which,
            "labeled_only": labeled_only,
            "step": cfg.total_steps,
            "seed": cfg.seed,
            "val_gaze_error": val_gaze,
            "val_head_error": val_head,
        },
    )
    return PretrainResult(
        checkpoint_path=path,
        log_path=log_path,
        val_gaze_error=val_gaze,
        val_head_error=val_head,
        train_size=len(train_ids),
    )


def train_config_to_dict(cfg: TrainConfig) -> dict:
    from .checkpoint import model_config_to_dict

    out = {
        "total_steps": cfg.total_steps,
        "batch_size": cfg.batch_size,
        "lr_initial": cfg.lr_initial,
        "lr_decay_factor": cfg.lr_decay_factor,
        "lr_decay_interval_steps": cfg.lr_decay_interval_steps,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "weight_decay": cfg.weight_decay,
        "seed": cfg.seed,
        "ablation_mode": cfg.ablation_mode,
        "disc_lr_ratio": cfg.disc_lr_ratio,
        "checkpoint_interval_steps": cfg.checkpoint_interval_steps,
        "model": model_config_to_dict(cfg.model),
        "loss_weights": {
            "reconstruction": cfg.loss_weights.reconstruction,
            "functional": cfg.loss_weights.functional,
            "functional_feature": cfg.loss_weights.functional_feature,
            "pseudo_labels": cfg.loss_weights.pseudo_labels,
            "embedding_consistency": cfg.loss_weights.embedding_consistency,
            "disentanglement": cfg.loss_weights.disentanglement,
            "adversarial": cfg.loss_weights.adversarial,
        },
    }
    return out


def train_config_from_dict(d: dict) -> TrainConfig:
    from .checkpoint import model_config_from_dict

    try:
        return TrainConfig(
            model=model_config_from_dict(d["model"]),
            total_steps=d["total_steps"],
            batch_size=d["batch_size"],
            lr_initial=d["lr_initial"],
            lr_decay_factor=d["lr_decay_factor"],
            lr_decay_interval_steps=d["lr_decay_interval_steps"],
            beta1=d["beta1"],
            beta2=d["beta2"],
            weight_decay=d["weight_decay"],
            seed=d["seed"],
            loss_weights=LossWeights(**d["loss_weights"]),
            ablation_mode=d["ablation_mode"],
            disc_lr_ratio=d["disc_lr_ratio"],
            checkpoint_interval_steps=d["checkpoint_interval_steps"],
        )
    except (KeyError, TypeError) as err:
        raise ConfigurationError(f"malformed train config: {err}") from err


def run_ablation_matrix(
    base_cfg: TrainConfig,
    modes,
    seeds,
    manifest,
    out_dir: str,
    eval_estimator: str,
    train_estimator=None,
    n_trials: int = 500,
    eval_seed: int = 0,
    eta: float = 0.1 * math.pi,
    perceptual_trials: int = 100,
    batch_size: int = 50,
    on_cell=None,
) -> dict:
    """Train every (mode, seed) cell and measure it on shared trial draws.

    Modes that strip the unsupervised factors report None for the
    extraneous-factor disentanglement columns.  All cells are evaluated
    with the same ``eval_seed`` so the trial draws, and therefore the
    comparisons, line up across the table.  ``on_cell(mode, seed, report)``
    fires after each cell for progress reporting.
    """
    from . import evaluation

    modes = list(modes)
    seeds = list(seeds)
    if not modes or not seeds:
        raise ConfigurationError("need at least one mode and one seed")
    for mode in modes:
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; choose from {MODES}")
        cfg = replace(base_cfg, ablation_mode=mode)
        if mode_loss_weights(cfg).functional and train_estimator is None:
            raise ConfigurationError(f"mode {mode!r} trains with the functional term; pass train_estimator")

    rows = []
    for mode in modes:
        per_seed = []
        for seed in seeds:
            cfg = replace(base_cfg, ablation_mode=mode, seed=seed)
            run_dir = os.path.join(out_dir, f"{mode.replace('+', '_')}_seed{seed}")
            needs_est = bool(mode_loss_weights(cfg).functional)
            result = train(cfg, manifest, run_dir, estimator=train_estimator if needs_est else None)
            report = evaluation.evaluate(
                result.checkpoint_path,
                eval_estimator,
                manifest,
                n_trials=n_trials,
                seed=eval_seed,
                eta=eta,
                perceptual_trials=perceptual_trials,
                batch_size=batch_size,
            )
            per_seed.append(
                {
                    "seed": seed,
                    "checkpoint": result.checkpoint_path,
                    **evaluation.flatten_report(report),
                }
            )
            if on_cell is not None:
                on_cell(mode, seed, report)
        metric_keys = [k for k in per_seed[0] if k not in ("seed", "checkpoint")]
        mean = {}
        for key in metric_keys:
            vals = [row[key] for row in per_seed if row[key] is not None]
            mean[key] = sum(vals) / len(vals) if vals else None
        rows.append({"mode": mode, "per_seed": per_seed, "mean": mean})
    return {
        "rows": rows,
        "modes": modes,
        "seeds": seeds,
        "n_trials": n_trials,
        "eval_seed": eval_seed,
        "eta": eta,
    }
