"""Measurement protocols for trained redirectors.

Covers redirection error, per-factor disentanglement error, a feature-space
perceptual proxy, KDE-based condition sampling, dataset augmentation, and
the semi-supervised downstream comparison.  The low-level metric functions
take live modules, return radians, and trust their callers; the report
entry points (:func:`evaluate`, :func:`downstream_experiment`) load
checkpoints, enforce estimator lineage, and report degrees.

Every metric draws its per-trial randomness from a stream seeded by
``(seed, stream tag, trial index)``, so results are identical however the
trials are batched or ordered.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np
import torch

from .checkpoint import load_estimator, load_generator
from .errors import ConfigurationError, DataFormatError, LineageError
from .model import images_to_tensor, tensor_to_images
from .rotor import angular_error, pitchyaw_to_vector
from .synthdata import (
    DatasetManifest,
    DatasetReader,
    RecordMeta,
    _round9,
    load_manifest,
    read_geometry,
    relabel_manifest,
    split_persons,
    write_manifest,
)
from .trainer import TrainConfig, mode_loss_weights, pretrain_estimator, train

DEGREES_PER_RADIAN = 180.0 / math.pi

# Score for a generated image whose pose the geometry readback cannot
# recover: a quarter turn, the expected error of an uninformative answer.
NOT_FOUND_PENALTY = math.pi / 2

_REDIRECTION_STREAM = 0x12ED
_DISENTANGLE_STREAM = 0xD15E
_PERCEPTUAL_STREAM = 0x9E2C
_AUGMENT_STREAM = 0xA7A6
_BASELINE_STREAM = 0xBA5E


def _trial_rng(seed: int, stream: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, trial]))


def _as_manifest(manifest) -> DatasetManifest:
    if isinstance(manifest, str):
        return load_manifest(manifest)
    return manifest


def _angles(estimator, images: torch.Tensor):
    """Gaze/head readings for a batch: ``(gaze, head, found)``.

    ``estimator`` is either a module returning an estimate with ``.gaze``
    and ``.head``, or the string ``"geometry"`` for the renderer-inverse
    readback.  ``found`` is all-True for module estimators; the readback
    reports which images actually carried a recoverable pose.
    """
    if isinstance(estimator, str):
        if estimator != "geometry":
            raise ConfigurationError(f"unknown estimator {estimator!r}; pass a module or 'geometry'")
        arr = tensor_to_images(images)
        gaze = np.zeros((len(arr), 2))
        head = np.zeros((len(arr), 2))
        found = np.zeros(len(arr), dtype=bool)
        for i, img in enumerate(arr):
            reading = read_geometry(img)
            gaze[i] = reading.gaze
            head[i] = reading.head
            found[i] = reading.found
        return (
            torch.as_tensor(gaze, dtype=torch.float32),
            torch.as_tensor(head, dtype=torch.float32),
            torch.as_tensor(found),
        )
    est = estimator(images)
    return est.gaze, est.head, torch.ones(images.shape[0], dtype=torch.bool)


def _pairwise_err(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return angular_error(pitchyaw_to_vector(a), pitchyaw_to_vector(b))


def _penalised(err: torch.Tensor, found: torch.Tensor) -> torch.Tensor:
    return torch.where(found, err, torch.full_like(err, NOT_FOUND_PENALTY))


def redirection_error(
    generator,
    estimator,
    manifest,
    n_trials: int = 1000,
    seed: int = 0,
    batch_size: int = 50,
    geometry_oracle: bool = True,
    target_source="records",
) -> dict:
    """How far redirected images land from their intended gaze/head targets.

    Each trial draws an input record and a target condition, redirects the
    input image to that condition, and measures the angular gap between
    the estimator's reading of the output and the intended target.
    ``target_source="records"`` takes the targets from a second drawn
    record's stored labels (the dataset's own label distribution); passing
    a :class:`ConditionDistribution` draws them from that KDE instead.
    Returns mean errors in radians; with ``geometry_oracle`` the
    renderer-inverse readings are reported alongside (``*_oracle`` keys,
    plus the fraction of outputs the readback could parse).
    """
    if n_trials < 1:
        raise ConfigurationError(f"n_trials must be positive, got {n_trials}")
    if isinstance(target_source, str) and target_source != "records":
        raise ConfigurationError(
            f"target_source must be 'records' or a ConditionDistribution, got {target_source!r}"
        )
    manifest = _as_manifest(manifest)
    reader = DatasetReader(manifest)
    n = manifest.n_records
    input_ids = np.empty(n_trials, dtype=np.int64)
    targets4 = np.empty((n_trials, 4))
    for i in range(n_trials):
        rng = _trial_rng(seed, _REDIRECTION_STREAM, i)
        input_ids[i] = rng.integers(n)
        if isinstance(target_source, ConditionDistribution):
            targets4[i] = target_source.sample(1, rng)[0]
        else:
            gaze, head = reader.labels([rng.integers(n)])
            targets4[i, :2] = gaze[0]
            targets4[i, 2:] = head[0]

    generator.eval()
    if not isinstance(estimator, str):
        estimator.eval()
    sums = {"gaze": 0.0, "head": 0.0, "gaze_oracle": 0.0, "head_oracle": 0.0}
    found_total = 0
    with torch.no_grad():
        for start in range(0, n_trials, batch_size):
            ids = input_ids[start : start + batch_size]
            chunk = targets4[start : start + batch_size]
            x = images_to_tensor(reader.images(ids))
            target_gaze = torch.as_tensor(chunk[:, :2], dtype=torch.float32)
            target_head = torch.as_tensor(chunk[:, 2:], dtype=torch.float32)
            generated = generator.redirect(x, {"gaze": target_gaze, "head": target_head})

            est_gaze, est_head, found = _angles(estimator, generated)
            sums["gaze"] += float(_penalised(_pairwise_err(est_gaze, target_gaze), found).sum())
            sums["head"] += float(_penalised(_pairwise_err(est_head, target_head), found).sum())
            if geometry_oracle:
                oracle_gaze, oracle_head, ofound = _angles("geometry", generated)
                sums["gaze_oracle"] += float(
                    _penalised(_pairwise_err(oracle_gaze, target_gaze), ofound).sum()
                )
                sums["head_oracle"] += float(
                    _penalised(_pairwise_err(oracle_head, target_head), ofound).sum()
                )
                found_total += int(ofound.sum())

    out = {"gaze": sums["gaze"] / n_trials, "head": sums["head"] / n_trials, "n_trials": n_trials}
    if geometry_oracle:
        out["gaze_oracle"] = sums["gaze_oracle"] / n_trials
        out["head_oracle"] = sums["head_oracle"] / n_trials
        out["oracle_found_rate"] = found_total / n_trials
    return out


def _disentanglement_draws(seed: int, n_trials: int, n_records: int, factor_keys, dofs, eta: float):
    """Record picks and per-factor perturbations for every trial.

    One record index per trial from the trial's own stream, then one
    uniform ``[-eta, eta]`` draw per condition dimension from a stream
    keyed by ``(trial, factor key)``.  Keying perturbations by factor
    rather than by position in the source set makes a joint run decompose
    exactly into the mean of its single-factor runs.  Exposed separately
    so the draw bounds can be checked directly.
    """
    ids = np.empty(n_trials, dtype=np.int64)
    eps = [np.empty((n_trials, d)) for d in dofs]
    for i in range(n_trials):
        rng = _trial_rng(seed, _DISENTANGLE_STREAM, i)
        ids[i] = rng.integers(n_records)
        for j, (key, d) in enumerate(zip(factor_keys, dofs)):
            frng = np.random.default_rng(
                np.random.SeedSequence([seed, _DISENTANGLE_STREAM, i, key])
            )
            eps[j][i] = frng.uniform(-eta, eta, d)
    return ids, eps


def disentanglement_error(
    generator,
    estimator,
    manifest,
    source_factors,
    target: str,
    eta: float = 0.1 * math.pi,
    n_trials: int = 1000,
    seed: int = 0,
    batch_size: int = 50,
) -> float:
    """Mean effect of perturbing ``source_factors`` on the ``target`` reading.

    Per trial: encode an image, decode it untouched, then for each source
    factor separately nudge that factor's condition by uniform noise in
    ``[-eta, eta]`` per dimension, re-decode, and measure the angular shift
    of the estimator's ``target`` reading between the two reconstructions.
    The trial scores the mean over the perturbed factors; the result (in
    radians) is the mean over trials.  A perfectly disentangled model
    scores zero: foreign factors should not move gaze or head.
    """
    if not (isinstance(eta, (int, float)) and math.isfinite(eta) and eta >= 0):
        raise ConfigurationError(f"eta must be a finite non-negative number, got {eta!r}")
    if target not in ("gaze", "head"):
        raise ConfigurationError(f"target must be 'gaze' or 'head', got {target!r}")
    if n_trials < 1:
        raise ConfigurationError(f"n_trials must be positive, got {n_trials}")
    names = list(source_factors)
    if not names or len(set(names)) != len(names):
        raise ConfigurationError("source_factors must be a non-empty list of distinct factor names")
    if target in names:
        raise ConfigurationError(
            f"cannot perturb {target!r} while measuring it; a factor's effect on itself is not leakage"
        )
    factor_names = [s.name for s in generator.cfg.factors]
    dofs = []
    keys = []
    for name in names:
        spec = generator.cfg.factor(name)
        if spec.dof == 0:
            raise ConfigurationError(f"factor {name!r} has no condition to perturb")
        dofs.append(spec.dof)
        keys.append(factor_names.index(name))

    manifest = _as_manifest(manifest)
    reader = DatasetReader(manifest)
    ids, eps = _disentanglement_draws(seed, n_trials, manifest.n_records, keys, dofs, eta)

    generator.eval()
    if not isinstance(estimator, str):
        estimator.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, n_trials, batch_size):
            chunk = ids[start : start + batch_size]
            x = images_to_tensor(reader.images(chunk))
            state = generator.encode(x)
            base = generator.decode(state)
            base_gaze, base_head, base_found = _angles(estimator, base)
            base_qty = base_gaze if target == "gaze" else base_head
            for j, name in enumerate(names):
                idx = factor_names.index(name)
                cond = state.factors[idx].pseudo_condition + torch.as_tensor(
                    eps[j][start : start + batch_size], dtype=torch.float32
                )
                perturbed = generator.decode(generator.transform_state(state, {name: cond}))
                pert_gaze, pert_head, pert_found = _angles(estimator, perturbed)
                qty = pert_gaze if target == "gaze" else pert_head
                err = _penalised(_pairwise_err(qty, base_qty), base_found & pert_found)
                total += float(err.sum())
    return total / (len(names) * n_trials)


def perceptual_proxy(image_a: torch.Tensor, image_b: torch.Tensor, estimator) -> float:
    """Feature-space distance between two image batches.

    Unit-normalizes each estimator feature map along channels, takes the
    squared difference summed over channels, and averages over positions,
    batch, and layers.  Zero exactly for identical inputs, symmetric, and
    meant to track perceived dissimilarity rather than raw pixel gaps.
    """
    if image_a.shape != image_b.shape:
        raise ValueError(f"shape mismatch: {tuple(image_a.shape)} vs {tuple(image_b.shape)}")
    estimator.eval()
    with torch.no_grad():
        feats_a = estimator(image_a).features
        feats_b = estimator(image_b).features
        total = 0.0
        for fa, fb in zip(feats_a, feats_b):
            na = fa / torch.sqrt((fa * fa).sum(dim=1, keepdim=True) + 1e-10)
            nb = fb / torch.sqrt((fb * fb).sum(dim=1, keepdim=True) + 1e-10)
            total += float(((na - nb) ** 2).sum(dim=1).mean())
    return total / len(feats_a)


def condition_points(manifest) -> np.ndarray:
    """Labeled records' ``(gaze pitch, gaze yaw, head pitch, head yaw)`` rows."""
    manifest = _as_manifest(manifest)
    rows = [(*r.gaze, *r.head) for r in manifest.records if r.labeled]
    return np.array(rows, dtype=np.float64).reshape(len(rows), 4)


@dataclass(frozen=True, eq=False)
class ConditionDistribution:
    """Gaussian KDE over 4-D condition points with a diagonal bandwidth."""

    support: np.ndarray
    bandwidth: np.ndarray

    def sample(self, n_draws: int, rng: np.random.Generator) -> np.ndarray:
        """Draw conditions: a support point plus Gaussian noise, with the
        noise clipped to three bandwidths per dimension so draws cannot
        stray far outside the observed label range."""
        idx = rng.integers(len(self.support), size=n_draws)
        noise = rng.normal(size=(n_draws, 4)) * self.bandwidth
        noise = np.clip(noise, -3.0 * self.bandwidth, 3.0 * self.bandwidth)
        return self.support[idx] + noise


def fit_condition_kde(points, min_count: int = 10) -> ConditionDistribution:
    """Fit the condition sampler to ``(n, 4)`` labeled condition rows.

    Bandwidth per dimension is the sample standard deviation scaled by
    Scott's factor ``n**(-1/8)`` for four dimensions.  Datasets with fewer
    than ``min_count`` labeled rows are rejected: a KDE over a handful of
    points would mostly replay them.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ConfigurationError(f"points must be shaped (n, 4), got {pts.shape}")
    n = len(pts)
    if n < min_count:
        raise ConfigurationError(f"need at least {min_count} labeled conditions, got {n}")
    if not np.isfinite(pts).all():
        raise ConfigurationError("condition points must be finite")
    sigma = pts.std(axis=0, ddof=1) if n > 1 else np.zeros(4)
    bandwidth = sigma * n ** (-1.0 / 8.0)
    return ConditionDistribution(support=pts.copy(), bandwidth=bandwidth)


def augment_dataset(
    generator,
    manifest,
    kde: ConditionDistribution,
    multiplier: int,
    rng: np.random.Generator,
    out_dir: str,
    name: str = "augmented",
    batch_size: int = 32,
) -> DatasetManifest:
    """Grow the labeled subset ``multiplier``-fold with redirected images.

    The output dataset holds the labeled records unchanged plus, per
    labeled record and extra round, one synthetic image: the record's image
    redirected to a gaze/head target drawn from ``kde``.  Draw order is one
    4-vector per synthetic record, source records in manifest order,
    rounds outermost; each draw is rounded to stored-label precision
    before use, so the written labels equal the targets the images were
    actually generated for.  Synthetic records keep the source person id,
    are marked ``origin="synthetic"``, and are all labeled.  The source
    blob is only read, never touched.
    """
    manifest = _as_manifest(manifest)
    if isinstance(multiplier, bool) or not isinstance(multiplier, int) or multiplier < 1:
        raise ConfigurationError(f"multiplier must be an integer >= 1, got {multiplier!r}")
    labeled = [r for r in manifest.records if r.labeled]
    if not labeled:
        raise ConfigurationError("nothing to augment: the dataset has no labeled records")
    reader = DatasetReader(manifest)
    os.makedirs(out_dir, exist_ok=True)

    plans = []
    for _ in range(multiplier - 1):
        for r in labeled:
            draw = kde.sample(1, rng)[0]
            vals = [_round9(v) for v in draw]
            plans.append((r, (vals[0], vals[1]), (vals[2], vals[3])))

    generator.eval()
    blob_path = os.path.join(out_dir, f"{name}.blob")
    records = []
    with open(blob_path, "wb") as blob:
        offset = 0
        for r in labeled:
            raw = reader.image(r.id).tobytes()
            blob.write(raw)
            records.append(replace(r, id=len(records), offset=offset, length=len(raw)))
            offset += len(raw)
        with torch.no_grad():
            for start in range(0, len(plans), batch_size):
                chunk = plans[start : start + batch_size]
                x = images_to_tensor(reader.images([p[0].id for p in chunk]))
                target_gaze = torch.tensor([p[1] for p in chunk], dtype=torch.float32)
                target_head = torch.tensor([p[2] for p in chunk], dtype=torch.float32)
                out = tensor_to_images(
                    generator.redirect(x, {"gaze": target_gaze, "head": target_head})
                )
                for img, (src, gaze, head) in zip(out, chunk):
                    raw = img.tobytes()
                    blob.write(raw)
                    records.append(
                        RecordMeta(
                            id=len(records),
                            person_id=src.person_id,
                            labeled=True,
                            gaze=gaze,
                            head=head,
                            offset=offset,
                            length=len(raw),
                            origin="synthetic",
                        )
                    )
                    offset += len(raw)

    out_manifest = DatasetManifest(
        version=manifest.version,
        image_size=manifest.image_size,
        blob_path=blob_path,
        records=tuple(records),
        truth_path=None,
    )
    path = os.path.join(out_dir, f"{name}.manifest.json")
    write_manifest(out_manifest, path)
    return load_manifest(path)


def evaluate_estimator(estimator, manifest, batch_size: int = 64) -> dict:
    """Mean angular errors (radians) of an estimator against stored labels."""
    manifest = _as_manifest(manifest)
    reader = DatasetReader(manifest)
    n = manifest.n_records
    if not isinstance(estimator, str):
        estimator.eval()
    gaze_sum = head_sum = 0.0
    with torch.no_grad():
        for start in range(0, n, batch_size):
            ids = list(range(start, min(start + batch_size, n)))
            x = images_to_tensor(reader.images(ids))
            gaze_np, head_np = reader.labels(ids)
            est_gaze, est_head, found = _angles(estimator, x)
            true_gaze = torch.as_tensor(gaze_np, dtype=torch.float32)
            true_head = torch.as_tensor(head_np, dtype=torch.float32)
            gaze_sum += float(_penalised(_pairwise_err(est_gaze, true_gaze), found).sum())
            head_sum += float(_penalised(_pairwise_err(est_head, true_head), found).sum())
    return {"gaze": gaze_sum / n, "head": head_sum / n, "n_records": n}


def label_distance_baseline(manifest, n_pairs: int = 2000, seed: int = 0) -> dict:
    """Mean angular distance between the labels of independent record pairs.

    This is the redirection error a redirector with no usable signal should
    land near: when its output ignores the requested target, the measured
    gap is just the distance between two draws from the label distribution.
    """
    manifest = _as_manifest(manifest)
    n = manifest.n_records
    a_ids = np.empty(n_pairs, dtype=np.int64)
    b_ids = np.empty(n_pairs, dtype=np.int64)
    for i in range(n_pairs):
        rng = _trial_rng(seed, _BASELINE_STREAM, i)
        a_ids[i] = rng.integers(n)
        b_ids[i] = rng.integers(n)
    records = manifest.records
    gaze_a = torch.tensor([records[i].gaze for i in a_ids], dtype=torch.float64)
    gaze_b = torch.tensor([records[i].gaze for i in b_ids], dtype=torch.float64)
    head_a = torch.tensor([records[i].head for i in a_ids], dtype=torch.float64)
    head_b = torch.tensor([records[i].head for i in b_ids], dtype=torch.float64)
    return {
        "gaze": float(_pairwise_err(gaze_a, gaze_b).mean()),
        "head": float(_pairwise_err(head_a, head_b).mean()),
        "n_pairs": n_pairs,
    }


@dataclass
class MetricsReport:
    """Everything one evaluation run measured, in degrees, plus provenance."""

    redirection: dict
    disentanglement: dict
    perceptual: dict
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "redirection": dict(self.redirection),
            "disentanglement": dict(self.disentanglement),
            "perceptual": dict(self.perceptual),
            "metadata": dict(self.metadata),
        }

    @staticmethod
    def from_dict(payload: dict) -> "MetricsReport":
        try:
            return MetricsReport(
                redirection=dict(payload["redirection"]),
                disentanglement=dict(payload["disentanglement"]),
                perceptual=dict(payload["perceptual"]),
                metadata=dict(payload["metadata"]),
            )
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"malformed metrics report: {exc}") from exc


def flatten_report(report: MetricsReport) -> dict:
    """One flat row per report, for tables and delimited output."""
    red = report.redirection
    dis = report.disentanglement
    per = report.perceptual
    return {
        "redirection_gaze_deg": red.get("gaze_deg"),
        "redirection_head_deg": red.get("head_deg"),
        "redirection_gaze_oracle_deg": red.get("gaze_oracle_deg"),
        "redirection_head_oracle_deg": red.get("head_oracle_deg"),
        "u_to_gaze_deg": dis.get("u_to_gaze"),
        "u_to_head_deg": dis.get("u_to_head"),
        "gaze_to_head_deg": dis.get("gaze_to_head"),
        "head_to_gaze_deg": dis.get("head_to_gaze"),
        "perceptual_gaze_head": per.get("gaze_head"),
        "perceptual_all_factors": per.get("all_factors"),
    }


def _perceptual_scores(generator, estimator, reader, n_pairs, seed, batch_size):
    n = reader.manifest.n_records
    a_ids = np.empty(n_pairs, dtype=np.int64)
    b_ids = np.empty(n_pairs, dtype=np.int64)
    for i in range(n_pairs):
        rng = _trial_rng(seed, _PERCEPTUAL_STREAM, i)
        a_ids[i] = rng.integers(n)
        b_ids[i] = rng.integers(n)
    gh_sum = all_sum = 0.0
    with torch.no_grad():
        for start in range(0, n_pairs, batch_size):
            ids = a_ids[start : start + batch_size]
            tids = b_ids[start : start + batch_size]
            x = images_to_tensor(reader.images(ids))
            xb = images_to_tensor(reader.images(tids))
            gaze_np, head_np = reader.labels(tids)
            targets = {
                "gaze": torch.as_tensor(gaze_np, dtype=torch.float32),
                "head": torch.as_tensor(head_np, dtype=torch.float32),
            }
            state = generator.encode(x)
            state_b = generator.encode(xb)
            gen_gh = generator.decode(generator.transform_state(state, targets))
            gen_all = generator.decode(
                generator.transform_state(state, targets, align_extraneous=state_b)
            )
            k = len(ids)
            gh_sum += perceptual_proxy(gen_gh, xb, estimator) * k
            all_sum += perceptual_proxy(gen_all, xb, estimator) * k
    return {"gaze_head": gh_sum / n_pairs, "all_factors": all_sum / n_pairs}


def evaluate(
    generator_checkpoint: str,
    estimator_checkpoint: str,
    manifest,
    n_trials: int = 1000,
    seed: int = 0,
    eta: float = 0.1 * math.pi,
    perceptual_trials: int | None = None,
    batch_size: int = 50,
    geometry_oracle: bool = True,
) -> MetricsReport:
    """Full measurement pass over a trained redirector checkpoint.

    Loads the generator and the measuring estimator, refuses an estimator
    whose parameters shaped the generator's training loss (their checkpoint
    fingerprints must differ), and reports redirection, disentanglement,
    and perceptual numbers in degrees.
    """
    generator, gen_ckpt = load_generator(generator_checkpoint)
    estimator, est_ckpt = load_estimator(estimator_checkpoint)
    trained_with = gen_ckpt.extra.get("estimator_sha256")
    if trained_with is not None and trained_with == est_ckpt.params_sha256:
        raise LineageError(
            "this estimator shaped the generator's training loss; "
            "measure with an independently trained one"
        )
    estimator.eval()
    estimator.requires_grad_(False)
    manifest = _as_manifest(manifest)
    reader = DatasetReader(manifest)

    red = redirection_error(
        generator, estimator, manifest, n_trials, seed, batch_size, geometry_oracle
    )
    redirection = {
        "gaze_deg": red["gaze"] * DEGREES_PER_RADIAN,
        "head_deg": red["head"] * DEGREES_PER_RADIAN,
    }
    if geometry_oracle:
        redirection["gaze_oracle_deg"] = red["gaze_oracle"] * DEGREES_PER_RADIAN
        redirection["head_oracle_deg"] = red["head_oracle"] * DEGREES_PER_RADIAN
        redirection["oracle_found_rate"] = red["oracle_found_rate"]

    def dis(sources, target):
        value = disentanglement_error(
            generator, estimator, manifest, sources, target, eta, n_trials, seed, batch_size
        )
        return value * DEGREES_PER_RADIAN

    unsupervised = [s.name for s in generator.cfg.factors if s.dof and not s.supervised]
    disentanglement = {
        "u_to_gaze": dis(unsupervised, "gaze") if unsupervised else None,
        "u_to_head": dis(unsupervised, "head") if unsupervised else None,
        "gaze_to_head": dis(["gaze"], "head"),
        "head_to_gaze": dis(["head"], "gaze"),
    }

    n_pairs = perceptual_trials if perceptual_trials is not None else min(200, n_trials)
    perceptual = _perceptual_scores(generator, estimator, reader, n_pairs, seed, batch_size)

    metadata = {
        "generator_checkpoint": os.path.abspath(generator_checkpoint),
        "generator_sha256": gen_ckpt.params_sha256,
        "estimator_sha256": est_ckpt.params_sha256,
        "ablation_mode": gen_ckpt.extra.get("ablation_mode"),
        "dataset": os.path.basename(manifest.blob_path),
        "n_records": manifest.n_records,
        "n_trials": n_trials,
        "perceptual_trials": n_pairs,
        "seed": seed,
        "eta": eta,
        "angle_units": "degrees",
    }
    return MetricsReport(
        redirection=redirection,
        disentanglement=disentanglement,
        perceptual=perceptual,
        metadata=metadata,
    )


@dataclass(frozen=True)
class DownstreamConfig:
    """Recipe for the semi-supervised augmentation comparison.

    ``redirector`` trains the generator on each label budget;
    ``estimator`` is the recipe shared by the baseline and augmented
    estimator arms, so both start from the same init and step count.
    """

    redirector: TrainConfig
    estimator: TrainConfig
    holdout_persons: int = 4
    multiplier: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.holdout_persons < 1:
            raise ConfigurationError("holdout_persons must be >= 1")
        if self.multiplier < 1:
            raise ConfigurationError("multiplier must be >= 1")


def downstream_experiment(labeled_sizes, manifest, cfg: DownstreamConfig, out_dir: str) -> dict:
    """Does redirector-made data help a downstream estimator?

    Persons are split into train/test once.  Per label budget: train a
    baseline estimator on the labeled subset alone; train the redirector
    semi-supervised on the same subset plus unlabeled data; augment the
    labeled subset ``multiplier``-fold with redirected images at KDE-drawn
    conditions; train the second estimator on that; score both arms on the
    held-out persons.  Returns one row per budget with degree errors.
    """
    manifest = _as_manifest(manifest)
    sizes = list(labeled_sizes)
    if not sizes or any((not isinstance(s, int)) or s < 1 for s in sizes):
        raise ConfigurationError("labeled_sizes must be positive integers")
    os.makedirs(out_dir, exist_ok=True)
    train_path, test_path = split_persons(
        manifest, cfg.holdout_persons, cfg.seed, out_dir, "downstream"
    )
    train_manifest = load_manifest(train_path)
    test_manifest = load_manifest(test_path)

    rows = []
    for budget in sizes:
        bdir = os.path.join(out_dir, f"budget{budget}")
        os.makedirs(bdir, exist_ok=True)
        relabeled_path = relabel_manifest(
            train_manifest, budget, cfg.seed, os.path.join(bdir, "labeled.manifest.json")
        )
        relabeled = load_manifest(relabeled_path)

        base_res = pretrain_estimator(
            "evaluation", relabeled, True, cfg.estimator, os.path.join(bdir, "baseline_estimator")
        )
        base_est, _ = load_estimator(base_res.checkpoint_path)
        base_err = evaluate_estimator(base_est, test_manifest)

        loss_estimator = None
        if mode_loss_weights(cfg.redirector).functional:
            fd_res = pretrain_estimator(
                "training", relabeled, True, cfg.estimator, os.path.join(bdir, "loss_estimator")
            )
            loss_estimator = fd_res.checkpoint_path
        red_res = train(
            cfg.redirector, relabeled, os.path.join(bdir, "redirector"), estimator=loss_estimator
        )
        generator, _ = load_generator(red_res.checkpoint_path)

        kde = fit_condition_kde(condition_points(relabeled))
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _AUGMENT_STREAM, budget]))
        aug_manifest = augment_dataset(generator, relabeled, kde, cfg.multiplier, rng, bdir)
        aug_res = pretrain_estimator(
            "evaluation", aug_manifest, True, cfg.estimator, os.path.join(bdir, "augmented_estimator")
        )
        aug_est, _ = load_estimator(aug_res.checkpoint_path)
        aug_err = evaluate_estimator(aug_est, test_manifest)

        rows.append(
            {
                "labeled": budget,
                "augmented_size": aug_manifest.n_records,
                "baseline_gaze_deg": base_err["gaze"] * DEGREES_PER_RADIAN,
                "baseline_head_deg": base_err["head"] * DEGREES_PER_RADIAN,
                "augmented_gaze_deg": aug_err["gaze"] * DEGREES_PER_RADIAN,
                "augmented_head_deg": aug_err["head"] * DEGREES_PER_RADIAN,
                "redirector_checkpoint": red_res.checkpoint_path,
            }
        )
    return {
        "rows": rows,
        "labeled_sizes": sizes,
        "test_records": test_manifest.n_records,
        "holdout_persons": cfg.holdout_persons,
        "multiplier": cfg.multiplier,
        "redirector_mode": cfg.redirector.ablation_mode,
        "seed": cfg.seed,
    }
