"""Command-line interface.

The commands cover the whole workflow: render a corpus (``gen-data``),
fit estimators (``pretrain-estimator``), train a redirector (``train``),
score it (``eval``), retarget single frames (``redirect``), synthesize
labelled data (``augment``), run the label-budget study (``downstream``)
and the mode comparison (``ablation``), and render figures from saved
reports (``plot``).

Conventions shared by every command:

* Option values resolve field by field as flag > config file > built-in
  default.  Config files are INI with ``[model]``, ``[train]``,
  ``[losses]`` and ``[estimator]`` sections.
* The fully-resolved configuration of a run is persisted next to its
  outputs: ``resolved_config.json`` inside output directories, or
  ``<file>.config.json`` beside single-file outputs.
* Outputs carry no timestamps, so a re-run with identical flags writes
  byte-identical files.  ``STED_DETERMINISTIC=1`` additionally pins torch
  to single-threaded deterministic kernels.
* Reports are JSON, tables are tab-separated, figures are PNG.
* Failures exit nonzero with ``<contract> error: <detail>`` on stderr.
"""

from __future__ import annotations

import configparser
import dataclasses
import functools
import json
import math
import os

import click
import numpy as np
import torch

from . import evaluation
from .checkpoint import load_generator
from .errors import (
    ConfigurationError,
    DataFormatError,
    LineageError,
    StedError,
    TrainingAborted,
)
from .losses import LossWeights
from .model import ModelConfig, default_factors, images_to_tensor, tensor_to_images
from .synthdata import DatasetReader, generate_dataset, load_manifest
from .trainer import (
    MODES,
    TrainConfig,
    pretrain_estimator,
    run_ablation_matrix,
    train,
    train_config_to_dict,
)

_DEFAULT_STEPS = 2000
_DEFAULT_ESTIMATOR_STEPS = 1000
_DEFAULT_ETA = 0.1 * math.pi

_ABLATION_COLUMNS = (
    "redirection_gaze_deg",
    "redirection_head_deg",
    "u_to_gaze_deg",
    "u_to_head_deg",
    "gaze_to_head_deg",
    "head_to_gaze_deg",
    "perceptual_gaze_head",
    "perceptual_all_factors",
)

_DOWNSTREAM_COLUMNS = (
    "labeled",
    "augmented_size",
    "baseline_gaze_deg",
    "baseline_head_deg",
    "augmented_gaze_deg",
    "augmented_head_deg",
)


# ---------------------------------------------------------------------------
# error surface


def _error_label(err: StedError) -> str:
    if isinstance(err, LineageError):
        return "configuration error (lineage)"
    if isinstance(err, ConfigurationError):
        return "configuration error"
    if isinstance(err, DataFormatError):
        return "data format error"
    if isinstance(err, TrainingAborted):
        return "training aborted"
    return "error"


def _structured_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except StedError as err:
            raise click.ClickException(f"{_error_label(err)}: {err}") from err
        except FileNotFoundError as err:
            raise click.ClickException(f"missing input: {err}") from err

    return wrapper


# ---------------------------------------------------------------------------
# config files


def _field_types(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        t = f.type
        if isinstance(t, str):
            t = {"int": int, "float": float, "str": str}.get(t)
        if t in (int, float, str):
            out[f.name] = t
    return out


_MODEL_KEYS = {
    **{k: t for k, t in _field_types(ModelConfig).items()},
    "extraneous_1dof": int,
    "extraneous_2dof": int,
    "factor_units": int,
}
_TRAIN_KEYS = {
    k: t for k, t in _field_types(TrainConfig).items() if k not in ("model",)
}
_LOSS_KEYS = _field_types(LossWeights)
_SECTIONS = {
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "losses": _LOSS_KEYS,
    "estimator": _TRAIN_KEYS,
}


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigurationError(f"config file not found or unreadable: {path}")
    out = {}
    for section in parser.sections():
        table = _SECTIONS.get(section)
        if table is None:
            raise ConfigurationError(
                f"unknown config section [{section}]; expected one of {sorted(_SECTIONS)}"
            )
        values = {}
        for key, raw in parser.items(section):
            if key not in table:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            try:
                values[key] = table[key](raw)
            except ValueError:
                raise ConfigurationError(
                    f"[{section}] {key}: cannot parse {raw!r} as {table[key].__name__}"
                ) from None
        out[section] = values
    return out


def _build_model_config(section: dict, default_image_size: int | None = None) -> ModelConfig:
    kw = dict(section)
    if default_image_size is not None:
        kw.setdefault("image_size", default_image_size)
    n1 = kw.pop("extraneous_1dof", 1)
    n2 = kw.pop("extraneous_2dof", 1)
    units = kw.pop("factor_units", 8)
    return ModelConfig(factors=default_factors(n1, n2, units=units), **kw)


def _build_train_config(
    file_cfg: dict,
    section: str = "train",
    default_image_size: int | None = None,
    **flag_overrides,
) -> TrainConfig:
    """Resolve a training configuration: flags beat the file, the file
    beats the dataclass defaults.  The networks default to the dataset's
    resolution unless the config file pins ``image_size``."""
    model = _build_model_config(file_cfg.get("model", {}), default_image_size)
    losses = LossWeights(**file_cfg.get("losses", {}))
    kw = dict(file_cfg.get(section, {}))
    kw.update({k: v for k, v in flag_overrides.items() if v is not None})
    kw.setdefault(
        "total_steps",
        _DEFAULT_STEPS if section == "train" else _DEFAULT_ESTIMATOR_STEPS,
    )
    return TrainConfig(model=model, loss_weights=losses, **kw)


# ---------------------------------------------------------------------------
# serialization helpers


def _write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _persist_config(out_dir: str, command: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    _write_json(
        os.path.join(out_dir, "resolved_config.json"),
        {"command": command, **resolved},
    )


def _persist_sidecar(out_file: str, command: str, resolved: dict) -> None:
    _write_json(f"{out_file}.config.json", {"command": command, **resolved})


def _fmt_cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return format(v, ".6g")
    return str(v)


def _write_tsv(path: str, header, rows) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(_fmt_cell(v) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _stem(path: str) -> str:
    return path[: -len(".json")] if path.endswith(".json") else path


def _parse_int_list(text: str, flag: str) -> list:
    try:
        values = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigurationError(f"{flag} expects comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigurationError(f"{flag} needs at least one value")
    return values


# ---------------------------------------------------------------------------
# figures


def _plt():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def _save_fig(fig, path: str) -> None:
    # Dropping the writer's software tag keeps the bytes reproducible.
    fig.savefig(path, dpi=110, metadata={"Software": None})
    _plt().close(fig)


def _save_image(path: str, image: np.ndarray) -> None:
    import matplotlib.image

    matplotlib.image.imsave(path, image, metadata={"Software": None})


def _downstream_figures(report: dict, out_dir: str) -> list:
    plt = _plt()
    xs = report["labeled_sizes"]
    paths = []
    for metric in ("gaze", "head"):
        fig, ax = plt.subplots(figsize=(4.4, 3.3))
        for arm, marker in (("baseline", "o"), ("augmented", "s")):
            ys = [row[f"{arm}_{metric}_deg"] for row in report["rows"]]
            ax.plot(xs, ys, marker=marker, label=arm)
        ax.set_xlabel("labelled samples")
        ax.set_ylabel(f"{metric} error (degrees)")
        ax.set_xscale("log")
        ax.set_xticks(xs, [str(x) for x in xs], minor=False)
        ax.legend()
        fig.tight_layout()
        path = os.path.join(out_dir, f"downstream_{metric}.png")
        _save_fig(fig, path)
        paths.append(path)
    return paths


def _metrics_figure(flat: dict, path: str) -> None:
    plt = _plt()
    entries = [(k, v) for k, v in flat.items() if k.endswith("_deg") and v is not None]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(entries)), 3.4))
    ax.bar([k[: -len("_deg")] for k, _ in entries], [v for _, v in entries])
    ax.set_ylabel("error (degrees)")
    ax.tick_params(axis="x", rotation=60)
    fig.tight_layout()
    _save_fig(fig, path)


def _ablation_table_figure(result: dict, path: str) -> None:
    plt = _plt()
    rows = result["rows"]
    cells = [[_fmt_cell(row["mean"].get(c)) for c in _ABLATION_COLUMNS] for row in rows]
    fig, ax = plt.subplots(figsize=(2.0 + 1.3 * len(_ABLATION_COLUMNS), 0.6 + 0.4 * len(rows)))
    ax.axis("off")
    table = ax.table(
        cellText=cells,
        rowLabels=[row["mode"] for row in rows],
        colLabels=list(_ABLATION_COLUMNS),
        loc="center",
    )
    table.auto_set_font_size(False)
    table.set_fontsize(8)
    fig.tight_layout()
    _save_fig(fig, path)


def _ablation_tsv_rows(result: dict):
    for row in result["rows"]:
        yield [row["mode"]] + [row["mean"].get(c) for c in _ABLATION_COLUMNS]


# ---------------------------------------------------------------------------
# commands


@click.group()
def main():
    """Self-transforming encoder-decoder: data, training, evaluation."""
    if os.environ.get("STED_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--persons", default=20, show_default=True, type=int)
@click.option("--frames", default=200, show_default=True, type=int, help="frames per person")
@click.option("--labeled-fraction", default=1.0, show_default=True, type=float)
@click.option("--size", default=64, show_default=True, type=int, help="image side in pixels")
@click.option("--seed", default=0, show_default=True, type=int)
@_structured_errors
def gen_data(out, persons, frames, labeled_fraction, size, seed):
    """Render a synthetic face corpus (image blob + manifest)."""
    manifest_path = generate_dataset(
        out, persons, frames, labeled_fraction, seed, image_size=size
    )
    manifest = load_manifest(manifest_path)
    n_labeled = sum(1 for r in manifest.records if r.labeled)
    _persist_config(
        out,
        "gen-data",
        {
            "persons": persons,
            "frames": frames,
            "labeled_fraction": labeled_fraction,
            "size": size,
            "seed": seed,
        },
    )
    click.echo(f"manifest: {manifest_path}")
    click.echo(f"records: {len(manifest.records)} ({n_labeled} labeled)")


@main.command("pretrain-estimator")
@click.option("--which", type=click.Choice(["training", "evaluation"]), default="evaluation",
              show_default=True, help="feature-tap backbone vs. linear-head backbone")
@click.option("--data", required=True, type=click.Path(), help="dataset manifest")
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--config", "config_path", default=None, type=click.Path(), help="INI config file")
@click.option("--steps", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--lr", default=None, type=float)
@click.option("--labeled-only/--all-records", default=True, show_default=True)
@_structured_errors
def pretrain_estimator_cmd(which, data, out, config_path, steps, seed, batch_size, lr,
                           labeled_only):
    """Fit a gaze+head estimator by direct angular regression."""
    file_cfg = _read_config_file(config_path)
    manifest = load_manifest(data)
    cfg = _build_train_config(
        file_cfg, section="estimator", default_image_size=manifest.image_size,
        total_steps=steps, seed=seed, batch_size=batch_size, lr_initial=lr,
    )
    result = pretrain_estimator(which, manifest, labeled_only, cfg, out)
    _persist_config(
        out,
        "pretrain-estimator",
        {
            "which": which,
            "data": os.path.abspath(data),
            "labeled_only": labeled_only,
            "train_config": train_config_to_dict(cfg),
        },
    )
    deg = evaluation.DEGREES_PER_RADIAN
    click.echo(f"checkpoint: {result.checkpoint_path}")
    click.echo(
        f"validation error: gaze {result.val_gaze_error * deg:.3f} deg,"
        f" head {result.val_head_error * deg:.3f} deg"
    )


@main.command("train")
@click.option("--config", "config_path", default=None, type=click.Path(), help="INI config file")
@click.option("--data", required=True, type=click.Path(), help="dataset manifest")
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--mode", default=None, type=click.Choice(list(MODES)),
              help="supervision mode (default: full)")
@click.option("--estimator", default=None, type=click.Path(),
              help="pretrained feature-tap estimator checkpoint, needed by the functional term")
@click.option("--steps", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--lr", default=None, type=float)
@_structured_errors
def train_cmd(config_path, data, out, mode, estimator, steps, seed, batch_size, lr):
    """Train a redirector; writes checkpoint, loss log and resolved config."""
    file_cfg = _read_config_file(config_path)
    manifest = load_manifest(data)
    cfg = _build_train_config(
        file_cfg, default_image_size=manifest.image_size,
        ablation_mode=mode, total_steps=steps, seed=seed,
        batch_size=batch_size, lr_initial=lr,
    )
    result = train(cfg, manifest, out, estimator=estimator)
    _persist_config(
        out,
        "train",
        {
            "data": os.path.abspath(data),
            "estimator": os.path.abspath(estimator) if estimator else None,
            "train_config": train_config_to_dict(cfg),
        },
    )
    click.echo(f"checkpoint: {result.checkpoint_path}")
    total = result.final_losses.get("total") if result.final_losses else float("nan")
    click.echo(f"steps: {result.steps}  final total loss: {total:.4f}")


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(), help="redirector checkpoint")
@click.option("--estimator-ckpt", required=True, type=click.Path(),
              help="evaluation estimator checkpoint")
@click.option("--data", required=True, type=click.Path(), help="dataset manifest")
@click.option("--report", required=True, type=click.Path(), help="output JSON path")
@click.option("--eta", default=_DEFAULT_ETA, show_default="0.1*pi", type=float,
              help="perturbation magnitude for the disentanglement probes, radians")
@click.option("--trials", default=1000, show_default=True, type=int)
@click.option("--perceptual-trials", default=None, type=int,
              help="default: min(200, trials)")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--geometry-oracle/--no-geometry-oracle", default=True, show_default=True)
@_structured_errors
def eval_cmd(ckpt, estimator_ckpt, data, report, eta, trials, perceptual_trials, seed,
             geometry_oracle):
    """Score a redirector: redirection, disentanglement, perceptual metrics.

    Writes the JSON report plus a one-row TSV and a bar-chart PNG beside it.
    """
    metrics = evaluation.evaluate(
        ckpt, estimator_ckpt, data,
        n_trials=trials, seed=seed, eta=eta,
        perceptual_trials=perceptual_trials, geometry_oracle=geometry_oracle,
    )
    _write_json(report, metrics.to_dict())
    flat = evaluation.flatten_report(metrics)
    stem = _stem(report)
    _write_tsv(stem + ".tsv", list(flat), [list(flat.values())])
    _metrics_figure(flat, stem + ".png")
    _persist_sidecar(
        report,
        "eval",
        {
            "ckpt": os.path.abspath(ckpt),
            "estimator_ckpt": os.path.abspath(estimator_ckpt),
            "data": os.path.abspath(data),
            "eta": eta,
            "trials": trials,
            "perceptual_trials": perceptual_trials,
            "seed": seed,
            "geometry_oracle": geometry_oracle,
        },
    )
    click.echo(f"report: {report}")
    for key in ("redirection_gaze_deg", "redirection_head_deg", "u_to_gaze_deg"):
        value = flat.get(key)
        click.echo(f"{key}: {'-' if value is None else format(value, '.3f')}")


def _angle_warnings(provided: dict) -> None:
    for flag, value in provided.items():
        if value is not None and not (-math.pi / 2 < value < math.pi / 2):
            click.echo(
                f"warning: {flag} {value:.4f} rad is outside (-pi/2, pi/2);"
                " proceeding outside the calibrated range",
                err=True,
            )


@main.command("redirect")
@click.option("--ckpt", required=True, type=click.Path(), help="redirector checkpoint")
@click.option("--data", required=True, type=click.Path(), help="dataset manifest")
@click.option("--input-record", required=True, type=int, help="record id of the input frame")
@click.option("--gaze-pitch", default=None, type=float, help="target gaze pitch, radians")
@click.option("--gaze-yaw", default=None, type=float, help="target gaze yaw, radians")
@click.option("--head-pitch", default=None, type=float, help="target head pitch, radians")
@click.option("--head-yaw", default=None, type=float, help="target head yaw, radians")
@click.option("--align-all-to", default=None, type=int,
              help="record id whose pose every factor (extraneous ones included) is aligned to")
@click.option("--out", required=True, type=click.Path(), help="output PNG path")
@_structured_errors
def redirect_cmd(ckpt, data, input_record, gaze_pitch, gaze_yaw, head_pitch, head_yaw,
                 align_all_to, out):
    """Retarget one frame and write the generated image.

    With no angle flags and no --align-all-to the output is a plain
    reconstruction.  Giving one angle of a pair takes the other from the
    input record's stored label.
    """
    generator, _ = load_generator(ckpt)
    generator.eval()
    manifest = load_manifest(data)
    reader = DatasetReader(manifest)
    n = len(manifest.records)
    for flag, rid in (("--input-record", input_record), ("--align-all-to", align_all_to)):
        if rid is not None and not 0 <= rid < n:
            raise ConfigurationError(f"{flag} {rid} out of range for {n} records")
    _angle_warnings(
        {
            "--gaze-pitch": gaze_pitch,
            "--gaze-yaw": gaze_yaw,
            "--head-pitch": head_pitch,
            "--head-yaw": head_yaw,
        }
    )

    record = manifest.records[input_record]
    factor_names = [f.name for f in generator.cfg.factors]
    with torch.no_grad():
        state = generator.encode(images_to_tensor(reader.image(input_record)))
        align_state = None
        align_record = None
        if align_all_to is not None:
            align_state = generator.encode(images_to_tensor(reader.image(align_all_to)))
            align_record = manifest.records[align_all_to]

        targets = {}
        for name, pitch, yaw in (
            ("gaze", gaze_pitch, gaze_yaw),
            ("head", head_pitch, head_yaw),
        ):
            if pitch is None and yaw is None:
                if align_state is None:
                    continue
                # Full alignment: stored labels when the reference record
                # has them, its pseudo-conditions otherwise.
                if align_record.labeled:
                    target = [getattr(align_record, name)[0], getattr(align_record, name)[1]]
                    targets[name] = torch.tensor([target], dtype=torch.float32)
                else:
                    idx = factor_names.index(name)
                    targets[name] = align_state.factors[idx].pseudo_condition
                continue
            if pitch is None or yaw is None:
                if not record.labeled:
                    raise ConfigurationError(
                        f"record {input_record} is unlabeled; give both --{name}-pitch"
                        f" and --{name}-yaw"
                    )
                stored = getattr(record, name)
                pitch = stored[0] if pitch is None else pitch
                yaw = stored[1] if yaw is None else yaw
            targets[name] = torch.tensor([[pitch, yaw]], dtype=torch.float32)

        output = generator.decode(
            generator.transform_state(state, targets, align_extraneous=align_state)
        )

    _save_image(out, tensor_to_images(output)[0])
    _persist_sidecar(
        out,
        "redirect",
        {
            "ckpt": os.path.abspath(ckpt),
            "data": os.path.abspath(data),
            "input_record": input_record,
            "gaze_pitch": gaze_pitch,
            "gaze_yaw": gaze_yaw,
            "head_pitch": head_pitch,
            "head_yaw": head_yaw,
            "align_all_to": align_all_to,
        },
    )
    mode = "reconstruction" if not targets and align_all_to is None else (
        "all-factor alignment" if align_all_to is not None else "redirection"
    )
    click.echo(f"{mode}: {out}")


@main.command("augment")
@click.option("--ckpt", required=True, type=click.Path(), help="redirector checkpoint")
@click.option("--data", required=True, type=click.Path(), help="dataset manifest")
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--multiplier", default=2, show_default=True, type=int,
              help="synthetic records per labelled record")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--name", default="augmented", show_default=True)
@_structured_errors
def augment_cmd(ckpt, data, out, multiplier, seed, name):
    """Synthesize labelled records by redirecting toward density-sampled poses."""
    generator, _ = load_generator(ckpt)
    generator.eval()
    manifest = load_manifest(data)
    kde = evaluation.fit_condition_kde(evaluation.condition_points(manifest))
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, evaluation._AUGMENT_STREAM])
    )
    augmented = evaluation.augment_dataset(
        generator, manifest, kde, multiplier, rng, out, name=name
    )
    _persist_config(
        out,
        "augment",
        {
            "ckpt": os.path.abspath(ckpt),
            "data": os.path.abspath(data),
            "multiplier": multiplier,
            "seed": seed,
            "name": name,
        },
    )
    n_synth = sum(1 for r in augmented.records if r.origin == "synthetic")
    click.echo(f"manifest: {os.path.join(out, name + '.manifest.json')}")
    click.echo(f"records: {len(augmented.records)} ({n_synth} synthetic)")


@main.command("downstream")
@click.option("--config", "config_path", default=None, type=click.Path(), help="INI config file")
@click.option("--data", required=True, type=click.Path(), help="dataset manifest")
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--sizes", default="250,1000", show_default=True,
              help="comma-separated labelled-set budgets")
@click.option("--seeds", default="0", show_default=True, help="comma-separated seeds")
@click.option("--mode", default="ST-ED", show_default=True, type=click.Choice(list(MODES)),
              help="redirector supervision mode")
@click.option("--multiplier", default=2, show_default=True, type=int)
@click.option("--holdout-persons", default=4, show_default=True, type=int)
@click.option("--steps", default=None, type=int, help="redirector steps override")
@click.option("--estimator-steps", default=None, type=int)
@_structured_errors
def downstream_cmd(config_path, data, out, sizes, seeds, mode, multiplier,
                   holdout_persons, steps, estimator_steps):
    """Label-budget study: estimator trained with vs. without synthetic data.

    Per seed and budget, a redirector is trained on the budget's labelled
    subset, the subset is augmented, and held-out-person gaze/head errors
    of estimators trained on both versions are compared.  Writes
    ``downstream.json``, ``downstream.tsv`` (seed means) and one curve
    figure per metric.
    """
    budget_list = _parse_int_list(sizes, "--sizes")
    seed_list = _parse_int_list(seeds, "--seeds")
    file_cfg = _read_config_file(config_path)
    manifest = load_manifest(data)
    size = manifest.image_size
    os.makedirs(out, exist_ok=True)

    per_seed = []
    for seed in seed_list:
        red_cfg = _build_train_config(
            file_cfg, default_image_size=size, ablation_mode=mode,
            total_steps=steps, seed=seed,
        )
        est_cfg = _build_train_config(
            file_cfg, section="estimator", default_image_size=size,
            total_steps=estimator_steps, seed=seed,
        )
        cfg = evaluation.DownstreamConfig(
            redirector=red_cfg,
            estimator=est_cfg,
            holdout_persons=holdout_persons,
            multiplier=multiplier,
            seed=seed,
        )
        result = evaluation.downstream_experiment(
            budget_list, manifest, cfg, os.path.join(out, f"seed{seed}")
        )
        per_seed.append(result)
        click.echo(f"seed {seed}: {len(result['rows'])} budgets done")

    mean_rows = []
    for j, budget in enumerate(budget_list):
        cells = [r["rows"][j] for r in per_seed]
        row = {"labeled": budget, "augmented_size": cells[0]["augmented_size"]}
        for key in _DOWNSTREAM_COLUMNS[2:]:
            row[key] = sum(c[key] for c in cells) / len(cells)
        mean_rows.append(row)
    report = {
        "labeled_sizes": budget_list,
        "seeds": seed_list,
        "rows": mean_rows,
        "per_seed": per_seed,
        "multiplier": multiplier,
        "holdout_persons": holdout_persons,
        "redirector_mode": mode,
        "test_records": per_seed[0]["test_records"],
    }
    report_path = os.path.join(out, "downstream.json")
    _write_json(report_path, report)
    _write_tsv(
        os.path.join(out, "downstream.tsv"),
        list(_DOWNSTREAM_COLUMNS),
        [[row[c] for c in _DOWNSTREAM_COLUMNS] for row in mean_rows],
    )
    figures = _downstream_figures(report, out)
    _persist_config(
        out,
        "downstream",
        {
            "data": os.path.abspath(data),
            "sizes": budget_list,
            "seeds": seed_list,
            "mode": mode,
            "multiplier": multiplier,
            "holdout_persons": holdout_persons,
            "redirector_config": train_config_to_dict(
                _build_train_config(
                    file_cfg, default_image_size=size, ablation_mode=mode, total_steps=steps
                )
            ),
            "estimator_config": train_config_to_dict(
                _build_train_config(
                    file_cfg, section="estimator", default_image_size=size,
                    total_steps=estimator_steps,
                )
            ),
        },
    )
    click.echo(f"report: {report_path}")
    for path in figures:
        click.echo(f"figure: {path}")


@main.command("ablation")
@click.option("--config", "config_path", default=None, type=click.Path(), help="INI config file")
@click.option("--data", required=True, type=click.Path(), help="dataset manifest")
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--modes", default=",".join(MODES), show_default=True,
              help="comma-separated supervision modes")
@click.option("--seeds", default="0", show_default=True, help="comma-separated seeds")
@click.option("--estimator", default=None, type=click.Path(),
              help="feature-tap estimator checkpoint for modes using the functional term")
@click.option("--eval-estimator", required=True, type=click.Path(),
              help="evaluation estimator checkpoint")
@click.option("--steps", default=None, type=int)
@click.option("--trials", default=500, show_default=True, type=int)
@click.option("--eval-seed", default=0, show_default=True, type=int)
@click.option("--eta", default=_DEFAULT_ETA, show_default="0.1*pi", type=float)
@click.option("--perceptual-trials", default=100, show_default=True, type=int)
@_structured_errors
def ablation_cmd(config_path, data, out, modes, seeds, estimator, eval_estimator, steps,
                 trials, eval_seed, eta, perceptual_trials):
    """Train and score every (mode, seed) cell; writes the comparison table.

    Outputs ``ablation.json``, ``ablation.tsv`` (one row per mode, seed
    means) and a rendered table figure.
    """
    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    seed_list = _parse_int_list(seeds, "--seeds")
    file_cfg = _read_config_file(config_path)
    manifest = load_manifest(data)
    base_cfg = _build_train_config(
        file_cfg, default_image_size=manifest.image_size, total_steps=steps
    )
    result = run_ablation_matrix(
        base_cfg, mode_list, seed_list, manifest, out, eval_estimator,
        train_estimator=estimator,
        n_trials=trials, eval_seed=eval_seed, eta=eta,
        perceptual_trials=perceptual_trials,
        on_cell=lambda mode, seed, _r: click.echo(f"done: {mode} seed {seed}"),
    )
    _write_json(os.path.join(out, "ablation.json"), result)
    _write_tsv(
        os.path.join(out, "ablation.tsv"),
        ["mode"] + list(_ABLATION_COLUMNS),
        _ablation_tsv_rows(result),
    )
    _ablation_table_figure(result, os.path.join(out, "ablation_table.png"))
    _persist_config(
        out,
        "ablation",
        {
            "data": os.path.abspath(data),
            "modes": mode_list,
            "seeds": seed_list,
            "estimator": os.path.abspath(estimator) if estimator else None,
            "eval_estimator": os.path.abspath(eval_estimator),
            "trials": trials,
            "eval_seed": eval_seed,
            "eta": eta,
            "perceptual_trials": perceptual_trials,
            "base_config": train_config_to_dict(base_cfg),
        },
    )
    click.echo(f"table: {os.path.join(out, 'ablation.tsv')}")


@main.command("plot")
@click.option("--report", "report_path", required=True, type=click.Path(),
              help="report JSON written by eval, downstream, or ablation")
@click.option("--out-dir", required=True, type=click.Path())
@_structured_errors
def plot_cmd(report_path, out_dir):
    """Render figures from a saved report JSON."""
    try:
        with open(report_path) as f:
            data = json.load(f)
    except json.JSONDecodeError as err:
        raise DataFormatError(f"report {report_path} is not valid JSON: {err}") from None
    os.makedirs(out_dir, exist_ok=True)

    if isinstance(data, dict) and "labeled_sizes" in data and "rows" in data:
        paths = _downstream_figures(data, out_dir)
    elif isinstance(data, dict) and "modes" in data and "rows" in data:
        path = os.path.join(out_dir, "ablation_table.png")
        _ablation_table_figure(data, path)
        paths = [path]
    elif isinstance(data, dict) and "redirection" in data and "disentanglement" in data:
        flat = evaluation.flatten_report(evaluation.MetricsReport.from_dict(data))
        path = os.path.join(out_dir, "metrics.png")
        _metrics_figure(flat, path)
        paths = [path]
    else:
        raise DataFormatError(
            f"report {report_path} matches no known layout (downstream, ablation, metrics)"
        )
    _persist_config(out_dir, "plot", {"report": os.path.abspath(report_path)})
    for path in paths:
        click.echo(f"figure: {path}")


if __name__ == "__main__":
    main()
