"""Sensitivity sweeps over dataset construction and latent sizes.

Each sweep is a grid of values times ``trials`` independent trials. A cell
``(value, trial)`` trains one or two models and scores their embeddings with
the silhouette score. Cells are independent, so they can run in a process
pool, and the output CSV doubles as a resume ledger.

Seeds: a trial's *data* seed depends only on ``(base seed, trial)``, so the
parts of the recipe a sweep holds fixed (the background in a scale sweep,
the target in a noise sweep) really are identical across grid values. The
*training* seed is ``derive_seed(base, value_index, trial)``; that is the
``seed`` column of the output.
"""

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ConfigError, build_dataclass, load_config
from .data import (
    GrassyRecipe,
    add_isotropic_noise,
    build_grassy,
    contaminate,
    genuine_mask,
)
from .evaluate import silhouette_score
from .model import CvaeModel, VaeModel, infer_salient, vae_embed
from .rng import derive_seed
from .training import TrainConfig, TrainingError, train, vae_train

log = logging.getLogger(__name__)

SWEEP_KINDS = (
    "background_scale",
    "background_noise",
    "latent_dims",
    "target_contamination",
    "background_contamination",
)
CSV_COLUMNS = ("sweep_kind", "value", "seed", "model", "silhouette", "seconds")

# Each desk epoch is only ~40 steps on 5,000 samples, so more passes are
# needed than a full-MNIST epoch count would suggest.
DESK_EPOCHS = 40
DESK_TRIALS = 3


class SweepError(RuntimeError):
    pass


def default_train_config(**overrides):
    return replace(TrainConfig(epochs=DESK_EPOCHS), **overrides)


@dataclass
class SweepSpec:
    sweep_kind: str
    grid: tuple
    trials: int = DESK_TRIALS
    train: TrainConfig = field(default_factory=default_train_config)
    recipe: GrassyRecipe = field(default_factory=GrassyRecipe)
    seed: int = 0
    workers: int = 1
    record_seconds: bool = True

    def __post_init__(self):
        if self.sweep_kind not in SWEEP_KINDS:
            raise ValueError(f"sweep_kind must be one of {SWEEP_KINDS}, got {self.sweep_kind!r}")
        self.grid = tuple(tuple(int(d) for d in v) if self.sweep_kind == "latent_dims" else float(v) for v in self.grid)
        if not self.grid:
            raise ValueError("grid must be nonempty")
        if len(set(self.grid)) != len(self.grid):
            raise ValueError("grid values must be distinct")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        for v in self.grid:
            if self.sweep_kind == "latent_dims":
                if len(v) != 2 or min(v) < 1:
                    raise ValueError(f"latent_dims grid entries are (s_dim, z_dim) >= 1, got {v}")
            elif self.sweep_kind in ("background_scale", "background_noise") and not 0.0 <= v <= 2.0:
                raise ValueError(f"{self.sweep_kind} values must lie in [0, 2], got {v}")
            elif self.sweep_kind.endswith("contamination") and not 0.0 <= v <= 1.0:
                raise ValueError(f"contamination fractions must lie in [0, 1], got {v}")

    @property
    def models(self):
        return ("vae", "cvae") if self.sweep_kind == "background_scale" else ("cvae",)

    def cells(self):
        return [(vi, t) for vi in range(len(self.grid)) for t in range(self.trials)]

    def train_seed(self, value_index, trial):
        return derive_seed(self.seed, value_index, trial)

    def data_seed(self, trial):
        return derive_seed(self.seed, "data", trial)

    def as_dict(self):
        return {
            "sweep_kind": self.sweep_kind,
            "grid": [format_value(v) for v in self.grid],
            "trials": self.trials,
            "seed": self.seed,
            "workers": self.workers,
            "record_seconds": self.record_seconds,
            "train": self.train.as_dict(),
            "recipe": self.recipe.as_dict(),
        }


@dataclass(frozen=True)
class SweepRow:
    sweep_kind: str
    value: object
    seed: int
    model: str
    silhouette: float
    seconds: float = 0.0


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def scores(self, model="cvae"):
        """``{value: [silhouette, ...]}`` in row order."""
        out = {}
        for row in self.rows:
            if row.model == model:
                out.setdefault(row.value, []).append(row.silhouette)
        return out

    def medians(self, model="cvae"):
        return {v: float(np.median(s)) for v, s in self.scores(model).items()}


def format_value(value):
    if isinstance(value, tuple):
        return f"{value[0]}x{value[1]}"
    return format(float(value), "g")


def parse_value(text, sweep_kind):
    if sweep_kind == "latent_dims":
        s, z = text.lower().split("x")
        return int(s), int(z)
    return float(text)


# --------------------------------------------------------------------------
# one cell


def _score(points, labels):
    return float(silhouette_score(points, labels))


def _train_cvae(target, background, config):
    model = CvaeModel.from_config(target.width, config)
    train(model, target, background, config)
    return model


def _cell_data(spec, value, trial):
    """``(target, background, score_mask, train_config_overrides)`` for one cell."""
    data_seed = spec.data_seed(trial)
    kind = spec.sweep_kind
    recipe = replace(spec.recipe, seed=data_seed)
    overrides = {}
    if kind == "background_scale":
        recipe = replace(recipe, scale=value)
    target, background = build_grassy(recipe)
    mask = np.ones(len(target), dtype=bool)
    if kind == "background_noise":
        background = add_isotropic_noise(background, value, derive_seed(data_seed, "noise"))
    elif kind == "target_contamination":
        target = contaminate(target, background, value, derive_seed(data_seed, "contaminate"))
        mask = genuine_mask(target)
    elif kind == "background_contamination":
        background = contaminate(background, target, value, derive_seed(data_seed, "contaminate"))
    elif kind == "latent_dims":
        overrides = {"s_dim": value[0], "z_dim": value[1]}
    return target, background, mask, overrides


def run_cell(spec, value_index, trial):
    """Train and score every model of one ``(value, trial)`` cell."""
    value = spec.grid[value_index]
    seed = spec.train_seed(value_index, trial)
    rows = []
    try:
        target, background, mask, overrides = _cell_data(spec, value, trial)
        config = replace(spec.train, seed=seed, **overrides)
        for model_kind in spec.models:
            start = time.perf_counter()
            if model_kind == "vae":
                vae = VaeModel.initialize(
                    target.width, config.s_dim, seed=seed, recon_model=config.recon_model, hidden_dim=config.hidden_dim
                )
                vae_train(vae, target, config)
                points = vae_embed(vae, target.samples[mask])
            else:
                model = _train_cvae(target, background, config)
                points = infer_salient(model, target.samples[mask])
            score = _score(points, target.labels[mask])
            seconds = round(time.perf_counter() - start, 3) if spec.record_seconds else 0.0
            rows.append(SweepRow(spec.sweep_kind, value, seed, model_kind, score, seconds))
            log.info("%s %s trial %d %s: %.4f", spec.sweep_kind, format_value(value), trial, model_kind, score)
    except (TrainingError, ValueError, FloatingPointError) as exc:
        raise SweepError(f"{spec.sweep_kind} value={format_value(value)} trial={trial} seed={seed}: {exc}") from exc
    return rows


def _run_cell_job(args):
    return run_cell(*args)


# --------------------------------------------------------------------------
# CSV ledger


def _row_fields(row):
    return [
        row.sweep_kind,
        format_value(row.value),
        str(row.seed),
        row.model,
        format(row.silhouette, ".17g"),
        format(row.seconds, "g"),
    ]


def write_sweep_csv(result, path):
    """Columns ``sweep_kind,value,seed,model,silhouette,seconds`` in the result's row order."""
    rows = result.rows if isinstance(result, SweepResult) else list(result)
    if not rows:
        raise ValueError("refusing to write an empty sweep result")
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(_row_fields(row))
    os.replace(tmp, path)


def read_sweep_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(CSV_COLUMNS)}")
        rows = []
        for rec in reader:
            if not rec:
                continue
            if len(rec) != len(CSV_COLUMNS):
                raise ValueError(f"{path}: malformed row {rec}")
            kind, value, seed, model, score, seconds = rec
            rows.append(SweepRow(kind, parse_value(value, kind), int(seed), model, float(score), float(seconds)))
    return SweepResult(rows)


class _Appender:
    """Appends finished rows to the ledger file as cells complete."""

    def __init__(self, path):
        self.path = path
        if path is not None and not os.path.exists(path):
            with open(path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(CSV_COLUMNS)

    def add(self, rows):
        if self.path is None:
            return
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in rows:
                writer.writerow(_row_fields(row))


# --------------------------------------------------------------------------
# drivers


def run_sweep(spec, out_path=None):
    """Run every missing cell of ``spec``; rows come back in (value, trial, model) order.

    With ``out_path`` the CSV is used as a ledger: rows already present for
    this sweep are kept and their cells skipped, new rows are appended as
    cells finish, and the file is rewritten in normalized order at the end.
    """
    done = {}
    if out_path is not None and os.path.exists(out_path):
        for row in read_sweep_csv(out_path).rows:
            if row.sweep_kind == spec.sweep_kind:
                done[(row.value, row.seed, row.model)] = row

    todo = []
    for vi, trial in spec.cells():
        seed = spec.train_seed(vi, trial)
        if not all((spec.grid[vi], seed, m) in done for m in spec.models):
            todo.append((vi, trial))
    if done:
        log.info("resuming %s: %d of %d cells already done", spec.sweep_kind, len(spec.cells()) - len(todo), len(spec.cells()))

    appender = _Appender(out_path)
    if spec.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            for rows in pool.map(_run_cell_job, [(spec, vi, t) for vi, t in todo]):
                appender.add(rows)
                for row in rows:
                    done[(row.value, row.seed, row.model)] = row
    else:
        for vi, trial in todo:
            rows = run_cell(spec, vi, trial)
            appender.add(rows)
            for row in rows:
                done[(row.value, row.seed, row.model)] = row

    ordered = []
    for vi, trial in spec.cells():
        seed = spec.train_seed(vi, trial)
        ordered.extend(done[(spec.grid[vi], seed, m)] for m in spec.models)
    result = SweepResult(ordered)
    if out_path is not None:
        write_sweep_csv(result, out_path)
    return result


def _require(spec, kinds):
    if spec.sweep_kind not in kinds:
        raise ValueError(f"expected sweep_kind in {kinds}, got {spec.sweep_kind!r}")


def run_scale_sweep(spec, out_path=None):
    """Texture scale of the target varies; the background stays fixed. Trains a VAE and a cVAE per cell."""
    _require(spec, ("background_scale",))
    return run_sweep(spec, out_path)


def run_noise_sweep(spec, out_path=None):
    """Isotropic noise added to the background only; cVAE per cell."""
    _require(spec, ("background_noise",))
    return run_sweep(spec, out_path)


def run_dim_grid(spec, out_path=None):
    """cVAE per (s_dim, z_dim) pair on the default recipe."""
    _require(spec, ("latent_dims",))
    return run_sweep(spec, out_path)


def run_contamination_sweep(spec, out_path=None):
    """Target rows replaced by background images, or the reverse; scored on genuine target rows."""
    _require(spec, ("target_contamination", "background_contamination"))
    return run_sweep(spec, out_path)


RUNNERS = {
    "background_scale": run_scale_sweep,
    "background_noise": run_noise_sweep,
    "latent_dims": run_dim_grid,
    "target_contamination": run_contamination_sweep,
    "background_contamination": run_contamination_sweep,
}


def full_dim_grid(max_dim=6):
    return tuple((s, z) for s in range(1, max_dim + 1) for z in range(1, max_dim + 1))


# --------------------------------------------------------------------------
# spec files

_SPEC_KEYS = {"sweep_kind", "grid", "trials", "seed", "workers", "record_seconds"}
_RECIPE_KEYS = {"images_path", "labels_path", "digits", "n_target", "n_background", "scale", "texture_dir"}


def spec_from_values(values):
    """Build a :class:`SweepSpec` from flat key/value pairs (spec file plus flag overrides)."""
    values = dict(values)
    unknown = set(values) - _SPEC_KEYS - _RECIPE_KEYS - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown sweep keys: {', '.join(sorted(unknown))}")
    kind = values.get("sweep_kind")
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"sweep_kind must be one of {', '.join(SWEEP_KINDS)}")
    grid = values.get("grid")
    if grid is None:
        raise ConfigError("sweep spec needs a grid")
    if grid == "full" and kind == "latent_dims":
        grid = full_dim_grid()
    else:
        grid = grid if isinstance(grid, list) else [grid]
        grid = [parse_value(str(v), kind) for v in grid]
    seed = int(values.get("seed", 0))
    train_values = {k: v for k, v in values.items() if k in TrainConfig.__dataclass_fields__ and k != "seed"}
    train_values.setdefault("epochs", DESK_EPOCHS)
    config = build_dataclass(TrainConfig, {**train_values, "seed": seed})
    recipe = build_dataclass(GrassyRecipe, {k: v for k, v in values.items() if k in _RECIPE_KEYS})
    try:
        return SweepSpec(
            kind,
            tuple(grid),
            trials=int(values.get("trials", DESK_TRIALS)),
            train=config,
            recipe=recipe,
            seed=seed,
            workers=int(values.get("workers", 1)),
            record_seconds=bool(values.get("record_seconds", True)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_sweep_spec(path, overrides=None):
    return spec_from_values({**load_config(path), **(overrides or {})})
