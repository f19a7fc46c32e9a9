"""``cvae`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Diagnostics go to
stderr; data goes to files (``score`` also prints its number to stdout).
Every command writes ``<output>.manifest.json`` with the resolved config,
seed and SHA-256 hashes of its inputs and outputs.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_dataset, load_model, save_dataset, save_model
from .config import ConfigError, build_dataclass, load_config
from .data import (
    Dataset,
    FormatError,
    GrassyRecipe,
    add_isotropic_noise,
    build_grassy,
    load_tabular_csv,
)
from .evaluate import (
    Embedding,
    boxplot_table,
    export_embedding,
    read_embedding,
    render_image_grid,
    silhouette_score,
)
from .experiments import (
    DESK_EPOCHS,
    DESK_TRIALS,
    RUNNERS,
    SweepError,
    SweepSpec,
    default_train_config,
    format_value,
    full_dim_grid,
    load_sweep_spec,
)
from .model import (
    CvaeModel,
    VaeModel,
    ZeroBiasRequired,
    denoise,
    generate_salient_sweep,
    infer_irrelevant,
    infer_salient,
    lattice_grid,
    vae_decode,
    vae_embed,
)
from .pgm import PgmError
from .rng import derive_seed
from .training import TrainConfig, TrainingError, train, vae_train

log = logging.getLogger("cvae")

FIGURES = ("fig4", "fig6a", "fig6b", "fig6c", "appG")
SCALE_GRID = tuple(0.25 * i for i in range(9))
NOISE_GRID = tuple(0.25 * i for i in range(9))
CONTAMINATION_GRID = (0.0, 0.1, 0.25, 0.5, 0.75)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# helpers


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(paths):
    return {os.path.basename(p): sha256_file(p) for p in sorted(paths) if os.path.exists(p)}


def write_manifest(path, command, config, inputs=(), outputs=(), extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {p: sha256_file(p) for p in inputs},
        "outputs": _hashes(outputs),
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return manifest


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (tuple, np.ndarray)):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _parent(path):
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def _file_values(path):
    return load_config(path) if path else {}


def _flag_values(args, names):
    """Flags the user actually set, keyed by config name (flags beat config files)."""
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def _train_config(args, defaults=None):
    values = dict(defaults or {})
    values.update({k: v for k, v in _file_values(getattr(args, "config", None)).items() if k in TrainConfig.__dataclass_fields__})
    values.update(_flag_values(args, TrainConfig.__dataclass_fields__))
    return build_dataclass(TrainConfig, values)


def _recipe(args):
    values = {k: v for k, v in _file_values(getattr(args, "config", None)).items() if k in GrassyRecipe.__dataclass_fields__}
    values.update(_flag_values(args, GrassyRecipe.__dataclass_fields__))
    return build_dataclass(GrassyRecipe, values)


def _check_inputs(recipe):
    if recipe.images_path is None and recipe.labels_path is None:
        return
    missing = [p for p in (recipe.images_path, recipe.labels_path) if p is None or not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(
            "MNIST IDX files not found. Expected an images file (magic 0x00000803, e.g. "
            "train-images-idx3-ubyte[.gz]) and a labels file (magic 0x00000801, e.g. "
            "train-labels-idx1-ubyte[.gz]); pass both with --images-path/--labels-path, or "
            "omit both to use the bundled digit subset. Missing: " + ", ".join(str(p) for p in missing)
        )


def _write_losses(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        keys = list(history[0].as_dict()) if history else ["total"]
        writer.writerow(["epoch"] + keys)
        for epoch, summary in enumerate(history):
            writer.writerow([epoch] + [format(v, ".17g") for v in summary.as_dict().values()])


def _decode_grid(model, points_per_axis, lo, hi):
    """Decoded images for a lattice over the first two latent axes (others held at 0)."""
    dim = model.s_dim if isinstance(model, CvaeModel) else model.latent_dim
    axes = min(dim, 2)
    grid = lattice_grid(axes, points_per_axis, lo, hi)
    full = np.zeros((len(grid), dim))
    full[:, :axes] = grid
    if isinstance(model, CvaeModel):
        images = generate_salient_sweep(model, full)
    else:
        images = vae_decode(model, full)
    rows = points_per_axis if axes == 2 else 1
    return images, rows, points_per_axis


# --------------------------------------------------------------------------
# subcommands


def cmd_synthesize(args):
    recipe = _recipe(args)
    outputs = [args.out_target]
    if args.csv:
        target = load_tabular_csv(args.csv, normalize=args.normalize)
        background = load_tabular_csv(args.background_csv, expected_width=target.width, normalize=args.normalize) if args.background_csv else None
        config = {"csv": args.csv, "background_csv": args.background_csv, "normalize": args.normalize}
    else:
        _check_inputs(recipe)
        target, background = build_grassy(recipe)
        config = {"recipe": recipe.as_dict()}
    noise = args.background_noise or 0.0
    if background is not None and noise > 0:
        background = add_isotropic_noise(background, noise, derive_seed(recipe.seed, "noise"))
    config["background_noise"] = noise
    _parent(args.out_target)
    save_dataset(target, args.out_target)
    if args.out_background:
        if background is None:
            raise UsageError("--out-background needs a background source (--background-csv in CSV mode)")
        _parent(args.out_background)
        save_dataset(background, args.out_background)
        outputs.append(args.out_background)
    inputs = [p for p in (args.csv, args.background_csv, recipe.images_path, recipe.labels_path) if p]
    write_manifest(f"{args.out_target}.manifest.json", "synthesize", config, inputs, outputs)
    return 0


def cmd_train(args):
    config = _train_config(args)
    target = load_dataset(args.target)
    inputs = [args.target]
    if args.model == "cvae":
        if not args.background:
            raise UsageError("train --model cvae needs --background")
        background = load_dataset(args.background)
        inputs.append(args.background)
        model = CvaeModel.from_config(target.width, config)
        result = train(model, target, background, config)
    else:
        model = VaeModel.initialize(
            target.width, config.s_dim, seed=config.seed, zero_bias=config.zero_bias,
            recon_model=config.recon_model, hidden_dim=config.hidden_dim,
        )
        result = vae_train(model, target, config)
    _parent(args.out)
    save_model(model, args.out)
    losses = f"{args.out}.losses.csv"
    _write_losses(result.history, losses)
    write_manifest(
        f"{args.out}.manifest.json", "train", config.as_dict(), inputs, [args.out, losses],
        {"model_kind": args.model, "training": result.manifest},
    )
    return 0


def _embed_points(model, x, space):
    if isinstance(model, VaeModel):
        return vae_embed(model, x), "vae_latent"
    if space == "irrelevant":
        return infer_irrelevant(model, x), "cvae_irrelevant"
    return infer_salient(model, x), "cvae_salient"


def cmd_embed(args):
    model = load_model(args.model)
    data = load_dataset(args.data)
    if data.labels is None:
        raise ValueError(f"{args.data} has no labels to attach to the embedding")
    points, tag = _embed_points(model, data.samples, args.space)
    _parent(args.out)
    export_embedding(Embedding(points, data.labels, tag), args.out)
    write_manifest(f"{args.out}.manifest.json", "embed", {"space": tag}, [args.model, args.data], [args.out])
    return 0


def cmd_generate(args):
    model = load_model(args.model)
    images, rows, cols = _decode_grid(model, args.points, args.lo, args.hi)
    _parent(args.out)
    render_image_grid(images, rows, cols, args.out)
    config = {"points": args.points, "lo": args.lo, "hi": args.hi}
    write_manifest(f"{args.out}.manifest.json", "generate", config, [args.model], [args.out])
    return 0


def cmd_denoise(args):
    model = load_model(args.model)
    if not isinstance(model, CvaeModel):
        raise UsageError("denoise needs a cvae checkpoint")
    data = load_dataset(args.data)
    count = min(args.count, len(data))
    originals = data.samples[:count]
    cleaned = denoise(model, originals)
    _parent(args.out)
    # originals on the top row(s), their denoised versions underneath
    render_image_grid(np.concatenate([originals, cleaned]), 2, count, args.out)
    outputs = [args.out]
    if args.out_data:
        save_dataset(Dataset(denoise(model, data.samples), data.labels, data.feature_kind, {"op": "denoise", "model": args.model}), args.out_data)
        outputs.append(args.out_data)
    write_manifest(f"{args.out}.manifest.json", "denoise", {"count": count}, [args.model, args.data], outputs)
    return 0


def cmd_score(args):
    emb = read_embedding(args.embedding)
    print(f"{silhouette_score(emb.points, emb.labels):.4f}")
    return 0


def cmd_sweep(args):
    overrides = _flag_values(args, ("trials", "workers", "epochs", "seed"))
    spec = load_sweep_spec(args.spec, overrides)
    _parent(args.out)
    result = RUNNERS[spec.sweep_kind](spec, args.out)
    log.info("%d rows written to %s", len(result.rows), args.out)
    write_manifest(f"{args.out}.manifest.json", "sweep", spec.as_dict(), [args.spec], [args.out])
    return 0


# --------------------------------------------------------------------------
# reproduce


def _reproduce_setup(args):
    recipe = GrassyRecipe(
        images_path=args.images_path, labels_path=args.labels_path, texture_dir=args.texture_dir,
        n_target=args.n_target, n_background=args.n_background,
    )
    _check_inputs(recipe)
    train_cfg = default_train_config(epochs=args.epochs, seed=args.seed)
    return recipe, train_cfg


def _fig4(args, out_dir, recipe, train_cfg):
    """Embeddings, score boxplot table and latent sweeps for the VAE vs the cVAE."""
    scores = []
    outputs = []
    for trial in range(args.trials):
        seed = derive_seed(args.seed, "fig4", trial)
        target, background = build_grassy(replace(recipe, seed=seed))
        cfg = replace(train_cfg, seed=seed)
        cvae = CvaeModel.from_config(target.width, cfg)
        train(cvae, target, background, cfg)
        vae = VaeModel.initialize(target.width, cfg.s_dim, seed=seed, hidden_dim=cfg.hidden_dim)
        vae_train(vae, target, cfg)
        for name, model in (("vae", vae), ("cvae", cvae)):
            points, tag = _embed_points(model, target.samples, "salient")
            scores.append((name, trial, silhouette_score(points, target.labels)))
            stem = os.path.join(out_dir, f"{name}_trial{trial}")
            save_model(model, f"{stem}.ckpt")
            export_embedding(Embedding(points, target.labels, tag), f"{stem}_embedding.csv")
            images, rows, cols = _decode_grid(model, 7, -3.0, 3.0)
            render_image_grid(images, rows, cols, f"{stem}_sweep.pgm")
            outputs += [f"{stem}.ckpt", f"{stem}_embedding.csv", f"{stem}_sweep.pgm"]
        if trial == 0:
            render_image_grid(target.samples[:24], 3, 8, os.path.join(out_dir, "target_samples.pgm"))
            render_image_grid(background.samples[:24], 3, 8, os.path.join(out_dir, "background_samples.pgm"))
            outputs += [os.path.join(out_dir, n) for n in ("target_samples.pgm", "background_samples.pgm")]
    boxplot_table(scores, os.path.join(out_dir, "scores.csv"))
    outputs.append(os.path.join(out_dir, "scores.csv"))
    return outputs


def _sweep_figure(kind, grid, args, out_dir, recipe, train_cfg, name):
    spec = SweepSpec(kind, grid, args.trials, train_cfg, recipe, seed=args.seed, workers=args.workers, record_seconds=False)
    path = os.path.join(out_dir, f"{name}.csv")
    result = RUNNERS[kind](spec, path)
    table = []
    trial_of = {}
    for row in result.rows:
        condition = f"{row.model}@{format_value(row.value)}"
        trial_of[condition] = trial_of.get(condition, -1) + 1
        table.append((condition, trial_of[condition], row.silhouette))
    box = os.path.join(out_dir, f"{name}_summary.csv")
    boxplot_table(table, box)
    return [path, box]


def cmd_reproduce(args):
    if args.figure not in FIGURES:
        raise UsageError(f"unknown figure {args.figure!r}; choose from {', '.join(FIGURES)}")
    recipe, train_cfg = _reproduce_setup(args)
    out_dir = args.out_dir or os.path.join("reproduce", args.figure)
    os.makedirs(out_dir, exist_ok=True)
    if args.figure == "fig4":
        outputs = _fig4(args, out_dir, recipe, train_cfg)
    elif args.figure == "fig6a":
        outputs = _sweep_figure("background_scale", SCALE_GRID, args, out_dir, recipe, train_cfg, "fig6a_scale")
        # one target image per scale, like the strip under the plot
        samples = [build_grassy(replace(recipe, n_target=8, n_background=8, scale=s, seed=args.seed))[0].samples[0] for s in SCALE_GRID]
        render_image_grid(np.stack(samples), 1, len(SCALE_GRID), os.path.join(out_dir, "fig6a_samples.pgm"))
        outputs.append(os.path.join(out_dir, "fig6a_samples.pgm"))
    elif args.figure == "fig6b":
        outputs = _sweep_figure("background_noise", NOISE_GRID, args, out_dir, recipe, train_cfg, "fig6b_noise")
    elif args.figure == "fig6c":
        outputs = _sweep_figure("latent_dims", full_dim_grid(), args, out_dir, recipe, train_cfg, "fig6c_dims")
    else:
        outputs = _sweep_figure("target_contamination", CONTAMINATION_GRID, args, out_dir, recipe, train_cfg, "appG_target")
        outputs += _sweep_figure("background_contamination", CONTAMINATION_GRID, args, out_dir, recipe, train_cfg, "appG_background")
    config = {
        "figure": args.figure,
        "seed": args.seed,
        "trials": args.trials,
        "recipe": recipe.as_dict(),
        "train": train_cfg.as_dict(),
    }
    write_manifest(os.path.join(out_dir, "manifest.json"), "reproduce", config, outputs=outputs)
    return 0


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    g = p.add_argument_group("training (override --config)")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--learning-rate", dest="learning_rate", type=float)
    g.add_argument("--tc-weight", dest="tc_weight", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--s-dim", dest="s_dim", type=int)
    g.add_argument("--z-dim", dest="z_dim", type=int)
    g.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    g.add_argument("--recon-model", dest="recon_model", choices=("bernoulli", "gaussian"))
    g.add_argument("--zero-bias", dest="zero_bias", action="store_const", const=True)


def _add_recipe_flags(p, with_seed=True):
    g = p.add_argument_group("dataset recipe")
    g.add_argument("--images-path", dest="images_path", help="MNIST images IDX file (default: bundled subset)")
    g.add_argument("--labels-path", dest="labels_path", help="MNIST labels IDX file")
    g.add_argument("--texture-dir", dest="texture_dir", help="directory of PGM textures (default: procedural)")
    g.add_argument("--n-target", dest="n_target", type=int)
    g.add_argument("--n-background", dest="n_background", type=int)
    if with_seed:
        g.add_argument("--scale", type=float)
        g.add_argument("--seed", type=int)


def build_parser():
    parser = _Parser(prog="cvae", description="Contrastive VAE experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synthesize", help="build Grassy-MNIST target/background datasets (or ingest CSV)")
    p.add_argument("--config")
    _add_recipe_flags(p)
    p.add_argument("--digits", type=lambda s: tuple(int(d) for d in s.split(",")))
    p.add_argument("--background-noise", dest="background_noise", type=float)
    p.add_argument("--csv", help="tabular target CSV instead of Grassy-MNIST")
    p.add_argument("--background-csv", dest="background_csv")
    p.add_argument("--normalize", action="store_true", help="min-max scale CSV columns to [0, 1]")
    p.add_argument("--out-target", dest="out_target", required=True)
    p.add_argument("--out-background", dest="out_background")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="train a cvae or vae and write a checkpoint")
    p.add_argument("--model", choices=("cvae", "vae"), default="cvae")
    p.add_argument("--config")
    p.add_argument("--target", required=True)
    p.add_argument("--background")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="export latent coordinates as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--space", choices=("salient", "irrelevant"), default="salient")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("generate", help="decode a latent lattice to a PGM grid")
    p.add_argument("--model", required=True)
    p.add_argument("--points", type=int, default=7)
    p.add_argument("--lo", type=float, default=-3.0)
    p.add_argument("--hi", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("denoise", help="decode [s, 0] with a zero-bias cvae")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--out-data", dest="out_data")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("score", help="silhouette score of an embedding CSV")
    p.add_argument("--embedding", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", help="run a sensitivity sweep from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reproduce", help="run a figure recipe end to end")
    p.add_argument("figure", help=f"one of {', '.join(FIGURES)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=DESK_TRIALS)
    p.add_argument("--epochs", type=int, default=DESK_EPOCHS)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", dest="out_dir")
    _add_recipe_flags(p, with_seed=False)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return 1
        if args.command == "reproduce":
            args.n_target = args.n_target or GrassyRecipe.n_target
            args.n_background = args.n_background or GrassyRecipe.n_background
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"cvae: config error: {exc}", file=sys.stderr)
        return 1
    except ZeroBiasRequired as exc:
        print(f"cvae: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, FormatError, PgmError, TrainingError, SweepError, ValueError) as exc:
        print(f"cvae: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
