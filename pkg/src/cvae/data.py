"""Datasets: MNIST IDX parsing, grass textures, Grassy-MNIST compositing,
perturbations for the sensitivity sweeps, and tabular CSV ingestion."""

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import kernels
from .pgm import read_pgm
from .rng import stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
IMAGE_SIDE = 28
CONTAMINANT_LABEL = -1
FEATURE_KINDS = ("image_28x28", "tabular")


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray = None
    feature_kind: str = "image_28x28"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be 2-D, got shape {self.samples.shape}")
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"feature_kind must be one of {FEATURE_KINDS}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.samples),):
                raise ValueError(f"{len(self.labels)} labels for {len(self.samples)} samples")
        if self.feature_kind == "image_28x28" and self.samples.size:
            if self.samples.shape[1] != IMAGE_SIDE * IMAGE_SIDE:
                raise ValueError("image datasets hold 784-wide rows")
            lo, hi = self.samples.min(), self.samples.max()
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"image samples must lie in [0, 1], got [{lo}, {hi}]")

    def __len__(self):
        return len(self.samples)

    @property
    def width(self):
        return self.samples.shape[1]

    def subset(self, index, note=None):
        index = np.asarray(index)
        prov = dict(self.provenance)
        if note:
            prov.setdefault("steps", [])
            prov["steps"] = prov["steps"] + [note]
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.samples[index], labels, self.feature_kind, prov)


def _with_step(provenance, step):
    prov = dict(provenance)
    prov["steps"] = list(prov.get("steps", [])) + [step]
    return prov


# --------------------------------------------------------------------------
# IDX


def _read_maybe_gzip(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx(data, expected_magic):
    """Decode one IDX blob to a uint8 array shaped by its header."""
    if len(data) < 8:
        raise FormatError(f"IDX file too short for a header ({len(data)} bytes)")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise FormatError(
            f"bad IDX magic: expected 0x{expected_magic:08x}, observed bytes {data[:4].hex(' ')}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    need = int(np.prod(dims))
    body = data[header:]
    if len(body) < need:
        raise FormatError(f"IDX payload truncated: header promises {need} bytes, found {len(body)}")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None):
    """MNIST-style IDX images (and labels) as an image Dataset in [0, 1].

    Gzip-compressed files are accepted transparently.
    """
    images = parse_idx(_read_maybe_gzip(images_path), IMAGE_MAGIC)
    n = images.shape[0]
    samples = images.reshape(n, -1).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = parse_idx(_read_maybe_gzip(labels_path), LABEL_MAGIC)
        if labels.shape[0] != n:
            raise FormatError(f"{n} images but {labels.shape[0]} labels")
    kind = "image_28x28" if images.shape[1:] == (IMAGE_SIDE, IMAGE_SIDE) else "tabular"
    prov = {"source": "idx", "images": os.fspath(images_path), "labels": labels_path and os.fspath(labels_path), "steps": []}
    return Dataset(samples, labels, kind, prov)


def encode_idx_images(images):
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack(">IIII", IMAGE_MAGIC, *images.shape) + images.tobytes()


def encode_idx_labels(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes()


def bundled_mnist_paths():
    """Paths of the packaged MNIST subset (digits 0, 1, 2; 500 of each)."""
    root = resources.files("cvae") / "resources"
    return (
        str(root / "mnist012-images-idx3-ubyte.gz"),
        str(root / "mnist012-labels-idx1-ubyte.gz"),
    )


def filter_digits(ds, keep):
    if ds.labels is None:
        raise ValueError("filter_digits needs a labelled dataset")
    keep = sorted(int(k) for k in keep)
    mask = np.isin(ds.labels, keep)
    return ds.subset(np.flatnonzero(mask), {"op": "filter_digits", "keep": keep})


# --------------------------------------------------------------------------
# textures


@dataclass
class TextureBank:
    textures: np.ndarray
    source: str = "procedural"
    seed: int = None
    indices: np.ndarray = None

    def __post_init__(self):
        self.textures = np.asarray(self.textures, dtype=np.float64)
        if self.textures.ndim != 3 or self.textures.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
            raise ValueError(f"textures must be (m, 28, 28), got {self.textures.shape}")
        if len(self.textures) == 0:
            raise ValueError("texture bank is empty")
        if self.textures.min() < 0.0 or self.textures.max() > 1.0:
            raise ValueError("textures must lie in [0, 1]")
        if self.indices is None:
            self.indices = np.arange(len(self.textures))

    def __len__(self):
        return len(self.textures)

    def take(self, rows):
        rows = np.asarray(rows)
        return TextureBank(self.textures[rows], self.source, self.seed, self.indices[rows])


def center_crop_square(image):
    h, w = image.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return image[top : top + side, left : left + side]


def _area_weights(n_in, n_out):
    """Row-stochastic overlap matrix mapping ``n_in`` cells onto ``n_out`` equal bins."""
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resize_area(image, height, width):
    """Area-averaging resample (exact box filter, any ratio)."""
    image = np.asarray(image, dtype=np.float64)
    return _area_weights(image.shape[0], height) @ image @ _area_weights(image.shape[1], width).T


# (lattice cells per side, amplitude); coarse octaves dominate like uneven
# lighting on a lawn, the finer ones stand in for blade detail
OCTAVES = ((1, 1.0), (2, 0.5), (4, 0.25), (7, 0.25), (14, 0.25))
CONTRAST = 0.75


def procedural_textures(seed, count):
    """Seeded multi-octave value noise, ``(count, 28, 28)`` in [0, 1].

    Octave sums are mapped affinely around mid-grey (``0.5 + CONTRAST * sum / total_amp``)
    and clipped; no per-texture stretching, so textures keep their own
    brightness and contrast.
    """
    total = np.zeros((count, IMAGE_SIDE, IMAGE_SIDE))
    amp_sum = 0.0
    for k, (cells, amp) in enumerate(OCTAVES):
        lattice = stream(seed, "texture", k).uniform(-1.0, 1.0, (count, cells + 1, cells + 1))
        total += amp * kernels.lattice_upsample(lattice, IMAGE_SIDE, IMAGE_SIDE)
        amp_sum += amp
    return np.clip(0.5 + CONTRAST * total / amp_sum, 0.0, 1.0)


def make_texture_bank(source_dir=None, seed=None, count=None):
    """Texture bank from a directory of PGMs, or procedurally from ``seed``.

    File mode center-crops each image to a square, area-averages it to
    28x28; pixel values are already in [0, 1] via the PGM maxval. ``count`` limits (file mode) or sets
    (procedural mode) the number of textures.
    """
    if source_dir is not None:
        names = sorted(n for n in os.listdir(source_dir) if n.lower().endswith((".pgm", ".pnm")))
        if count is not None:
            names = names[:count]
        if not names:
            raise ValueError(f"no PGM textures found in {source_dir}")
        textures = []
        for name in names:
            img = read_pgm(os.path.join(source_dir, name))
            small = resize_area(center_crop_square(img), IMAGE_SIDE, IMAGE_SIDE)
            textures.append(np.clip(small, 0.0, 1.0))
        return TextureBank(np.stack(textures), "files", None)
    if seed is None or count is None:
        raise ValueError("procedural textures need both seed and count")
    if count < 1:
        raise ValueError("count must be >= 1")
    return TextureBank(procedural_textures(seed, count), "procedural", int(seed))


def split_bank(bank, n_background, seed):
    """Disjoint (target, background) halves of a bank; background gets ``n_background`` textures."""
    if n_background > len(bank) - 1:
        raise ValueError(
            f"need {n_background} background textures plus at least one for the target; bank has {len(bank)}"
        )
    order = stream(seed, "bank-split").permutation(len(bank))
    return bank.take(np.sort(order[n_background:])), bank.take(np.sort(order[:n_background]))


def synthesize_grassy(digits, bank, scale, seed):
    """Superimpose ``scale`` x texture on each digit, then divide by max(1, image max)."""
    if scale < 0:
        raise ValueError("scale must be >= 0")
    if len(bank) == 0:
        raise ValueError("texture bank is empty")
    n = len(digits)
    pick = stream(seed, "grassy", "textures").integers(0, len(bank), size=n)
    raw = digits.samples + scale * bank.textures[pick].reshape(n, -1)
    peak = raw.max(axis=1, keepdims=True) if n else np.ones((0, 1))
    out = raw / np.maximum(1.0, peak)
    prov = _with_step(
        digits.provenance,
        {"op": "synthesize_grassy", "scale": float(scale), "seed": int(seed), "bank_source": bank.source, "bank_seed": bank.seed, "bank_size": len(bank)},
    )
    return Dataset(out, digits.labels, "image_28x28", prov)


def make_background_split(bank, count, seed):
    """Background Dataset of ``count`` distinct textures from ``bank`` (no labels)."""
    if count > len(bank):
        raise ValueError(f"asked for {count} background textures but only {len(bank)} are disjoint from the target")
    rows = np.sort(stream(seed, "background", "pick").permutation(len(bank))[:count])
    prov = {"source": "textures", "bank_source": bank.source, "bank_seed": bank.seed, "count": int(count), "seed": int(seed), "steps": []}
    return Dataset(bank.textures[rows].reshape(count, IMAGE_SIDE * IMAGE_SIDE), None, "image_28x28", prov)


def add_isotropic_noise(ds, noise_scale, seed):
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    noise = stream(seed, "isotropic-noise").standard_normal(ds.samples.shape)
    out = np.clip(ds.samples + noise_scale * noise, 0.0, 1.0)
    prov = _with_step(ds.provenance, {"op": "add_isotropic_noise", "noise_scale": float(noise_scale), "seed": int(seed)})
    return Dataset(out, ds.labels, ds.feature_kind, prov)


def contaminate(primary, contaminant, fraction, seed):
    """Replace ``round(fraction * n)`` random rows of ``primary`` with random rows of ``contaminant``.

    Replaced rows get label ``CONTAMINANT_LABEL`` when ``primary`` is labelled;
    their positions are listed in the provenance either way.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if primary.width != contaminant.width:
        raise ValueError(f"width mismatch: {primary.width} vs {contaminant.width}")
    n = len(primary)
    k = int(math.floor(fraction * n + 0.5))
    rng = stream(seed, "contaminate")
    rows = np.sort(rng.permutation(n)[:k])
    if k and len(contaminant) == 0:
        raise ValueError("contaminant dataset is empty")
    sources = rng.integers(0, len(contaminant), size=k)
    samples = primary.samples.copy()
    samples[rows] = contaminant.samples[sources]
    labels = None
    if primary.labels is not None:
        labels = primary.labels.copy()
        labels[rows] = CONTAMINANT_LABEL
    prov = _with_step(
        primary.provenance,
        {"op": "contaminate", "fraction": float(fraction), "seed": int(seed), "replaced_rows": rows.tolist()},
    )
    kind = primary.feature_kind if primary.feature_kind == contaminant.feature_kind else "tabular"
    return Dataset(samples, labels, kind, prov)


def genuine_mask(ds):
    """Rows not replaced by :func:`contaminate`."""
    mask = np.ones(len(ds), dtype=bool)
    for step in ds.provenance.get("steps", []):
        if isinstance(step, dict) and step.get("op") == "contaminate":
            mask[step["replaced_rows"]] = False
    return mask


# --------------------------------------------------------------------------
# tabular CSV


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_tabular_csv(path, expected_width=None, normalize=False, label_column="label"):
    """Numeric CSV rows as a tabular Dataset.

    A first line with any non-numeric cell is a header; if its last column is
    named ``label_column`` that column becomes integer labels. With
    ``normalize``, each feature is min-max scaled to [0, 1] (constant
    columns map to 0) and the per-feature ranges go to the provenance.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = None
    first = 1
    if not all(_is_number(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        first = 2
    has_label = header is not None and header[-1] == label_column
    width = len(header) if header is not None else (len(rows[0]) if rows else 0)
    values = []
    for offset, row in enumerate(rows):
        line = first + offset
        if not row:
            continue
        if len(row) != width:
            raise FormatError(f"{path}: line {line} has {len(row)} fields, expected {width}")
        parsed = []
        for col, cell in enumerate(row):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise FormatError(f"{path}: non-numeric cell {cell!r} at line {line}, column {col + 1}") from None
        values.append(parsed)
    table = np.array(values, dtype=np.float64).reshape(len(values), width)
    labels = None
    if has_label:
        labels = table[:, -1].astype(np.int64)
        table = table[:, :-1]
    if expected_width is not None and table.shape[1] != expected_width:
        raise FormatError(f"{path}: {table.shape[1]} features, expected {expected_width}")
    prov = {"source": "csv", "path": os.fspath(path), "steps": []}
    if normalize:
        lo = table.min(axis=0)
        hi = table.max(axis=0)
        span = hi - lo
        table = np.where(span > 0, (table - lo) / np.where(span > 0, span, 1.0), 0.0)
        prov["steps"].append({"op": "minmax", "min": lo.tolist(), "max": hi.tolist()})
    return Dataset(table, labels, "tabular", prov)


# --------------------------------------------------------------------------
# the Grassy-MNIST recipe


@dataclass
class GrassyRecipe:
    images_path: str = None
    labels_path: str = None
    digits: tuple = (0, 1, 2)
    n_target: int = 5000
    n_background: int = 5000
    scale: float = 2.0
    seed: int = 0
    texture_dir: str = None

    def as_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def build_grassy(recipe):
    """Target (Grassy-MNIST) and background (plain grass) datasets for a recipe.

    The bundled MNIST subset is used unless IDX paths are given. Digits are
    drawn without replacement when enough exist, otherwise with replacement.
    """
    images, labels = recipe.images_path, recipe.labels_path
    if images is None:
        images, labels = bundled_mnist_paths()
    digits = filter_digits(load_idx(images, labels), recipe.digits)
    if len(digits) == 0:
        raise ValueError(f"no samples with digits {recipe.digits}")
    rng = stream(recipe.seed, "digits")
    pick = rng.choice(len(digits), size=recipe.n_target, replace=recipe.n_target > len(digits))
    digits = digits.subset(pick, {"op": "draw_digits", "n": recipe.n_target, "seed": recipe.seed})

    if recipe.texture_dir is not None:
        bank = make_texture_bank(source_dir=recipe.texture_dir)
    else:
        bank = make_texture_bank(seed=recipe.seed, count=recipe.n_target + recipe.n_background)
    target_bank, background_bank = split_bank(bank, recipe.n_background, recipe.seed)
    target = synthesize_grassy(digits, target_bank, recipe.scale, recipe.seed)
    background = make_background_split(background_bank, recipe.n_background, recipe.seed)
    target.provenance["recipe"] = recipe.as_dict()
    background.provenance["recipe"] = recipe.as_dict()
    return target, background
