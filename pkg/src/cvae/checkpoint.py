"""Binary checkpoint and dataset-cache formats.

Model checkpoint (all integers little-endian)::

    magic        8 bytes  b"CVAECKPT"
    version      u32      FORMAT_VERSION
    kind         u8       0 = cvae, 1 = vae
    recon_model  u8       0 = bernoulli, 1 = gaussian
    zero_bias    u8       0 / 1
    reserved     u8       0
    input_dim    u32
    hidden_dim   u32
    s_dim        u32      (0 for a vae)
    z_dim        u32      (latent_dim for a vae)
    n_tensors    u32
    n_tensors tensor blocks

Tensor block::

    name_len u32, name (utf-8), rank u32, dims u64 * rank, raw float64 (little-endian, C order)

Blocks are written sorted by name, so save -> load -> save is byte-identical.
The dataset cache uses the same tensor blocks behind a b"CVAEDATA" header
and keeps provenance in a JSON sidecar (``<path>.provenance.json``).
"""

import io
import json
import struct

import numpy as np

from .data import FEATURE_KINDS, Dataset
from .model import RECON_MODELS, CvaeModel, VaeModel
from .nn import DenseLayer

CKPT_MAGIC = b"CVAECKPT"
DATA_MAGIC = b"CVAEDATA"
FORMAT_VERSION = 1
KINDS = ("cvae", "vae")
_HEADER = struct.Struct("<IBBBBIIIII")
_DATA_HEADER = struct.Struct("<IBBI")


class CheckpointError(ValueError):
    pass


def write_tensor(fh, name, array):
    array = np.ascontiguousarray(array, dtype="<f8")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(array.tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated file while reading {what}")
    return data


def read_tensor(fh):
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))
    name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "tensor dims"))
    count = int(np.prod(dims)) if rank else 1
    data = _read_exact(fh, 8 * count, f"tensor {name}")
    return name, np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)


def model_bytes(model):
    arch = model.architecture()
    kind = arch["kind"]
    s_dim = arch.get("s_dim", 0)
    z_dim = arch.get("z_dim", arch.get("latent_dim"))
    tensors = model.tensors()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(
        _HEADER.pack(
            FORMAT_VERSION,
            KINDS.index(kind),
            RECON_MODELS.index(model.recon_model),
            int(model.zero_bias),
            0,
            model.input_dim,
            model.hidden_dim,
            s_dim,
            z_dim,
            len(tensors),
        )
    )
    for name in sorted(tensors):
        write_tensor(buf, name, tensors[name])
    return buf.getvalue()


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


def model_from_bytes(data):
    fh = io.BytesIO(data)
    magic = fh.read(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"not a model checkpoint (magic {magic!r})")
    fields = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
    version, kind, recon, zero_bias, _, input_dim, hidden_dim, s_dim, z_dim, n_tensors = fields
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind >= len(KINDS) or recon >= len(RECON_MODELS):
        raise CheckpointError("corrupt checkpoint header")
    tensors = dict(read_tensor(fh) for _ in range(n_tensors))
    if fh.read(1):
        raise CheckpointError("trailing bytes after the last tensor")

    layers = {}
    for name in sorted({k.rsplit(".", 1)[0] for k in tensors}):
        try:
            w, b = tensors[f"{name}.weights"], tensors[f"{name}.bias"]
        except KeyError as exc:
            raise CheckpointError(f"missing tensor {exc.args[0]}") from None
        use_bias = not (zero_bias and name != "disc")
        layers[name] = DenseLayer(w.copy(), b.copy(), use_bias)
    recon_model = RECON_MODELS[recon]
    if KINDS[kind] == "cvae":
        return CvaeModel(layers, input_dim, s_dim, z_dim, bool(zero_bias), recon_model, hidden_dim)
    return VaeModel(layers, input_dim, z_dim, bool(zero_bias), recon_model, hidden_dim)


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# --------------------------------------------------------------------------
# dataset cache


def provenance_path(path):
    return f"{path}.provenance.json"


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(_DATA_HEADER.pack(FORMAT_VERSION, FEATURE_KINDS.index(ds.feature_kind), int(ds.labels is not None), 0))
        write_tensor(fh, "samples", ds.samples)
        if ds.labels is not None:
            write_tensor(fh, "labels", ds.labels.astype(np.float64))
    with open(provenance_path(path), "w", encoding="utf-8") as fh:
        json.dump(ds.provenance, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def load_dataset(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(DATA_MAGIC))
        if magic != DATA_MAGIC:
            raise CheckpointError(f"{path}: not a dataset file (magic {magic!r})")
        version, kind, has_labels, _ = _DATA_HEADER.unpack(_read_exact(fh, _DATA_HEADER.size, "header"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported dataset version {version}")
        _, samples = read_tensor(fh)
        labels = read_tensor(fh)[1].astype(np.int64) if has_labels else None
    try:
        with open(provenance_path(path), encoding="utf-8") as fh:
            provenance = json.load(fh)
    except FileNotFoundError:
        provenance = {}
    return Dataset(samples, labels, FEATURE_KINDS[kind], provenance)
