"""
File formats: SSLVOL1 volumes, dataset manifests, SSLCKPT1 model checkpoints
and CSV tables, plus logging setup.
"""
import csv
import glob
import io
import json
import logging
import os
import pathlib
import sys
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
import torch
from natsort import natsorted

from .utils import ConfigError, DataError
from .version import version_str

io_logger = logging.getLogger(__name__)

VOLUME_MAGIC = b"SSLVOL1"
CHECKPOINT_MAGIC = b"SSLCKPT1"
MANIFEST_MAGIC = "SSLMANIFEST1"
VOLUME_SUFFIX = ".sslvol"
SPLITS = ("pretrain", "train", "val", "test")
_CKPT_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class VolumeFormatError(DataError, ValueError):
    """Unknown magic or unreadable header."""


class VolumeTruncatedError(DataError, ValueError):
    """Payload shorter than the header declares."""


class VolumeShapeError(DataError, ValueError):
    """Declared dimensions disagree with the payload."""


class ManifestError(DataError, ValueError):
    pass


class CheckpointError(DataError, ValueError):
    pass


def logger_setup(log_dir=".sslseg", logfile_name="run.log"):
    log_dir = pathlib.Path(log_dir).expanduser()
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir.joinpath(logfile_name)
    try:
        log_file.unlink()
    except FileNotFoundError:
        pass
    handlers = [logging.FileHandler(log_file), logging.StreamHandler(sys.stdout)]
    logging.basicConfig(
                    level=logging.INFO,
                    format="%(asctime)s [%(levelname)s] %(message)s",
                    handlers=handlers,
                    force=True
    )
    logger = logging.getLogger(__name__)
    logger.info(f"WRITING LOG OUTPUT TO {log_file}")
    logger.info(version_str)

    return logger, log_file


def atomic_write(path, payload):
    """ write bytes to a temp file next to path, then rename over it """
    path = os.path.expanduser(str(path))
    dst_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(dst_dir, exist_ok=True)
    f = tempfile.NamedTemporaryFile(delete=False, dir=dst_dir, prefix=".tmp_")
    try:
        f.write(payload)
        f.close()
        os.replace(f.name, path)
    finally:
        f.close()
        if os.path.exists(f.name):
            os.remove(f.name)


def _split_header(raw, magic, error_class, path):
    end = raw.find(b"\n")
    first = raw[:end] if end >= 0 else raw
    if not first.startswith(magic + b" "):
        raise error_class(f"{path}: unknown magic {first[:len(magic)]!r}, expected {magic!r}")
    if end < 0:
        raise error_class(f"{path}: header line is not terminated")
    try:
        header = json.loads(first[len(magic) + 1:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise error_class(f"{path}: unreadable header ({err})") from None
    if not isinstance(header, dict):
        raise error_class(f"{path}: header is not a key-value record")
    return header, raw[end + 1:]


@dataclass
class Volume:
    """ one subject: slices [S x 1 x H x W] float32 in [0, 1], labels [S x H x W] uint8 or None """
    subject_id: str
    slices: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.slices.ndim != 4 or self.slices.shape[1] != 1 or self.slices.shape[0] < 1:
            raise VolumeShapeError(f"volume {self.subject_id}: slices must be [S x 1 x H x W] "
                                   f"with S >= 1, got {self.slices.shape}")
        if self.labels is not None:
            expected = (self.slices.shape[0], *self.slices.shape[2:])
            if self.labels.shape != expected:
                raise VolumeShapeError(f"volume {self.subject_id}: labels shape "
                                       f"{self.labels.shape} != {expected}")

    @property
    def n_slices(self):
        return self.slices.shape[0]


def save_volume(path, volume):
    """
    Write a volume as SSLVOL1.

    The file is one UTF-8 header line "SSLVOL1 {json}" with keys dims [S, H, W],
    dtype, subject_id and labels, then the slices as little-endian float32 in
    row-major order, then the labels as uint8 when present.
    """
    slices = np.asarray(volume.slices, np.float32)
    S, _, Ly, Lx = slices.shape
    has_labels = volume.labels is not None
    if has_labels and (volume.labels.min() < 0 or volume.labels.max() > 255):
        raise VolumeShapeError(f"volume {volume.subject_id}: labels must fit in uint8")
    header = {"dims": [S, Ly, Lx], "dtype": "float32", "labels": has_labels,
              "subject_id": volume.subject_id}
    payload = [VOLUME_MAGIC + b" " + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n",
               slices.astype("<f4").tobytes(order="C")]
    if has_labels:
        payload.append(np.asarray(volume.labels).astype(np.uint8).tobytes(order="C"))
    atomic_write(path, b"".join(payload))


def load_volume(path):
    """
    Read an SSLVOL1 file.

    Raises:
        VolumeFormatError: bad magic or header.
        VolumeTruncatedError: payload shorter than declared.
        VolumeShapeError: declared dims inconsistent with the payload.
    """
    with open(path, "rb") as f:
        raw = f.read()
    header, payload = _split_header(raw, VOLUME_MAGIC, VolumeFormatError, path)
    dims = header.get("dims")
    if header.get("dtype") != "float32" or "subject_id" not in header:
        raise VolumeFormatError(f"{path}: header needs dtype float32 and a subject_id")
    if not (isinstance(dims, list) and len(dims) == 3
            and all(isinstance(d, int) and d > 0 for d in dims)):
        raise VolumeShapeError(f"{path}: invalid dims {dims!r}")
    n = int(np.prod(dims))
    has_labels = bool(header.get("labels", False))
    expected = n * 4 + (n if has_labels else 0)
    if len(payload) < expected:
        raise VolumeTruncatedError(f"{path}: payload has {len(payload)} bytes, header "
                                   f"dims {dims} need {expected}")
    if len(payload) > expected:
        raise VolumeShapeError(f"{path}: payload has {len(payload)} bytes, header "
                               f"dims {dims} need {expected}")
    S, Ly, Lx = dims
    slices = np.frombuffer(payload, "<f4", count=n).astype(np.float32)
    slices = slices.reshape(S, 1, Ly, Lx)
    labels = None
    if has_labels:
        labels = np.frombuffer(payload, np.uint8, count=n, offset=n * 4).reshape(S, Ly, Lx).copy()
    return Volume(str(header["subject_id"]), slices, labels)


def list_volumes(folder):
    """ natural-sorted SSLVOL1 files in a folder """
    return natsorted(glob.glob(os.path.join(folder, "*" + VOLUME_SUFFIX)))


class ManifestEntry(NamedTuple):
    subject_id: str
    volume_path: Optional[str]
    label_path: Optional[str]
    split: str = "pretrain"

    @property
    def labeled(self):
        return self.label_path is not None


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    seed: int = 0
    params: dict = field(default_factory=dict)

    def validate(self):
        ids = [e.subject_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = natsorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate subject ids {dupes}")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"subject {e.subject_id}: unknown split {e.split!r}")
            if e.split != "pretrain" and not e.labeled:
                raise ManifestError(f"subject {e.subject_id} in {e.split} has no labels")
        return self

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def counts(self):
        return {s: len(self.split(s)) for s in SPLITS}


def split_manifest(subjects, counts=None, fractions=None, seed=0, params=None):
    """
    Assign subjects to pretrain/train/val/test with a seeded shuffle.

    Labeled subjects are shuffled (after natural sorting by id, so input order
    does not matter) and dealt out to train, val and test; labeled subjects
    left over join the pretraining pool without their labels. Unlabeled
    subjects always go to pretraining.

    Args:
        subjects (list of ManifestEntry): split fields are ignored.
        counts (tuple of int, optional): (n_train, n_val, n_test).
        fractions (tuple of float, optional): fractions of the labeled subjects,
            rounded half up; used when counts is None.
        seed (int): shuffle seed.
        params (dict, optional): generation parameters recorded in the manifest.

    Returns:
        DatasetManifest
    """
    subjects = natsorted(subjects, key=lambda e: e.subject_id)
    labeled = [e for e in subjects if e.labeled]
    n = len(labeled)
    if counts is None:
        if fractions is None:
            raise ConfigError("split_manifest needs counts or fractions")
        if any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
            raise ConfigError(f"split fractions {tuple(fractions)} must be >= 0 and sum to <= 1")
        counts = tuple(int(np.floor(f * n + 0.5)) for f in fractions)
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise ConfigError(f"split counts {counts} must be three non-negative integers")
    if sum(counts) > n:
        error_message = f"split counts {counts} need {sum(counts)} labeled subjects, only {n} exist"
        io_logger.critical(error_message)
        raise ConfigError(error_message)

    order = np.random.default_rng(seed).permutation(n)
    split_of = {}
    k = 0
    for name, c in zip(("train", "val", "test"), counts):
        for i in order[k:k + c]:
            split_of[labeled[i].subject_id] = name
        k += c
    entries = []
    for e in subjects:
        name = split_of.get(e.subject_id, "pretrain")
        label_path = e.label_path if name != "pretrain" else None
        entries.append(ManifestEntry(e.subject_id, e.volume_path, label_path, name))
    return DatasetManifest(entries, seed, dict(params or {})).validate()


def _manifest_field(value):
    return "-" if value is None else str(value)


def save_manifest(path, manifest):
    """
    Write a manifest as tab-separated text: one "# SSLMANIFEST1 {json}" line
    with seed and params, a column header, then one subject per line.
    """
    manifest.validate()
    header = {"params": manifest.params, "seed": manifest.seed}
    lines = [f"# {MANIFEST_MAGIC} {json.dumps(header, sort_keys=True)}",
             "\t".join(ManifestEntry._fields)]
    for e in manifest.entries:
        lines.append("\t".join((e.subject_id, _manifest_field(e.volume_path),
                                _manifest_field(e.label_path), e.split)))
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_manifest(path):
    """Read a manifest written by save_manifest; relative paths stay relative."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as err:
        raise ManifestError(f"cannot read manifest {path}: {err}") from None
    prefix = f"# {MANIFEST_MAGIC} "
    if not lines or not lines[0].startswith(prefix):
        raise ManifestError(f"{path}: missing {MANIFEST_MAGIC} header line")
    try:
        header = json.loads(lines[0][len(prefix):])
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}: unreadable header ({err})") from None
    if len(lines) < 2 or lines[1].split("\t") != list(ManifestEntry._fields):
        raise ManifestError(f"{path}: expected column header {ManifestEntry._fields}")
    entries = []
    for iline, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ManifestError(f"{path}:{iline}: expected 4 columns, got {len(cols)}")
        subject_id, volume_path, label_path, split = cols
        entries.append(ManifestEntry(subject_id, None if volume_path == "-" else volume_path,
                                     None if label_path == "-" else label_path, split))
    return DatasetManifest(entries, int(header.get("seed", 0)),
                           header.get("params", {})).validate()


def load_entry(entry, base_dir="."):
    """Load the volume of a manifest entry, with labels for labeled entries."""
    if entry.volume_path is None:
        raise ManifestError(f"subject {entry.subject_id} has no volume path")
    path = os.path.join(base_dir, entry.volume_path)
    if not os.path.exists(path):
        raise ManifestError(f"volume file {path} of subject {entry.subject_id} not found")
    volume = load_volume(path)
    if not entry.labeled:
        return Volume(entry.subject_id, volume.slices, None)
    if entry.label_path != entry.volume_path:
        volume.labels = load_volume(os.path.join(base_dir, entry.label_path)).labels
    if volume.labels is None:
        raise ManifestError(f"label file of subject {entry.subject_id} holds no labels")
    return Volume(entry.subject_id, volume.slices, volume.labels)


class Checkpoint(NamedTuple):
    config: dict
    head: Optional[str]
    metadata: dict
    state: "OrderedDict[str, np.ndarray]"


def save_checkpoint(filename, net, metadata=None):
    """
    Write model weights as SSLCKPT1.

    One header line "SSLCKPT1 {json}" with the architecture config, the head
    mode, metadata and the parameter table [[name, shape, dtype], ...], then
    every tensor as raw little-endian values in table order.
    """
    table, blobs = [], []
    for name, tensor in net.state_dict().items():
        array = tensor.detach().cpu().numpy()
        dtype = str(array.dtype)
        if dtype not in _CKPT_DTYPES:
            raise CheckpointError(f"parameter {name} has unsupported dtype {dtype}")
        table.append([name, list(array.shape), dtype])
        blobs.append(np.ascontiguousarray(array).astype(_CKPT_DTYPES[dtype]).tobytes())
    header = {"config": net.config.to_dict(), "head": net.head_mode,
              "metadata": metadata or {}, "params": table}
    line = CHECKPOINT_MAGIC + b" " + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    atomic_write(filename, line + b"".join(blobs))
    io_logger.info(f"saved checkpoint {filename}")


def load_checkpoint(filename):
    """Read an SSLCKPT1 file into a Checkpoint of numpy arrays."""
    try:
        with open(filename, "rb") as f:
            raw = f.read()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {filename}: {err}") from None
    header, payload = _split_header(raw, CHECKPOINT_MAGIC, CheckpointError, filename)
    state = OrderedDict()
    offset = 0
    try:
        for name, shape, dtype in header["params"]:
            dt = _CKPT_DTYPES[dtype]
            count = int(np.prod(shape))
            nbytes = count * dt.itemsize
            if offset + nbytes > len(payload):
                raise CheckpointError(f"{filename}: truncated at parameter {name}")
            state[name] = np.frombuffer(payload, dt, count=count,
                                        offset=offset).reshape(shape).copy()
            offset += nbytes
        config = dict(header["config"])
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, CheckpointError):
            raise
        raise CheckpointError(f"{filename}: malformed parameter table ({err})") from None
    if offset != len(payload):
        raise CheckpointError(f"{filename}: {len(payload) - offset} trailing bytes")
    return Checkpoint(config, header.get("head"), header.get("metadata", {}), state)


def load_state_into(net, ckpt):
    """
    Copy checkpoint weights into a model, attaching the checkpoint's head.

    Raises:
        CheckpointError: missing or unexpected parameters, or any shape
            mismatch (naming both shapes).
    """
    if ckpt.head is None:
        net.detach_head()
    elif net.head_mode != ckpt.head:
        net.attach_head(ckpt.head)
    model_state = net.state_dict()
    missing = [k for k in model_state if k not in ckpt.state]
    unexpected = [k for k in ckpt.state if k not in model_state]
    if missing or unexpected:
        error_message = f"checkpoint parameters do not match model: missing {missing}, " \
                        f"unexpected {unexpected}"
        io_logger.critical(error_message)
        raise CheckpointError(error_message)
    for name, array in ckpt.state.items():
        if tuple(array.shape) != tuple(model_state[name].shape):
            error_message = (f"parameter {name}: checkpoint shape {tuple(array.shape)} vs "
                             f"model shape {tuple(model_state[name].shape)}")
            io_logger.critical(error_message)
            raise CheckpointError(error_message)
    new_state = OrderedDict(
        (k, torch.from_numpy(v).to(model_state[k].device, dtype=model_state[k].dtype))
        for k, v in ckpt.state.items())
    net.load_state_dict(new_state)
    return net


def model_from_checkpoint(filename, device=None):
    """Build a UNet from the config stored in a checkpoint and load its weights."""
    from .unet_torch import UNet, UNetConfig
    ckpt = load_checkpoint(filename)
    try:
        config = UNetConfig(**ckpt.config)
    except TypeError as err:
        raise CheckpointError(f"{filename}: config does not describe a UNet ({err})") from None
    net = UNet(config)
    load_state_into(net, ckpt)
    if device is not None:
        net.to(device)
    return net, ckpt


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def write_csv(path, header, rows):
    """Write rows under a fixed header, floats with 6 decimals."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row {row} does not match header {header}")
        writer.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue().encode("utf-8"))


def write_history_csv(path, history, columns=("epoch", "train_loss", "lr")):
    """ one row per epoch of a training history dict """
    n = len(history.get("epoch", []))
    write_csv(path, list(columns), [[history[c][i] for c in columns] for i in range(n)])


def read_csv(path):
    """ header list and list of string rows """
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path} is empty")
    return rows[0], rows[1:]
