"""Datasets (IDX files, rotation, subsets) and the binary checkpoint format."""
import gzip
import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import ModelSpec
from .scaling import ScaleSet
from .scores import ScoreTensor, SparseScores

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


class IdxFormatError(DataError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray      # (N, H, W) uint8
    labels: np.ndarray      # (N,) int64
    provenance: str = "original"
    n_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def to_int8(self):
        """Signed network input ``pixel - 128`` with a channel axis."""
        return to_int8_input(self.images)


def to_int8_input(images):
    images = np.asarray(images, dtype=np.uint8)
    return (images.astype(np.int16) - 128).astype(np.int8)[:, None, :, :]


# --------------------------------------------------------------------------
# IDX


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(path, magic, ndim):
    buf = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"{path}: truncated header")
    got = struct.unpack_from(">I", buf)[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = int(np.prod(dims))
    if len(buf) - header != count:
        raise IdxFormatError(f"{path}: expected {count} data bytes, found {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims).copy()


def load_idx(images_path, labels_path):
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(f"{images_path} holds {len(images)} images but "
                             f"{labels_path} holds {len(labels)} labels")
    return ImageDataset(images, labels, provenance="original")


def write_idx(ds, images_path, labels_path):
    n, h, w = ds.images.shape
    atomic_write(images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
                  + ds.images.astype(np.uint8).tobytes())
    atomic_write(labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n)
                  + ds.labels.astype(np.uint8).tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(directory, split="train"):
    """Load an MNIST split from ``directory`` (plain or ``.gz`` IDX files)."""
    directory = Path(directory)
    paths = []
    for name in MNIST_FILES[split]:
        for candidate in (directory / name, directory / (name + ".gz")):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise DataError(f"{name} not found in {directory}")
    return load_idx(*paths)


BUNDLED_DIR = Path(__file__).parent / "data"
BUNDLED_TEST_SIZE = 1024


def load_bundled(split="train", seed=0):
    """The 5,000-image MNIST sample shipped with the package (500 per class).

    A seeded permutation holds out ``BUNDLED_TEST_SIZE`` images as the test
    split; the remaining 3,976 form the train split used for pre-training,
    calibration and transfer-training subsets.
    """
    ds = load_idx(BUNDLED_DIR / "mnist5k-images-idx3-ubyte.gz",
                  BUNDLED_DIR / "mnist5k-labels-idx1-ubyte.gz")
    order = np.random.default_rng(seed).permutation(len(ds))
    idx = order[BUNDLED_TEST_SIZE:] if split == "train" else order[:BUNDLED_TEST_SIZE]
    return ImageDataset(ds.images[idx], ds.labels[idx], provenance=f"mnist5k({split})")


def load_source(source, split):
    """``split`` of the bundled sample (``"bundled"``) or of an MNIST directory."""
    if source in (None, "bundled"):
        return load_bundled(split)
    return load_mnist(source, split)


# --------------------------------------------------------------------------
# transforms


def _rotation_taps(h, w, angle):
    theta = np.deg2rad(angle)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy -= cy
    dx -= cx
    # inverse map: counter-clockwise rotation of the picture by ``angle``
    sx = cos * dx - sin * dy + cx
    sy = sin * dx + cos * dy + cy
    x0, y0 = np.floor(sx).astype(np.int64), np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    taps = []
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + oy, x0 + ox
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        taps.append((np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1), np.where(inside, wgt, 0.0)))
    return taps


def rotate(images, angle):
    """Rotate one image ``(H, W)`` or a stack ``(N, H, W)`` about the centre.

    Bilinear interpolation; anything sampled from outside the frame is 0.
    Positive angles turn the picture counter-clockwise.
    """
    images = np.asarray(images)
    single = images.ndim == 2
    stack = images[None] if single else images
    angle = ((float(angle) + 180.0) % 360.0) - 180.0
    if angle == -180.0:
        angle = 180.0
    if angle == 0.0:
        out = stack.copy()
    else:
        h, w = stack.shape[1:]
        src = stack.astype(np.float64)
        acc = np.zeros(stack.shape, dtype=np.float64)
        for yy, xx, wgt in _rotation_taps(h, w, angle):
            acc += src[:, yy, xx] * wgt
        out = np.clip(np.rint(acc), 0, 255).astype(np.uint8)
    return out[0] if single else out


def rotate_dataset(ds, angle):
    return ImageDataset(rotate(ds.images, angle), ds.labels,
                        provenance=f"rotated({angle:g})<{ds.provenance}>", n_classes=ds.n_classes)


def subsample(ds, n, seed=0):
    """Seeded uniform sample of ``n`` items without replacement."""
    if n > len(ds):
        raise DataError(f"cannot draw {n} samples from a dataset of {len(ds)}")
    idx = np.random.default_rng(seed).choice(len(ds), size=n, replace=False)
    out = ImageDataset(ds.images[idx], ds.labels[idx],
                       provenance=f"subset({seed},{n})<{ds.provenance}>", n_classes=ds.n_classes)
    counts = np.bincount(out.labels, minlength=ds.n_classes)
    log.info("subset label counts: %s", counts.tolist())
    if n >= 1000 and counts.min() < 50:
        log.warning("subset has a class with only %d samples", counts.min())
    return out


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"PRIOTCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    weights: list
    scales: ScaleSet = None
    scores: list = None
    metadata: dict = field(default_factory=dict)

    @property
    def score_kind(self):
        if not self.scores:
            return None
        return "sparse" if isinstance(self.scores[0], SparseScores) else "dense"

    def validate(self):
        shapes = [tuple(s) for s in self.spec.weight_shapes]
        if [tuple(np.shape(w)) for w in self.weights] != shapes:
            raise CheckpointError("weight shapes disagree with the model spec")
        if any(np.asarray(w).dtype != np.int8 for w in self.weights):
            raise CheckpointError("weights must be int8")
        if self.scales is not None and self.scales.n_layers != len(shapes):
            raise CheckpointError("scale set covers the wrong number of layers")
        if self.scores is not None:
            if len(self.scores) != len(shapes):
                raise CheckpointError("score list covers the wrong number of layers")
            for s, shape in zip(self.scores, shapes):
                if tuple(s.shape) != shape:
                    raise CheckpointError("score shape disagrees with its weight")
        return self


def _section(tag, payload):
    return tag + struct.pack("<I", len(payload)) + payload


def checkpoint_to_bytes(ckpt):
    ckpt.validate()
    kind = ckpt.score_kind
    head = {
        "spec": ckpt.spec.to_dict(),
        "metadata": ckpt.metadata,
        "scales": None if ckpt.scales is None else
        {"mode": ckpt.scales.mode, "shifts": ckpt.scales.as_dict()},
        "scores": kind,
        "thresholds": None if kind is None else [int(s.threshold) for s in ckpt.scores],
    }
    parts = [_section(b"HEAD", json.dumps(head, sort_keys=True).encode()),
             _section(b"WGHT", b"".join(np.ascontiguousarray(w, np.int8).tobytes()
                                         for w in ckpt.weights))]
    if kind == "dense":
        parts.append(_section(b"SCOR", b"".join(s.scores.astype(np.int8).tobytes()
                                                 for s in ckpt.scores)))
    elif kind == "sparse":
        body = b"".join(struct.pack("<I", len(s.coords)) + s.coords.astype("<u4").tobytes()
                        + s.scores.astype(np.int8).tobytes() for s in ckpt.scores)
        parts.append(_section(b"SPRS", body))
    blob = CKPT_MAGIC + struct.pack("<HH", CKPT_VERSION, len(parts)) + b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


def checkpoint_from_bytes(blob):
    if len(blob) < 16 or blob[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    version, n_sections = struct.unpack_from("<HH", body, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    sections, pos = {}, 12
    for _ in range(n_sections):
        tag = body[pos:pos + 4]
        (length,) = struct.unpack_from("<I", body, pos + 4)
        sections[tag] = body[pos + 8:pos + 8 + length]
        pos += 8 + length
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last section")
    head = json.loads(sections[b"HEAD"])
    spec = ModelSpec.from_dict(head["spec"])
    shapes = [tuple(s) for s in spec.weight_shapes]
    raw = np.frombuffer(sections[b"WGHT"], dtype=np.int8)
    if raw.size != sum(int(np.prod(s)) for s in shapes):
        raise CheckpointError("weight section size disagrees with the model spec")
    weights, off = [], 0
    for s in shapes:
        size = int(np.prod(s))
        weights.append(raw[off:off + size].reshape(s).copy())
        off += size
    scales = None
    if head["scales"] is not None:
        scales = ScaleSet(len(shapes), mode=head["scales"]["mode"], shifts=head["scales"]["shifts"])
    scores = None
    if head["scores"] == "dense":
        raw = np.frombuffer(sections[b"SCOR"], dtype=np.int8)
        scores, off = [], 0
        for s, thr in zip(shapes, head["thresholds"]):
            size = int(np.prod(s))
            scores.append(ScoreTensor(raw[off:off + size].reshape(s).copy(), thr))
            off += size
    elif head["scores"] == "sparse":
        buf, off, scores = sections[b"SPRS"], 0, []
        for s, thr in zip(shapes, head["thresholds"]):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            coords = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
            off += 4 * n
            vals = np.frombuffer(buf, dtype=np.int8, count=n, offset=off).copy()
            off += n
            scores.append(SparseScores(coords, vals, thr, s))
    return Checkpoint(spec, weights, scales, scores, head["metadata"]).validate()


_UMASK = os.umask(0)
os.umask(_UMASK)


def atomic_write(path, data, force=True):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def save_checkpoint(ckpt, path, force=True):
    atomic_write(path, checkpoint_to_bytes(ckpt), force=force)


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
