"""Dataset loading and writing: IDX (MNIST), the NSQT tensor container, CSV,
box downsampling and synthetic data with a known generator."""

from __future__ import annotations

import csv
import gzip
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, LengthError, ShapeError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

TENSOR_MAGIC = b"NSQT"
TENSOR_VERSION = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray  # (n, p)
    labels: np.ndarray | None = None
    image_shape: tuple[int, int, int] | None = None
    provenance: str = ""

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ShapeError(f"samples must be a non-empty (n, p) matrix, got {self.samples.shape}")
        if self.labels is not None and len(self.labels) != self.samples.shape[0]:
            raise ShapeError("labels and samples differ in length")
        if self.image_shape is not None and math.prod(self.image_shape) != self.samples.shape[1]:
            raise ShapeError(f"image shape {self.image_shape} does not match width {self.samples.shape[1]}")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def head(self, count: int) -> "Dataset":
        labels = None if self.labels is None else self.labels[:count]
        return Dataset(self.samples[:count], labels, self.image_shape, self.provenance)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


# ---------------------------------------------------------------------------
# IDX


def _idx_header(buf: bytes, expected_magic: int, path) -> int:
    if len(buf) < 4:
        raise LengthError(f"{path}: file shorter than the IDX magic number")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad IDX magic {buf[:4].hex(' ')} (expected {expected_magic:#010x})"
        )
    return magic


def read_idx_images(path) -> tuple[np.ndarray, tuple[int, int, int]]:
    buf = _read_bytes(path)
    _idx_header(buf, IDX_IMAGE_MAGIC, path)
    if len(buf) < 16:
        raise LengthError(f"{path}: truncated IDX image header")
    count, rows, cols = struct.unpack(">III", buf[4:16])
    need = 16 + count * rows * cols
    if len(buf) < need:
        raise LengthError(f"{path}: expected {need} bytes, found {len(buf)}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0, (rows, cols, 1)


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    _idx_header(buf, IDX_LABEL_MAGIC, path)
    if len(buf) < 8:
        raise LengthError(f"{path}: truncated IDX label header")
    (count,) = struct.unpack(">I", buf[4:8])
    if len(buf) < 8 + count:
        raise LengthError(f"{path}: expected {8 + count} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def read_idx(images_path, labels_path=None) -> Dataset:
    """Load an IDX image file (optionally gzipped) scaled into [0, 1]."""
    samples, shape = read_idx_images(images_path)
    labels = None
    if labels_path is not None:
        labels = read_idx_labels(labels_path)
        if len(labels) != samples.shape[0]:
            raise ShapeError(f"{len(labels)} labels for {samples.shape[0]} images")
    return Dataset(samples, labels, shape, f"idx:{images_path}")


def write_idx_images(path, images_u8: np.ndarray) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    count, rows, cols = images_u8.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols) + images_u8.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# NSQT tensor container: "NSQT", u32 version, u32 rank, u32 dims[rank], f64 payload


def tensor_bytes(array) -> bytes:
    a = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("tensor container only stores finite values")
    header = TENSOR_MAGIC + struct.pack(f"<II{a.ndim}I", TENSOR_VERSION, a.ndim, *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 12:
        raise LengthError("tensor container shorter than its header")
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {buf[:4]!r}")
    version, rank = struct.unpack("<II", buf[4:12])
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor container version {version}")
    end = 12 + 4 * rank
    if len(buf) < end:
        raise LengthError("tensor container truncated inside its dimensions")
    dims = struct.unpack(f"<{rank}I", buf[12:end])
    need = end + 8 * math.prod(dims)
    if len(buf) != need:
        raise LengthError(f"tensor container has {len(buf)} bytes, expected {need}")
    return np.frombuffer(buf, dtype="<f8", offset=end).reshape(dims).astype(np.float64)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# CSV


def write_csv(path_or_file, matrix, labels=None, prefix: str = "dim") -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(fh, lineterminator="\n")
        header = [f"{prefix}{j}" for j in range(matrix.shape[1])]
        if labels is not None:
            header.append("label")
        writer.writerow(header)
        for i, row in enumerate(matrix):
            cells = [repr(float(v)) for v in row]
            if labels is not None:
                cells.append(str(int(labels[i])))
            writer.writerow(cells)
    finally:
        if own:
            fh.close()


def read_csv(path) -> Dataset:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except (csv.Error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not a readable CSV file ({exc})") from exc
    if len(rows) < 2:
        raise ShapeError(f"{path}: CSV needs a header and at least one row")
    header = rows[0]
    label_col = header.index("label") if "label" in header else None
    cols = [j for j in range(len(header)) if j != label_col]
    try:
        samples = np.array([[float(r[j]) for j in cols] for r in rows[1:]])
        labels = None if label_col is None else np.array([int(r[label_col]) for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed CSV row ({exc})") from exc
    return Dataset(samples, labels, None, f"csv:{path}")


def load_dataset(path, labels_path=None, fmt: str = "auto", image_shape=None) -> Dataset:
    """Load IDX, NSQT or CSV data; ``fmt='auto'`` sniffs the first bytes."""
    path = Path(path)
    if fmt == "auto":
        head = _read_bytes(path)[:4]
        if head == TENSOR_MAGIC:
            fmt = "nsqt"
        elif head[:2] == b"\x00\x00" or ".idx" in path.suffixes or "-ubyte" in path.name:
            # IDX files open with two zero bytes; a wrong magic is reported by the IDX reader
            fmt = "idx"
        else:
            fmt = "csv"
    if fmt == "idx":
        ds = read_idx(path, labels_path)
    elif fmt == "nsqt":
        t = read_tensor(path)
        if t.ndim == 4:
            ds = Dataset(t.reshape(t.shape[0], -1), None, tuple(t.shape[1:]), f"nsqt:{path}")
        elif t.ndim == 2:
            ds = Dataset(t, None, None, f"nsqt:{path}")
        else:
            raise ShapeError(f"{path}: expected a rank-2 or rank-4 tensor, got rank {t.ndim}")
    elif fmt == "csv":
        ds = read_csv(path)
    else:
        raise ValueError(f"unknown data format {fmt!r}")
    if image_shape is not None:
        ds = Dataset(ds.samples, ds.labels, tuple(image_shape), ds.provenance)
    return ds


# ---------------------------------------------------------------------------
# Preprocessing


def downsample(ds: Dataset, factor: int) -> Dataset:
    """Box-average ``factor x factor`` pixel blocks per channel."""
    if ds.image_shape is None:
        raise ShapeError("downsampling needs image data")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w, c = ds.image_shape
    if h % factor or w % factor:
        raise ShapeError(f"image {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return ds
    imgs = ds.samples.reshape(ds.n, h // factor, factor, w // factor, factor, c)
    small = imgs.mean(axis=(2, 4))
    shape = (h // factor, w // factor, c)
    return Dataset(small.reshape(ds.n, -1), ds.labels, shape, f"{ds.provenance}|down{factor}")


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    latent_dim: int = 2
    ambient_dim: int = 16
    n: int = 512
    kind: str = "linear"
    noise_sigma: float = 0.01
    seed: int = 0
    hidden: int = 32

    def __post_init__(self):
        if self.latent_dim < 1 or self.ambient_dim < self.latent_dim:
            raise ValueError("need 1 <= latent_dim <= ambient_dim")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.kind not in ("linear", "mlp_fixed_seed"):
            raise ValueError(f"unknown synthetic generator {self.kind!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _streams(seed: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def synthetic_generator(spec: SyntheticSpec):
    """The ground-truth map G* used by ``make_synthetic`` as a callable on (n, d) arrays."""
    if spec.kind == "linear":
        a = linear_mixing_matrix(spec)
        return lambda z: z @ a
    rng_g, _, _ = _streams(spec.seed)
    w1 = rng_g.standard_normal((spec.latent_dim, spec.hidden)) * 2.0
    b1 = rng_g.standard_normal(spec.hidden)
    w2 = rng_g.standard_normal((spec.hidden, spec.ambient_dim)) / math.sqrt(spec.hidden)
    return lambda z: np.tanh(z @ w1 + b1) @ w2


def linear_mixing_matrix(spec: SyntheticSpec) -> np.ndarray:
    if spec.kind != "linear":
        raise ValueError("only linear generators have a mixing matrix")
    rng_g, _, _ = _streams(spec.seed)
    return rng_g.standard_normal((spec.latent_dim, spec.ambient_dim))


def make_synthetic(spec: SyntheticSpec) -> tuple[Dataset, np.ndarray]:
    """Draw Z ~ U(0,1)^d and return (X = G*(Z) + noise, Z)."""
    _, rng_z, rng_e = _streams(spec.seed)
    z = rng_z.random((spec.n, spec.latent_dim))
    x = synthetic_generator(spec)(z)
    if spec.noise_sigma > 0:
        x = x + spec.noise_sigma * rng_e.standard_normal(x.shape)
    return Dataset(x, None, None, f"synthetic:{spec}"), z


# ---------------------------------------------------------------------------
# PGM dumps


def write_pgm_grid(path, images, image_shape, columns: int = 8) -> None:
    """Tile grayscale images (first channel) into a binary P5 PGM."""
    h, w, c = image_shape
    imgs = np.asarray(images, dtype=np.float64).reshape(-1, h, w, c)[..., 0]
    count = imgs.shape[0]
    columns = max(1, min(columns, count))
    rows = math.ceil(count / columns)
    canvas = np.zeros((rows * h, columns * w))
    for k, img in enumerate(imgs):
        r, col = divmod(k, columns)
        canvas[r * h : (r + 1) * h, col * w : (col + 1) * w] = img
    pixels = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    buf.write(f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode("ascii"))
    buf.write(pixels.tobytes())
    Path(path).write_bytes(buf.getvalue())
