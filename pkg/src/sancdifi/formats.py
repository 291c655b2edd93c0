"""Binary file formats and image export.

All integers and floats are little-endian.

``SNCD`` tensor
    magic ``b"SNCD"``, u8 version, u32 H, u32 W, u32 C, u8 domain
    (0 = unit, 1 = signed), then ``H*W*C`` f32 values in row-major,
    channel-last order.
``SNDS`` dataset
    magic ``b"SNDS"``, u8 version, u32 count, u32 K, u8 split
    (0 = train, 1 = validation), then ``count`` records of one ``SNCD``
    tensor followed by a u32 label.
``SNMW`` model weights
    magic ``b"SNMW"``, u8 version, u8 architecture id, an architecture
    header (see :data:`ARCH_HEADERS`), u32 tensor count, then per tensor
    u8 ndim, ``ndim`` u32 dims and the f32 values.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .core import SIGNED, UNIT, ImageTensor
from .datagen import LabeledDataset
from .models import ToyClassifier, ToyNoisePredictor

__all__ = [
    "FormatError",
    "TruncatedFileError",
    "write_tensor",
    "read_tensor",
    "write_dataset",
    "read_dataset",
    "write_model",
    "read_model",
    "write_pnm",
    "write_heatmap_pgm",
    "write_mask_pgm",
]

VERSION = 1
_DOMAIN_CODES = {UNIT: 0, SIGNED: 1}
_SPLIT_CODES = {"train": 0, "validation": 1}
ARCH_CLASSIFIER = 1
ARCH_NOISE_PREDICTOR = 2

_CLASSIFIER_TENSORS = ("conv_w", "conv_b", "dense_w", "dense_b")
_DENOISER_TENSORS = ("conv1_w", "conv1_b", "emb_w", "conv2_w", "conv2_b")
# architecture header layouts, after the arch id byte
ARCH_HEADERS = {
    ARCH_CLASSIFIER: "<III",  # channels, n_filters, n_classes
    ARCH_NOISE_PREDICTOR: "<IIIIdd",  # channels, hidden, emb_dim, T, beta_start, beta_end
}


class FormatError(ValueError):
    """The file is not of the expected format or version."""


class TruncatedFileError(FormatError):
    """The file ended before its declared payload."""


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count):
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def expect_magic(self, magic):
        if len(self.buf) - self.pos < len(magic) + 1:
            raise TruncatedFileError("file too short for a header")
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        (version,) = self.unpack("<B")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def _tensor_bytes(data, domain):
    data = np.asarray(data)
    h, w, c = data.shape
    head = b"SNCD" + struct.pack("<BIIIB", VERSION, h, w, c, _DOMAIN_CODES[domain])
    return head + np.ascontiguousarray(data, dtype="<f4").tobytes()


def _parse_tensor(r: _Reader) -> ImageTensor:
    r.expect_magic(b"SNCD")
    h, w, c, code = r.unpack("<IIIB")
    domains = {v: k for k, v in _DOMAIN_CODES.items()}
    if code not in domains:
        raise FormatError(f"unknown domain code {code}")
    data = r.floats(h * w * c).reshape(h, w, c)
    return ImageTensor(data, domains[code])


def write_tensor(path, x, domain=None):
    """Write an :class:`ImageTensor` (or an ``(H, W, C)`` array plus ``domain``)."""
    if isinstance(x, ImageTensor):
        data, domain = x.data, x.domain
    else:
        data, domain = np.asarray(x), domain or UNIT
    ImageTensor(data, domain)
    with open(path, "wb") as fh:
        fh.write(_tensor_bytes(data, domain))


def read_tensor(path) -> ImageTensor:
    return _parse_tensor(_Reader(_read_bytes(path)))


def dataset_bytes(data: LabeledDataset) -> bytes:
    out = io.BytesIO()
    out.write(b"SNDS" + struct.pack("<BIIB", VERSION, len(data), data.n_classes, _SPLIT_CODES[data.split]))
    for img, label in zip(data.images, data.labels):
        out.write(_tensor_bytes(img, UNIT))
        out.write(struct.pack("<I", int(label)))
    return out.getvalue()


def write_dataset(path, data: LabeledDataset):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(data))


def read_dataset(path) -> LabeledDataset:
    r = _Reader(_read_bytes(path))
    r.expect_magic(b"SNDS")
    count, k, split_code = r.unpack("<IIB")
    splits = {v: s for s, v in _SPLIT_CODES.items()}
    if split_code not in splits:
        raise FormatError(f"unknown split code {split_code}")
    images, labels = [], []
    for _ in range(count):
        images.append(_parse_tensor(r).data)
        (label,) = r.unpack("<I")
        labels.append(label)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after dataset payload")
    if count and len({im.shape for im in images}) != 1:
        raise FormatError("dataset images differ in shape")
    arr = np.stack(images) if images else np.empty((0, 0, 0, 0), np.float32)
    return LabeledDataset(arr, np.asarray(labels, dtype=np.int64), k, splits[split_code])


def model_bytes(model) -> bytes:
    if isinstance(model, ToyClassifier):
        arch, names = ARCH_CLASSIFIER, _CLASSIFIER_TENSORS
        header = struct.pack(ARCH_HEADERS[arch], model.n_channels_, model.n_filters, model.n_classes_)
    elif isinstance(model, ToyNoisePredictor):
        arch, names = ARCH_NOISE_PREDICTOR, _DENOISER_TENSORS
        header = struct.pack(ARCH_HEADERS[arch], model.n_channels_, model.hidden, model.emb_dim, model.T,
                             model.beta_start, model.beta_end)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    out = io.BytesIO()
    out.write(b"SNMW" + struct.pack("<BB", VERSION, arch) + header)
    out.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(model.params_[name])
        out.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def write_model(path, model):
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


def read_model(path):
    """Load a :class:`ToyClassifier` or :class:`ToyNoisePredictor` from an ``SNMW`` file."""
    r = _Reader(_read_bytes(path))
    r.expect_magic(b"SNMW")
    (arch,) = r.unpack("<B")
    if arch not in ARCH_HEADERS:
        raise FormatError(f"unknown architecture id {arch}")
    header = r.unpack(ARCH_HEADERS[arch])
    (n_tensors,) = r.unpack("<I")
    names = _CLASSIFIER_TENSORS if arch == ARCH_CLASSIFIER else _DENOISER_TENSORS
    if n_tensors != len(names):
        raise FormatError(f"expected {len(names)} tensors, file declares {n_tensors}")
    params = {}
    for name in names:
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        params[name] = r.floats(int(np.prod(shape))).reshape(shape).astype(np.float64)
    if arch == ARCH_CLASSIFIER:
        channels, n_filters, k = header
        model = ToyClassifier(n_filters=n_filters, n_classes=k)
        model.n_classes_ = k
        model.classes_ = np.arange(k)
    else:
        channels, hidden, emb_dim, T, b0, b1 = header
        model = ToyNoisePredictor(hidden=hidden, emb_dim=emb_dim, T=T, beta_start=b0, beta_end=b1)
    model.n_channels_ = channels
    model.params_ = params
    model.loss_curve_ = []
    return model


def _to_bytes255(x):
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, image):
    """Binary PPM (P6) for 3 channels, PGM (P5) for 1 channel or a 2-d array; unit domain."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    px = _to_bytes255(img)
    magic = b"P6" if px.ndim == 3 else b"P5"
    h, w = px.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def write_heatmap_pgm(path, scores):
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    write_pnm(path, (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s))


def write_mask_pgm(path, mask):
    write_pnm(path, (np.asarray(mask) > 0).astype(np.float64))
