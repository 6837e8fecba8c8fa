"""On-disk formats, dataset manifests and the synthetic face generator.

Binary layouts (all little-endian, CRC32 over every preceding byte)::

    tensor:  b"ICNNTNSR" u16 version  u32 H  u32 W  u32 C  f32[H*W*C]        u32 crc
    labels:  b"ICNNLBLS" u16 version  u32 H  u32 W  u8 num_classes  u8[H*W] u32 crc

Payloads are row-major over (row, col[, channel]).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

TENSOR_MAGIC = b"ICNNTNSR"
LABELS_MAGIC = b"ICNNLBLS"
VERSION = 1
MAX_ELEMENTS = 1 << 28

NUM_CLASSES = 9
CLASS_NAMES = (
    "background",
    "left_eyebrow",
    "left_eye",
    "right_eyebrow",
    "right_eye",
    "nose",
    "upper_lip",
    "inner_mouth",
    "lower_lip",
)

# display colours for visualisation only
PALETTE = np.array(
    [
        [0, 0, 0],
        [255, 128, 0],
        [0, 128, 255],
        [255, 200, 0],
        [0, 220, 255],
        [0, 200, 0],
        [220, 0, 60],
        [120, 0, 160],
        [255, 80, 160],
    ],
    dtype=np.uint8,
)


class FileFormatError(FormatError):
    """A malformed file; ``reason`` is one of magic, version, dims, truncated, crc, range."""

    def __init__(self, path, reason: str, offset: int, detail: str):
        self.path = str(path)
        self.reason = reason
        self.offset = offset
        super().__init__(f"{path}: {reason} error at byte {offset}: {detail}")


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class Reader:
    """Bounds-checked cursor over a complete file image; validates magic and CRC up front."""

    def __init__(self, path, data: bytes, magic: bytes):
        self.path = path
        self.data = data
        self.pos = 0
        if len(data) < len(magic) + 2 + 4:
            raise FileFormatError(path, "truncated", len(data), "file shorter than header")
        if data[: len(magic)] != magic:
            raise FileFormatError(path, "magic", 0, f"expected {magic!r}, found {data[:len(magic)]!r}")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise FileFormatError(path, "crc", len(data) - 4, "checksum mismatch")
        self.end = len(data) - 4
        self.pos = len(magic)
        (version,) = self.unpack("<H")
        if version != VERSION:
            raise FileFormatError(path, "version", len(magic), f"unsupported version {version}")

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > self.end:
            raise FileFormatError(self.path, "truncated", self.pos, f"need {size} bytes")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def array(self, dtype, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > self.end:
            raise FileFormatError(self.path, "truncated", self.pos, f"need {size} payload bytes")
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += size
        return out

    def finish(self) -> None:
        if self.pos != self.end:
            raise FileFormatError(self.path, "truncated", self.pos, f"{self.end - self.pos} trailing bytes")


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None


def tensor_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    h, w, c = x.shape
    head = TENSOR_MAGIC + struct.pack("<HIII", VERSION, h, w, c)
    return with_crc(head + np.ascontiguousarray(x, dtype="<f4").tobytes())


def write_tensor(path, x: np.ndarray) -> None:
    atomic_write(path, tensor_bytes(x))


def read_tensor(path) -> np.ndarray:
    """Read a tensor file as float64 (H, W, C)."""
    r = Reader(path, _read_bytes(path), TENSOR_MAGIC)
    h, w, c = r.unpack("<III")
    if min(h, w, c) < 1 or h * w * c > MAX_ELEMENTS:
        raise FileFormatError(path, "dims", len(TENSOR_MAGIC) + 2, f"bad dims {h}x{w}x{c}")
    payload = r.array("<f4", h * w * c)
    r.finish()
    return payload.astype(np.float64).reshape(h, w, c)


def labels_bytes(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DataError(f"label map must be 2-D, got shape {labels.shape}")
    if not 1 <= num_classes <= 255:
        raise DataError(f"num_classes must be in 1..255, got {num_classes}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label values must lie in [0, {num_classes})")
    h, w = labels.shape
    head = LABELS_MAGIC + struct.pack("<HIIB", VERSION, h, w, num_classes)
    return with_crc(head + labels.astype(np.uint8).tobytes())


def write_labels(path, labels: np.ndarray, num_classes: int = NUM_CLASSES) -> None:
    atomic_write(path, labels_bytes(labels, num_classes))


def read_labels(path) -> np.ndarray:
    """Read a label file as an int64 (H, W) array."""
    r = Reader(path, _read_bytes(path), LABELS_MAGIC)
    h, w, n = r.unpack("<IIB")
    if min(h, w) < 1 or h * w > MAX_ELEMENTS:
        raise FileFormatError(path, "dims", len(LABELS_MAGIC) + 2, f"bad dims {h}x{w}")
    start = r.pos
    payload = r.array(np.uint8, h * w)
    r.finish()
    bad = np.flatnonzero(payload >= n)
    if bad.size:
        raise FileFormatError(
            path, "range", start + int(bad[0]), f"class byte {payload[bad[0]]} >= num_classes {n}"
        )
    return payload.astype(np.int64).reshape(h, w)


# ---------------------------------------------------------------------------
# manifests

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    labels: Path
    split: str
    line: int


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{path}: manifest not found") from None
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'image labels split', got {raw!r}")
        image, labels, split = parts
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        records.append(ManifestRecord(path.parent / image, path.parent / labels, split, lineno))
    return records


def write_manifest(path, rows) -> None:
    """``rows`` are (image_relpath, labels_relpath, split) triples."""
    lines = ["# image labels split"] + [f"{i} {l} {s}" for i, l, s in rows]
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_dataset(manifest_path, split: str) -> list[tuple[np.ndarray, np.ndarray]]:
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    manifest_path = Path(manifest_path)
    out = []
    for rec in read_manifest(manifest_path):
        if rec.split != split:
            continue
        where = f"{manifest_path}:{rec.line}"
        for p in (rec.image, rec.labels):
            if not p.exists():
                raise DataError(f"{where}: missing file {p}")
        image = read_tensor(rec.image)
        labels = read_labels(rec.labels)
        if image.shape[:2] != labels.shape:
            raise DataError(
                f"{where}: image {image.shape[:2]} and labels {labels.shape} differ in size"
            )
        out.append((image, labels))
    return out


def record_ids(manifest_path, split: str) -> list[str]:
    """File stems of the records in ``split``, in manifest order."""
    return [r.image.stem for r in read_manifest(manifest_path) if r.split == split]


def load_part_centers(manifest_path, split: str) -> list[dict[str, tuple[int, int]]]:
    """Ground-truth part medians stored next to each synthetic image."""
    out = []
    for rec in read_manifest(manifest_path):
        if rec.split != split:
            continue
        meta = rec.image.with_suffix(".json")
        if not meta.exists():
            raise DataError(f"{manifest_path}:{rec.line}: no sidecar {meta}")
        centers = json.loads(meta.read_text())["part_medians"]
        out.append({k: tuple(v) for k, v in centers.items()})
    return out


# ---------------------------------------------------------------------------
# synthetic faces

# base RGB colours in [0, 1]; one per class plus the backdrop outside the face
CLASS_COLORS = np.array(
    [
        [0.88, 0.71, 0.59],  # skin (background class)
        [0.24, 0.16, 0.10],  # eyebrows
        [0.93, 0.94, 0.97],  # eyes
        [0.24, 0.16, 0.10],
        [0.93, 0.94, 0.97],
        [0.76, 0.50, 0.38],  # nose
        [0.70, 0.16, 0.24],  # upper lip
        [0.22, 0.04, 0.08],  # inner mouth
        [0.82, 0.33, 0.42],  # lower lip
    ]
)
BACKDROP_COLOR = np.array([0.27, 0.35, 0.47])

PART_CLASSES = {
    "left_eyebrow": (1,),
    "right_eyebrow": (3,),
    "left_eye": (2,),
    "right_eye": (4,),
    "nose": (5,),
    "mouth": (6, 7, 8),
}


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.  Offsets are in pixels, sizes are relative factors.

    The canonical face is laid out for ``image_size`` 256 and scaled otherwise.
    """

    seed: int = 0
    count: int = 260
    val_count: int = 30
    test_count: int = 30
    image_size: int = 256
    face_shift: float = 8.0
    part_shift: float = 3.0
    size_jitter: float = 0.15
    brow_tilt: float = 10.0
    color_jitter: float = 0.04
    noise: float = 0.02

    def validate(self) -> None:
        checks = {
            "count": self.count >= 0,
            "val_count": self.val_count >= 0,
            "test_count": self.test_count >= 0,
            "image_size": self.image_size >= 64,
            "face_shift": self.face_shift >= 0,
            "part_shift": self.part_shift >= 0,
            "size_jitter": 0 <= self.size_jitter < 1,
            "brow_tilt": 0 <= self.brow_tilt <= 45,
            "color_jitter": 0 <= self.color_jitter <= 0.2,
            "noise": 0 <= self.noise <= 0.2,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(f"{key}: value {getattr(self, key)!r} out of range")
        self._check_clearance()

    def _check_clearance(self) -> None:
        """Reject jitter ranges under which parts could touch or leave the frame.

        Uses worst-case bounding boxes, so it is conservative.
        """
        boxes = part_extents(self)
        names = list(boxes)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                (r0, r1, c0, c1), (s0, s1, d0, d1) = boxes[a], boxes[b]
                if r0 <= s1 + 1 and s0 <= r1 + 1 and c0 <= d1 + 1 and d0 <= c1 + 1:
                    raise ConfigError(
                        f"size_jitter/part_shift/brow_tilt: {a} and {b} may overlap"
                    )
        lo = min(b[0] for b in boxes.values()), min(b[2] for b in boxes.values())
        hi = max(b[1] for b in boxes.values()), max(b[3] for b in boxes.values())
        if min(lo) - self.face_shift < 0 or max(hi) + self.face_shift > self.image_size - 1:
            raise ConfigError("face_shift: parts may leave the frame")


# canonical geometry for a 256x256 face: (row, col) centres relative to the frame
LAYOUT = {
    "left_eyebrow": (84.0, 88.0),
    "right_eyebrow": (84.0, 168.0),
    "left_eye": (112.0, 88.0),
    "right_eye": (112.0, 168.0),
    "nose": (124.0, 128.0),  # apex; the triangle extends downwards
    "mouth": (190.0, 128.0),
}
BROW_HALF = (4.0, 20.0)  # half height, half width
EYE_RADII = (7.0, 15.0)
NOSE_LEN = 36.0
NOSE_HALF_W = 12.0
MOUTH_RADII = (13.0, 30.0)
FACE_RADII = (118.0, 96.0)


def part_extents(spec: SynthSpec) -> dict[str, tuple[float, float, float, float]]:
    """Worst-case (row_min, row_max, col_min, col_max) per part before the face shift."""
    s = spec.image_size / 256.0
    g = 1 + spec.size_jitter
    j = spec.part_shift
    t = np.radians(spec.brow_tilt)
    half = {
        "eyebrow": ((BROW_HALF[0] * np.cos(t) + BROW_HALF[1] * np.sin(t)) * g * s,
                 (BROW_HALF[1] * np.cos(t) + BROW_HALF[0] * np.sin(t)) * g * s),
        "eye": (EYE_RADII[0] * g * s, EYE_RADII[1] * g * s),
        "mouth": (MOUTH_RADII[0] * g * s, MOUTH_RADII[1] * g * s),
    }
    out = {}
    for name, (r, c) in LAYOUT.items():
        r, c = r * s, c * s
        if name == "nose":
            hw = NOSE_HALF_W * g * s
            out[name] = (r - j, r + NOSE_LEN * g * s + j, c - hw - j, c + hw + j)
            continue
        hr, hc = half[name.split("_")[-1]]
        out[name] = (r - hr - j, r + hr + j, c - hc - j, c + hc + j)
    return out


def _ellipse(rr, cc, center, radii):
    return ((rr - center[0]) / radii[0]) ** 2 + ((cc - center[1]) / radii[1]) ** 2 <= 1.0


def _rotated_bar(rr, cc, center, half, angle_deg):
    a = np.radians(angle_deg)
    dr, dc = rr - center[0], cc - center[1]
    u = dc * np.cos(a) + dr * np.sin(a)  # along the bar
    v = -dc * np.sin(a) + dr * np.cos(a)
    # rounded ends give the bar a brow-like profile
    return (np.abs(v) <= half[0] * (1 - 0.5 * (u / half[1]) ** 2)) & (np.abs(u) <= half[1])


def _triangle(rr, cc, apex, length, half_w):
    t = (rr - apex[0]) / length
    return (t >= 0) & (t <= 1) & (np.abs(cc - apex[1]) <= half_w * t)


def render_face(spec: SynthSpec, rng: np.random.Generator):
    """Draw one face; returns (image float64 HxWx3 in [0,1], labels int HxW, colours per class)."""
    n = spec.image_size
    s = n / 256.0
    rr, cc = np.mgrid[0:n, 0:n].astype(float)
    face = np.array([n / 2, n / 2]) + rng.uniform(-spec.face_shift, spec.face_shift, 2)

    def place(name):
        base = (np.array(LAYOUT[name]) - 128.0) * s + face
        return base + rng.uniform(-spec.part_shift, spec.part_shift, 2)

    def size():
        return rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter)

    masks = {}
    tilt = rng.uniform(-spec.brow_tilt, spec.brow_tilt)
    brow_scale = size()
    brow_half = (BROW_HALF[0] * brow_scale * s, BROW_HALF[1] * brow_scale * s)
    # mirrored tilt keeps left and right brows symmetric
    masks[1] = _rotated_bar(rr, cc, place("left_eyebrow"), brow_half, tilt)
    masks[3] = _rotated_bar(rr, cc, place("right_eyebrow"), brow_half, -tilt)
    eye_scale = size()
    eye_radii = (EYE_RADII[0] * eye_scale * s, EYE_RADII[1] * eye_scale * s)
    masks[2] = _ellipse(rr, cc, place("left_eye"), eye_radii)
    masks[4] = _ellipse(rr, cc, place("right_eye"), eye_radii)
    nose_scale = size()
    masks[5] = _triangle(rr, cc, place("nose"), NOSE_LEN * nose_scale * s, NOSE_HALF_W * nose_scale * s)
    mc = place("mouth")
    m_scale = size()
    m_radii = (MOUTH_RADII[0] * m_scale * s, MOUTH_RADII[1] * m_scale * s)
    mouth = _ellipse(rr, cc, mc, m_radii)
    open_half = rng.uniform(0.12, 0.3) * m_radii[0]
    split = mc[0] + rng.uniform(-0.1, 0.1) * m_radii[0]
    masks[6] = mouth & (rr < split - open_half)
    masks[7] = mouth & (rr >= split - open_half) & (rr <= split + open_half)
    masks[8] = mouth & (rr > split + open_half)

    labels = np.zeros((n, n), dtype=np.int64)
    for cls in range(1, NUM_CLASSES):
        if np.any(labels[masks[cls]] != 0):
            raise DataError(f"generated parts overlap at class {CLASS_NAMES[cls]}")
        labels[masks[cls]] = cls
    for cls in range(1, NUM_CLASSES):
        if not masks[cls].any():
            raise DataError(f"class {CLASS_NAMES[cls]} vanished; size_jitter too large")

    colors = np.clip(CLASS_COLORS + rng.uniform(-spec.color_jitter, spec.color_jitter, (NUM_CLASSES, 3)), 0, 1)
    colors[3] = colors[1]
    colors[4] = colors[2]
    face_mask = _ellipse(rr, cc, face, (FACE_RADII[0] * s, FACE_RADII[1] * s))
    image = np.where(face_mask[..., None], colors[0], BACKDROP_COLOR)
    fg = labels > 0
    image[fg] = colors[labels[fg]]
    image = image + rng.normal(0.0, spec.noise, image.shape)
    return np.clip(image, 0.0, 1.0), labels, colors


def part_medians(labels: np.ndarray) -> dict[str, tuple[int, int]]:
    """Lower-median (row, col) of each part's labelled pixels, full-image coordinates."""
    out = {}
    for name, classes in PART_CLASSES.items():
        rows, cols = np.nonzero(np.isin(labels, classes))
        if rows.size == 0:
            continue
        k = (rows.size - 1) // 2
        out[name] = (int(np.sort(rows)[k]), int(np.sort(cols)[k]))
    return out


def split_sizes(spec: SynthSpec) -> dict[str, int]:
    test = min(spec.test_count, spec.count)
    val = min(spec.val_count, spec.count - test)
    return {"train": spec.count - test - val, "val": val, "test": test}


def generate_synthetic(spec: SynthSpec, out_dir) -> Path:
    """Write images, label maps, sidecars and a manifest; returns the manifest path.

    Records are ordered train, val, test; record i is drawn from its own
    seeded stream so the dataset is a pure function of ``spec``.
    """
    spec.validate()
    out_dir = Path(out_dir)
    sizes = split_sizes(spec)
    splits = ["train"] * sizes["train"] + ["val"] * sizes["val"] + ["test"] * sizes["test"]
    rows = []
    for i, split in enumerate(splits):
        rng = np.random.default_rng([spec.seed, i])
        image, labels, colors = render_face(spec, rng)
        stem = f"face_{i:04d}"
        write_tensor(out_dir / "images" / f"{stem}.tensor", image)
        write_labels(out_dir / "labels" / f"{stem}.labels", labels)
        sidecar = {
            "part_medians": {k: list(v) for k, v in part_medians(labels).items()},
            "class_colors": np.round(colors, 6).tolist(),
            "split": split,
        }
        atomic_write(out_dir / "images" / f"{stem}.json", json.dumps(sidecar, sort_keys=True).encode())
        rows.append((f"images/{stem}.tensor", f"labels/{stem}.labels", split))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, rows)
    return manifest


def dataset_checksum(manifest_path) -> str:
    """SHA-256 over the manifest and every referenced file, in manifest order."""
    manifest_path = Path(manifest_path)
    h = hashlib.sha256(manifest_path.read_bytes())
    for rec in read_manifest(manifest_path):
        for p in (rec.image, rec.labels, rec.image.with_suffix(".json")):
            if p.exists():
                h.update(p.read_bytes())
    return h.hexdigest()


def synth_spec_keys() -> list[str]:
    return [f.name for f in fields(SynthSpec)]
