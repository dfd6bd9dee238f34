"""PPM images, annotation text files and CSV outputs."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Box, GroundTruth
from .errors import (AnnotationError, MaxvalError, PPMError, TruncatedPayloadError,
                     UnsupportedFormatError)

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(data, count):
    pos = 0
    tokens = []
    for _ in range(count):
        m = _HEADER_TOKEN.match(data, pos)
        if not m:
            raise PPMError("truncated PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def decode_ppm(data: bytes):
    if data[:2] != b"P6":
        raise UnsupportedFormatError(f"unsupported image format {data[:2]!r}, only P6 is read")
    (_, w, h, maxval), pos = _header_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PPMError(f"malformed PPM header: {exc}") from None
    if w < 1 or h < 1:
        raise PPMError(f"invalid PPM size {w}x{h}")
    if maxval != 255:
        raise MaxvalError(f"maxval {maxval} unsupported, expected 255")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PPMError("missing whitespace after PPM header")
    pos += 1
    need = w * h * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"pixel payload has {len(payload)} bytes, expected {need}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def read_ppm(path):
    """Load a binary PPM as a ``(3, H, W)`` float32 array in [0, 1]."""
    return decode_ppm(Path(path).read_bytes())


def to_bytes(image):
    img = np.asarray(image, dtype=np.float64)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(image, path):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    body = to_bytes(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + body)


def resize_nearest(image, size):
    """Square nearest-neighbour resize of ``(C, H, W)`` to ``(C, size, size)``."""
    _, h, w = image.shape
    ys = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    xs = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return image[:, ys][:, :, xs]


# -- annotations -------------------------------------------------------------

@dataclass(frozen=True)
class Annotation:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    confidence: float | None = None

    def box(self):
        return Box.from_center(self.cx, self.cy, self.w, self.h).clipped()

    def to_ground_truth(self):
        return GroundTruth(self.class_id, self.box())

    @classmethod
    def from_box(cls, class_id, box: Box, confidence=None):
        box = box.clipped()
        cx, cy = box.center
        w, h = box.size
        return cls(class_id, cx, cy, w, h, confidence)


def format_annotation(a: Annotation):
    fields = [str(a.class_id)] + [repr(float(v)) for v in (a.cx, a.cy, a.w, a.h)]
    if a.confidence is not None:
        fields.append(repr(float(a.confidence)))
    return " ".join(fields)


def parse_annotation_line(line, num_classes=3, where=("<string>", 0)):
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    parts = text.split()
    if len(parts) not in (5, 6):
        raise AnnotationError(*where, f"expected 5 or 6 fields, got {len(parts)}")
    try:
        class_id = int(parts[0])
        vals = [float(v) for v in parts[1:]]
    except ValueError as exc:
        raise AnnotationError(*where, str(exc)) from None
    if not 0 <= class_id < num_classes:
        raise AnnotationError(*where, f"class id {class_id} not in 0..{num_classes - 1}")
    if not all(np.isfinite(vals)):
        raise AnnotationError(*where, "non-finite value")
    cx, cy, w, h = vals[:4]
    if not all(0 <= v <= 1 for v in (cx, cy, w, h)):
        raise AnnotationError(*where, "box values must be normalized to [0, 1]")
    if w <= 0 or h <= 0:
        raise AnnotationError(*where, "box width and height must be > 0")
    conf = vals[4] if len(vals) == 5 else None
    return Annotation(class_id, cx, cy, w, h, conf)


def parse_annotations(text, path="<string>", num_classes=3):
    out = []
    for no, line in enumerate(text.splitlines(), start=1):
        a = parse_annotation_line(line, num_classes, (path, no))
        if a is not None:
            out.append(a)
    return out


def read_annotations(path, num_classes=3):
    return parse_annotations(Path(path).read_text(), str(path), num_classes)


def write_annotations(path, annotations, header=None):
    lines = [f"# {header}"] if header else []
    lines += [format_annotation(a) for a in annotations]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# -- CSV ---------------------------------------------------------------------

def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def format_crop(crop):
    """Annotation line for a mined crop, category and IoU kept as a comment."""
    tail = f"# {crop.category.value} iou={crop.iou:.6f}"
    if crop.class_id < 0:
        cx, cy = crop.box.center
        w, h = crop.box.size
        return f"{tail} box={cx!r} {cy!r} {w!r} {h!r}"
    return format_annotation(Annotation.from_box(crop.class_id, crop.box)) + " " + tail


def write_crops(path, crops, header=None):
    lines = [f"# {header}"] if header else []
    lines += [format_crop(c) for c in crops]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
