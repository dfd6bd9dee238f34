"""Image -> raw head -> decoded boxes -> confidence filter -> NMS -> annotations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import decode, nms
from .errors import SpecMismatchError
from .evaluation import Detection
from .formats import Annotation, resize_nearest
from .network import Network, iyolo_spec, tiny_spec
from .weights import load_weights, read_weights_header

# per-class border colours for rendering (car, person, driver)
RENDER_COLORS = np.array([[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.3, 0.5, 1.0]])


@dataclass(frozen=True)
class DetectConfig:
    conf_threshold: float = 0.25
    nms_threshold: float = 0.45

    def __post_init__(self):
        for v in (self.conf_threshold, self.nms_threshold):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"threshold {v} outside [0, 1]")


def prepare(image, net: Network):
    size = net.spec.input_shape[1]
    img = np.asarray(image, dtype=np.float32)
    if img.shape[1:] != (size, size):
        img = resize_nearest(img, size)
    return np.clip(img, 0.0, 1.0)


def detect(net: Network, image, cfg: DetectConfig = DetectConfig()):
    """Detections for one ``(3, H, W)`` image, sorted by confidence."""
    raw = net.forward(prepare(image, net))
    boxes = [d for d in decode(raw, net.spec.anchors) if d.confidence >= cfg.conf_threshold]
    kept = nms(boxes, cfg.nms_threshold)
    return [Detection(d.class_id, d.to_box(), d.confidence) for d in kept
            if d.to_box().area > 0]


def to_annotations(dets):
    return [Annotation.from_box(d.class_id, d.box, d.confidence) for d in dets]


def render(image, dets, thickness=2):
    """Copy of ``image`` with each detection drawn as a coloured border."""
    out = np.array(image, dtype=np.float32, copy=True)
    _, h, w = out.shape
    for d in dets:
        color = RENDER_COLORS[d.class_id % len(RENDER_COLORS)][:, None, None]
        x1 = int(np.clip(round(d.box.x1 * w), 0, w - 1))
        x2 = int(np.clip(round(d.box.x2 * w) - 1, 0, w - 1))
        y1 = int(np.clip(round(d.box.y1 * h), 0, h - 1))
        y2 = int(np.clip(round(d.box.y2 * h) - 1, 0, h - 1))
        t = thickness
        out[:, y1:min(y1 + t, y2 + 1), x1:x2 + 1] = color
        out[:, max(y2 - t + 1, y1):y2 + 1, x1:x2 + 1] = color
        out[:, y1:y2 + 1, x1:min(x1 + t, x2 + 1)] = color
        out[:, y1:y2 + 1, max(x2 - t + 1, x1):x2 + 1] = color
    return out


KNOWN_SPECS = {"iyolo": iyolo_spec, "tiny": tiny_spec}


def spec_for_weights(path):
    """Pick the known spec whose conv-layer count and class count match the file."""
    header = read_weights_header(path)
    for factory in KNOWN_SPECS.values():
        spec = factory(num_classes=header["num_classes"],
                       anchors=[tuple(a) for a in header["anchors"]])
        if len(spec.conv_layers()) == header["conv_layers"]:
            return spec
    raise SpecMismatchError(header["conv_layers_offset"],
                            f"no known network has {header['conv_layers']} conv layers")


def load_network(path):
    return load_weights(spec_for_weights(path), path)
