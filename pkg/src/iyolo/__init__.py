"""CPU-only single-scale YOLO-style detector with label smoothing and hard example mining."""

from .boxes import Box, DecodedBox, GridSpec, GroundTruth, decode, encode, iou, nms
from .loss import LossBreakdown, LossWeights, LsrConfig, detection_loss, lsr_loss
from .network import Network, NetworkSpec, build, iyolo_spec, tiny_spec
from .weights import load_weights, save_weights

__version__ = "0.1.0"
