import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from rainbowssd.boxes import generate_default_boxes
from rainbowssd.config import RunConfig
from rainbowssd.heads import HeadOutput, build_heads
from rainbowssd.postprocess import Detection, detect_batch
from rainbowssd.pyramid import Pyramid, build_backbone, build_fusion, fuse, pyramid_shape_table
from rainbowssd.tensor import Tensor, Tensor4, as_tensor4

LOGGER = logging.getLogger(__name__)


class SSDModel:
    """
    Backbone, fusion and classifier heads for one RunConfig, plus the frozen
    default boxes the head outputs are aligned with.
    """

    def __init__(self, config: RunConfig, seed: int = 0) -> None:
        config.validate()
        assert config.layout is not None
        self.config = config
        self.backbone = build_backbone(config.pyramid, seed)
        self.fusion = build_fusion(config.pyramid, config.fusion)
        channels = [row.c for row in pyramid_shape_table(config.pyramid, config.fusion)]
        self.heads = build_heads(channels, config.layout, config.num_classes, seed + 1)
        self.anchors = generate_default_boxes(config.layout, config.pyramid)

    def features(self, images: Tensor4, training: bool = False) -> Pyramid:
        """Fused pyramid for a batch of images"""
        return fuse(self.backbone(images, training), self.fusion, training)

    def __call__(self, images, training: bool = False) -> HeadOutput:
        return self.heads(self.features(as_tensor4(images), training))

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.backbone.named_parameters()
        yield from self.fusion.named_parameters()
        yield from self.heads.named_parameters()

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield from self.backbone.named_buffers()
        yield from self.fusion.named_buffers()

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state(self) -> Dict[str, np.ndarray]:
        """Every parameter and buffer array by name"""
        result = {name: t.data for name, t in self.named_parameters()}
        result.update(self.named_buffers())
        return result

    def unshare_heads(self) -> None:
        """Switch from one shared classifier to per-level copies"""
        self.heads.unshare()
        self.config.layout = self.heads.layout

    def predict(self, images) -> Tuple[np.ndarray, np.ndarray]:
        """Inference-mode (n, A, C) logits and (n, A, 4) offsets"""
        out = self(images, training=False)
        return out.logits.data, out.offsets.data

    def detect(
        self,
        images,
        image_ids: Sequence[str],
        *,
        score_threshold: Optional[float] = None,
    ) -> Dict[str, List[Detection]]:
        """Detections per image id using the configured eval thresholds"""
        opts = self.config.eval
        logits, offsets = self.predict(images)
        return detect_batch(
            logits,
            offsets,
            self.anchors,
            image_ids,
            opts.score_threshold if score_threshold is None else score_threshold,
            opts.nms_threshold,
            opts.top_k,
        )
