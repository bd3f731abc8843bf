"""Toy conv -> global-average-pool -> fully-connected classifier.

Its 1x1 "output mask" lets the segmentation CAM ops be checked against
their classification counterparts, and its gradients at the feature layer
are spatially constant by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .unet import CapturePoint, _as_image


@dataclass
class GapClassifier:
    in_channels: int = 1
    features: int = 4
    num_classes: int = 3
    seed: int = 0
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            rng = np.random.default_rng(self.seed)
            k, cin = self.features, self.in_channels
            self.params = {
                "conv.weight": rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), size=(k, cin, 3, 3)),
                "conv.bias": rng.normal(0.0, 0.1, size=(k,)),
                "fc.weight": rng.normal(0.0, 1.0, size=(self.num_classes, k)),
                "fc.bias": np.zeros(self.num_classes),
            }

    capture_names = ["features"]
    default_layer = "features"

    @property
    def fc_weight(self) -> np.ndarray:
        return self.params["fc.weight"]

    def forward(self, image) -> Tuple[Tensor, List[CapturePoint], Tape]:
        data = _as_image(image)
        if data.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels", "channels")
        tape = Tape()
        x = tape.leaf(data, name="input")
        p = {k: tape.leaf(v, name=k) for k, v in self.params.items()}
        a = ad.relu(ad.conv2d(x, p["conv.weight"], p["conv.bias"], padding=1))
        pooled = ad.global_avg_pool(a)
        logits = ad.linear(pooled, p["fc.weight"], p["fc.bias"])
        logits = ad.reshape(logits, (1, self.num_classes, 1, 1))
        return logits, [CapturePoint("features", a, a.node)], tape
