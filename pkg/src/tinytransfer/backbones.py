"""Randomly initialised stand-in backbones with the published topologies.

No pretrained weights ship with the package. These builders reproduce the
layer structure and tensor shapes of MobileNetV2 (224x224x3 -> 7x7x1280,
classifier removed) and of YAMNet's MobileNetV1 body (96x64x1 -> 3x2x1024,
followed by its 3-node prediction tail), with seeded He-uniform weights in
place of trained ones.
"""

from __future__ import annotations

import numpy as np

from .graph import GraphBuilder, ModelGraph

# (expansion, out channels, repeats, first stride)
MOBILENET_V2_BLOCKS = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]

# (depthwise stride, pointwise out channels)
YAMNET_BLOCKS = [
    (1, 64),
    (2, 128),
    (1, 128),
    (2, 256),
    (1, 256),
    (2, 512),
    (1, 512),
    (1, 512),
    (1, 512),
    (1, 512),
    (1, 512),
    (2, 1024),
    (1, 1024),
]


class _Init:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    # He-uniform: same variance as the Gaussian form but bounded at sqrt(3)*std
    def conv(self, kh, kw, cin, cout, gain=2.0):
        limit = np.sqrt(3.0 * gain / (kh * kw * cin))
        return self.rng.uniform(-limit, limit, (kh, kw, cin, cout)).astype(np.float32)

    def depthwise(self, kh, kw, c, gain=2.0):
        limit = np.sqrt(3.0 * gain / (kh * kw))
        return self.rng.uniform(-limit, limit, (kh, kw, c, 1)).astype(np.float32)

    def dense(self, fin, fout):
        limit = np.sqrt(6.0 / (fin + fout))
        return self.rng.uniform(-limit, limit, (fin, fout)).astype(np.float32)

    def bias(self, n, std=0.01):
        return (self.rng.standard_normal(n) * std).astype(np.float32)


def mobilenet_v2(seed: int = 0, include_top: bool = False, num_classes: int = 1000) -> ModelGraph:
    """MobileNetV2 topology (width 1.0, 224x224 input)."""
    init = _Init(seed)
    b = GraphBuilder("mobilenet_v2", (None, 224, 224, 3), {"architecture": "mobilenet_v2", "init_seed": str(seed)})
    b.add("conv2d", {"stride": 2, "padding": "same"}, [init.conv(3, 3, 3, 32), init.bias(32)])
    b.add("activation", {"kind": "relu6"})
    cin = 32
    for t, c, n, s in MOBILENET_V2_BLOCKS:
        for i in range(n):
            stride = s if i == 0 else 1
            block_in = b.last
            hidden = cin * t
            if t != 1:
                b.add("conv2d", {"stride": 1, "padding": "same"}, [init.conv(1, 1, cin, hidden), init.bias(hidden)])
                b.add("activation", {"kind": "relu6"})
            b.add("depthwise_conv2d", {"stride": stride, "padding": "same"}, [init.depthwise(3, 3, hidden), init.bias(hidden)])
            b.add("activation", {"kind": "relu6"})
            # linear bottleneck; damped so residual sums stay bounded in a random net
            b.add("conv2d", {"stride": 1, "padding": "same"}, [init.conv(1, 1, hidden, c, gain=0.5), init.bias(c)])
            if stride == 1 and cin == c:
                b.add("add", inputs=[block_in, b.last])
            cin = c
    b.add("conv2d", {"stride": 1, "padding": "same"}, [init.conv(1, 1, cin, 1280), init.bias(1280)])
    b.add("activation", {"kind": "relu6"})
    if include_top:
        b.add("global_average_pool")
        b.add("dense", weights=[init.dense(1280, num_classes), np.zeros(num_classes, np.float32)])
        b.add("activation", {"kind": "softmax"})
    return b.build()


def yamnet(seed: int = 0, include_top: bool = True, num_classes: int = 521) -> ModelGraph:
    """YAMNet body: MobileNetV1 on a 96x64 log-mel patch.

    With ``include_top`` the graph ends in GAP -> dense(521) -> sigmoid, the
    three nodes dropped when using it as a feature extractor.
    """
    init = _Init(seed)
    b = GraphBuilder("yamnet", (None, 96, 64, 1), {"architecture": "yamnet", "init_seed": str(seed)})
    b.add("conv2d", {"stride": 2, "padding": "same"}, [init.conv(3, 3, 1, 32), init.bias(32)])
    b.add("activation", {"kind": "relu"})
    cin = 32
    for s, c in YAMNET_BLOCKS:
        b.add("depthwise_conv2d", {"stride": s, "padding": "same"}, [init.depthwise(3, 3, cin), init.bias(cin)])
        b.add("activation", {"kind": "relu"})
        b.add("conv2d", {"stride": 1, "padding": "same"}, [init.conv(1, 1, cin, c), init.bias(c)])
        b.add("activation", {"kind": "relu"})
        cin = c
    if include_top:
        b.add("global_average_pool")
        b.add("dense", weights=[init.dense(cin, num_classes), np.zeros(num_classes, np.float32)])
        b.add("activation", {"kind": "sigmoid"})
    return b.build()


FIXTURES = {"mobilenet_v2": mobilenet_v2, "yamnet": yamnet}
