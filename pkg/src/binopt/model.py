"""The fixed desk-scale CNN: real stem, binary residual blocks, pooled real classifier."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .binary import BatchNorm, BinarizedConv, BlockConfig, Conv2d, build_block
from .tensor import Tensor, avg_pool2d, linear, reshape


class Linear:
    def __init__(self, in_features, out_features, rng):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, out_features), requires_grad=True)

    def __call__(self, x, training=True):
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class Network:
    """conv3x3 (real) + BN -> ``blocks`` binary blocks -> avg-pool -> linear.

    Pooling keeps a ``pool_grid`` x ``pool_grid`` spatial map so the classifier
    still sees coarse position. With ``binarize_first_last`` the stem conv is
    a :class:`BinarizedConv` too (its input is never sign-binarized).
    """

    def __init__(self, in_channels, num_classes, image_size=8, width=32, blocks=4,
                 pool_grid=2, binarize_first_last=False, weight_grad_mode="ste_scaled",
                 binarize_weights=True, binarize_activations=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if image_size % pool_grid:
            raise ValueError(f"image_size {image_size} not divisible by pool_grid {pool_grid}")
        self.config = dict(in_channels=in_channels, num_classes=num_classes,
                           image_size=image_size, width=width, blocks=blocks,
                           pool_grid=pool_grid, binarize_first_last=binarize_first_last,
                           weight_grad_mode=weight_grad_mode)
        if binarize_first_last:
            self.stem = BinarizedConv(in_channels, width, 3, 1, 1, rng, binarize_weights, False,
                                      weight_grad_mode)
        else:
            self.stem = Conv2d(in_channels, width, 3, 1, 1, rng)
        self.stem_bn = BatchNorm(width)
        cfg = BlockConfig(binarize_weights, binarize_activations, weight_grad_mode)
        self.blocks = [build_block(width, width, 1, cfg, rng) for _ in range(blocks)]
        self.pool_kernel = image_size // pool_grid
        self.classifier = Linear(width * pool_grid * pool_grid, num_classes, rng)
        self.set_binarization(binarize_weights, binarize_activations)

    # -- structure ---------------------------------------------------------

    def set_binarization(self, weights, activations):
        for b in self.blocks:
            b.set_binarization(weights, activations)
        if isinstance(self.stem, BinarizedConv):
            self.stem.binarize_weights = weights
        self.binarize_weights = weights
        self.binarize_activations = activations

    def batchnorms(self):
        bns = [self.stem_bn]
        for b in self.blocks:
            bns.extend(l for l in b.layers + b.shortcut if isinstance(l, BatchNorm))
        return bns

    def named_parameters(self):
        out = [("stem.weight", self.stem.weight),
               ("stem_bn.gamma", self.stem_bn.gamma), ("stem_bn.beta", self.stem_bn.beta)]
        for i, b in enumerate(self.blocks):
            for j, p in enumerate(b.parameters()):
                out.append((f"blocks.{i}.p{j}", p))
        out += [("classifier.weight", self.classifier.weight),
                ("classifier.bias", self.classifier.bias)]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def decay_mask(self):
        """Weight decay goes to conv and linear weights, not BN affine terms or biases."""
        return [p.ndim >= 2 for p in self.parameters()]

    def named_buffers(self):
        out = []
        for i, bn in enumerate(self.batchnorms()):
            out.append((f"bn.{i}.running_mean", bn.state.running_mean))
            out.append((f"bn.{i}.running_var", bn.state.running_var))
        return out

    def load_buffers(self, arrays):
        bns = self.batchnorms()
        for i, bn in enumerate(bns):
            bn.state.running_mean = np.array(arrays[2 * i], dtype=np.float64)
            bn.state.running_var = np.array(arrays[2 * i + 1], dtype=np.float64)

    def binary_convs(self):
        """Layers whose weights the diagnostics measure."""
        convs = [b.conv for b in self.blocks]
        if isinstance(self.stem, BinarizedConv):
            convs.insert(0, self.stem)
        return convs

    def measured_weights(self):
        return [c.weight for c in self.binary_convs()]

    def activation_sites(self):
        return [b.activation for b in self.blocks]

    def digest(self):
        blob = json.dumps(self.config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    # -- forward -----------------------------------------------------------

    def __call__(self, x, training=True, track_stats=True):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        saved = []
        if not track_stats:
            for bn in self.batchnorms():
                saved.append(bn.state)
                bn.state = None
        try:
            out = self.stem_bn(self.stem(x, training), training)
            for b in self.blocks:
                out = b(out, training)
            out = avg_pool2d(out, self.pool_kernel)
            out = reshape(out, out.shape[0], -1)
            return self.classifier(out, training)
        finally:
            if saved:
                for bn, st in zip(self.batchnorms(), saved):
                    bn.state = st

    def predict(self, x, batch_size=512):
        preds = []
        for i in range(0, len(x), batch_size):
            logits = self(x[i:i + batch_size], training=False)
            preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def accuracy(self, x, y):
        if len(x) == 0:
            return float("nan")
        return float(np.mean(self.predict(x) == np.asarray(y)))
