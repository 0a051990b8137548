"""Sign binarization with straight-through gradients, and binarized layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import BatchNormState, DimensionError, Tensor, add, batchnorm, conv2d

WEIGHT_GRAD_MODES = ("ste_scaled", "ste_plain")


def sign(x):
    """Elementwise sign with sign(0) = +1."""
    return np.where(np.asarray(x) < 0, -1.0, 1.0)


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def sign_ste_backward(a_r, upstream):
    """Clip-derivative STE: pass ``upstream`` where |a_r| <= 1, zero elsewhere."""
    a, g = _values(a_r), _values(upstream)
    if a.shape != g.shape:
        raise DimensionError(f"sign_ste_backward: shapes {a.shape} and {g.shape} differ")
    return np.where(np.abs(a) <= 1.0, g, 0.0)


def sign_ste_forward(a_r):
    a = a_r.data
    return Tensor.from_op(sign(a), (a_r,), lambda g: (sign_ste_backward(a, g),))


def channel_scale(w):
    """Per-output-channel mean |w| over all remaining axes."""
    w = _values(w)
    return np.abs(w.reshape(w.shape[0], -1)).mean(axis=1)


def binarize_weights(w_r, mode="ste_scaled"):
    """Channel-scaled sign binarization of conv weights.

    Output channel f becomes ``mean|w_r[f]| * sign(w_r[f])``. In backward the
    scale is held constant for the step and the sign gets the clipped STE;
    ``ste_plain`` drops the scale factor from the gradient.
    """
    if mode not in WEIGHT_GRAD_MODES:
        raise ValueError(f"unknown weight_grad_mode {mode!r}")
    w = w_r.data
    if w.size == 0:
        raise DimensionError("binarize_weights: empty tensor")
    bshape = (-1,) + (1,) * (w.ndim - 1)
    scale = channel_scale(w).reshape(bshape)
    out = scale * sign(w)
    gate = np.abs(w) <= 1.0
    if mode == "ste_scaled":
        def backward_fn(g):
            return (np.where(gate, g * scale, 0.0),)
    else:
        def backward_fn(g):
            return (np.where(gate, g, 0.0),)
    return Tensor.from_op(out, (w_r,), backward_fn)


@dataclass
class BlockConfig:
    binarize_weights: bool = True
    binarize_activations: bool = True
    weight_grad_mode: str = "ste_scaled"


class BinaryActivation:
    """Stateless sign activation. Keeps its last input for saturation stats."""

    def __init__(self, enabled=True):
        self.enabled = enabled
        self.last_input = None

    def __call__(self, x, training=True):
        self.last_input = x.data
        return sign_ste_forward(x) if self.enabled else x

    def parameters(self):
        return []


def kaiming_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    """Real-valued convolution, no bias."""

    binarized = False

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, pad=1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel)), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def effective_weight(self):
        return self.weight

    def __call__(self, x, training=True):
        return conv2d(x, self.effective_weight(), self.stride, self.pad)

    def parameters(self):
        return [self.weight]


class BinarizedConv(Conv2d):
    """Convolution over latent weights that are binarized on the fly.

    ``weight`` holds the latent real values and is only ever changed by the
    optimizer; the forward pass uses :func:`binarize_weights` of it when
    ``binarize_weights`` is set.
    """

    binarized = True

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, pad=1, rng=None,
                 binarize_weights=True, binarize_activations=True,
                 weight_grad_mode="ste_scaled"):
        super().__init__(in_ch, out_ch, kernel, stride, pad, rng)
        self.binarize_weights = binarize_weights
        self.binarize_activations = binarize_activations
        self.weight_grad_mode = weight_grad_mode

    def effective_weight(self):
        if self.binarize_weights:
            return binarize_weights(self.weight, self.weight_grad_mode)
        return self.weight


class BatchNorm:
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps
        self.state = BatchNormState(channels, momentum)

    def __call__(self, x, training=True):
        return batchnorm(x, self.gamma, self.beta, self.eps, training, self.state)

    def parameters(self):
        return [self.gamma, self.beta]


class BasicBlock:
    """sign -> binarized conv -> batchnorm, plus a real-valued shortcut.

    The shortcut is the identity when shapes agree, otherwise a real 1x1
    conv + batchnorm.
    """

    def __init__(self, layers, shortcut=None):
        self.layers = layers
        self.shortcut = shortcut or []
        self.activation = next((l for l in layers if isinstance(l, BinaryActivation)), None)
        self.conv = next(l for l in layers if isinstance(l, BinarizedConv))

    def set_binarization(self, weights, activations):
        self.conv.binarize_weights = weights
        self.conv.binarize_activations = activations
        self.activation.enabled = activations

    def __call__(self, x, training=True):
        out = x
        for layer in self.layers:
            out = layer(out, training)
        res = x
        for layer in self.shortcut:
            res = layer(res, training)
        return add(out, res)

    def parameters(self):
        params = []
        for layer in self.layers + self.shortcut:
            params.extend(layer.parameters())
        return params


def build_block(in_ch, out_ch, stride=1, cfg=None, rng=None):
    if in_ch <= 0 or out_ch <= 0:
        raise ValueError(f"channel counts must be positive, got {in_ch}, {out_ch}")
    cfg = cfg or BlockConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    # the activation layer is always present so saturation can be measured;
    # it is an identity when activations are not binarized
    layers = [
        BinaryActivation(cfg.binarize_activations),
        BinarizedConv(in_ch, out_ch, 3, stride, 1, rng,
                      cfg.binarize_weights, cfg.binarize_activations, cfg.weight_grad_mode),
        BatchNorm(out_ch),
    ]
    shortcut = None
    if in_ch != out_ch or stride != 1:
        shortcut = [Conv2d(in_ch, out_ch, 1, stride, 0, rng), BatchNorm(out_ch)]
    return BasicBlock(layers, shortcut)
