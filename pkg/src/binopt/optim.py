"""SGD with momentum and the adaptive optimizer family, with signed weight decay.

The ``*_step`` functions update one parameter array in place from its
gradient and a per-parameter state dict; :class:`Optimizer` drives them over a
list of tensors and owns the step counter and hyperparameters.
"""

from __future__ import annotations

import copy

import numpy as np

from .tensor import DimensionError

# initial learning rates of the adaptive comparison (framework defaults)
COMPARISON_LR = {
    "adam": 0.001,
    "rmsprop": 0.01,
    "adagrad": 0.01,
    "adadelta": 1.0,
    "amsgrad": 0.001,
    "adabound": 0.001,
    "sgd": 0.1,
}

# initial learning rates used for training runs
TRAINING_LR = {"sgd": 0.1, "adam": 0.0025}

DEFAULTS = {
    "sgd": dict(momentum=0.9),
    "adam": dict(beta1=0.9, beta2=0.999, eps=1e-8),
    "amsgrad": dict(beta1=0.9, beta2=0.999, eps=1e-8),
    "rmsprop": dict(alpha=0.99, eps=1e-8),
    "adagrad": dict(eps=1e-10),
    "adadelta": dict(rho=0.9, eps=1e-6),
    "adabound": dict(beta1=0.9, beta2=0.999, eps=1e-8, final_lr=0.1, gamma=1e-3),
}


def _check(w, g):
    if np.shape(w) != np.shape(g):
        raise DimensionError(f"parameter shape {np.shape(w)} does not match gradient {np.shape(g)}")


def apply_weight_decay(w, g, weight_decay):
    """Gradient with L2 decay folded in. Negative decay grows |w|."""
    if weight_decay == 0:
        return g
    return g + weight_decay * w


def sgd_momentum_step(w, g, state, lr, momentum=0.9):
    _check(w, g)
    v = state.get("v")
    v = g.copy() if v is None else momentum * v + g
    state["v"] = v
    w -= lr * v


def adam_step(w, g, state, lr, t, beta1=0.9, beta2=0.999, eps=1e-8):
    _check(w, g)
    v = beta1 * state.get("v", 0.0) + (1 - beta1) * g
    m = beta2 * state.get("m", 0.0) + (1 - beta2) * g * g
    state["v"], state["m"] = v, m
    v_hat = v / (1 - beta1 ** t)
    m_hat = m / (1 - beta2 ** t)
    w -= lr * v_hat / (np.sqrt(m_hat) + eps)


def amsgrad_step(w, g, state, lr, t, beta1=0.9, beta2=0.999, eps=1e-8):
    _check(w, g)
    v = beta1 * state.get("v", 0.0) + (1 - beta1) * g
    m = beta2 * state.get("m", 0.0) + (1 - beta2) * g * g
    m_hat = m / (1 - beta2 ** t)
    m_max = np.maximum(state.get("m_max", 0.0), m_hat)
    state["v"], state["m"], state["m_max"] = v, m, m_max
    v_hat = v / (1 - beta1 ** t)
    w -= lr * v_hat / (np.sqrt(m_max) + eps)


def rmsprop_step(w, g, state, lr, alpha=0.99, eps=1e-8):
    _check(w, g)
    m = alpha * state.get("m", 0.0) + (1 - alpha) * g * g
    state["m"] = m
    w -= lr * g / (np.sqrt(m) + eps)


def adagrad_step(w, g, state, lr, eps=1e-10):
    _check(w, g)
    s = state.get("sum_sq", 0.0) + g * g
    state["sum_sq"] = s
    w -= lr * g / (np.sqrt(s) + eps)


def adadelta_step(w, g, state, lr, rho=0.9, eps=1e-6):
    _check(w, g)
    sq_avg = rho * state.get("sq_avg", 0.0) + (1 - rho) * g * g
    delta = np.sqrt(state.get("acc_delta", 0.0) + eps) / np.sqrt(sq_avg + eps) * g
    state["sq_avg"] = sq_avg
    state["acc_delta"] = rho * state.get("acc_delta", 0.0) + (1 - rho) * delta * delta
    w -= lr * delta


def adabound_bounds(lr, base_lr, t, final_lr=0.1, gamma=1e-3):
    """Per-step clip range; both ends converge to ``final_lr`` (scaled with lr decay)."""
    fl = final_lr * lr / base_lr
    return fl * (1 - 1 / (gamma * t + 1)), fl * (1 + 1 / (gamma * t))


def adabound_step(w, g, state, lr, t, base_lr, beta1=0.9, beta2=0.999, eps=1e-8,
                  final_lr=0.1, gamma=1e-3):
    _check(w, g)
    v = beta1 * state.get("v", 0.0) + (1 - beta1) * g
    m = beta2 * state.get("m", 0.0) + (1 - beta2) * g * g
    state["v"], state["m"] = v, m
    lower, upper = adabound_bounds(lr, base_lr, t, final_lr, gamma)
    step_size = lr * np.sqrt(1 - beta2 ** t) / (1 - beta1 ** t)
    step = np.clip(step_size / (np.sqrt(m) + eps), lower, upper)
    w -= step * v


_STEPS = {
    "sgd": sgd_momentum_step,
    "adam": adam_step,
    "amsgrad": amsgrad_step,
    "rmsprop": rmsprop_step,
    "adagrad": adagrad_step,
    "adadelta": adadelta_step,
    "adabound": adabound_step,
}

OPTIMIZERS = tuple(_STEPS)


class Optimizer:
    """Applies one named update rule to a list of tensors.

    Weight decay is added to the gradient before the moment recurrences
    unless ``decoupled`` is set, in which case ``w -= lr * wd * w`` is applied
    separately. ``decay_mask`` selects which parameters get decay.
    """

    def __init__(self, name, params, lr=None, weight_decay=0.0, decoupled=False,
                 decay_mask=None, **hyper):
        name = name.lower()
        if name not in _STEPS:
            raise ValueError(f"unknown optimizer {name!r}; choose from {', '.join(OPTIMIZERS)}")
        self.name = name
        self.params = list(params)
        self.lr = float(lr if lr is not None else TRAINING_LR.get(name, COMPARISON_LR[name]))
        self.base_lr = self.lr
        self.weight_decay = float(weight_decay)
        self.decoupled = decoupled
        self.decay_mask = list(decay_mask) if decay_mask is not None else [True] * len(self.params)
        self.hyper = {**DEFAULTS[name], **hyper}
        self.t = 0
        self.state = [dict() for _ in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        fn = _STEPS[self.name]
        for p, st, decay in zip(self.params, self.state, self.decay_mask):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            wd = self.weight_decay if decay else 0.0
            if self.decoupled:
                if wd:
                    p.data -= self.lr * wd * p.data
            else:
                g = apply_weight_decay(p.data, g, wd)
            kwargs = dict(self.hyper)
            if self.name in ("adam", "amsgrad", "adabound"):
                kwargs["t"] = self.t
            if self.name == "adabound":
                kwargs["base_lr"] = self.base_lr
            fn(p.data, g, st, self.lr, **kwargs)

    def state_dict(self):
        return {
            "name": self.name,
            "lr": self.lr,
            "base_lr": self.base_lr,
            "weight_decay": self.weight_decay,
            "decoupled": self.decoupled,
            "hyper": dict(self.hyper),
            "t": self.t,
            "decay_mask": list(self.decay_mask),
            "state": [{k: np.array(v, dtype=np.float64) for k, v in st.items()} for st in self.state],
        }

    def load_state_dict(self, sd):
        if sd["name"] != self.name or len(sd["state"]) != len(self.params):
            raise ValueError("optimizer state does not match this optimizer")
        self.lr = float(sd["lr"])
        self.base_lr = float(sd["base_lr"])
        self.weight_decay = float(sd["weight_decay"])
        self.decoupled = bool(sd["decoupled"])
        self.hyper = dict(sd["hyper"])
        self.t = int(sd["t"])
        self.decay_mask = list(sd["decay_mask"])
        self.state = [{k: np.array(v, dtype=np.float64) for k, v in st.items()}
                      for st in copy.deepcopy(sd["state"])]
