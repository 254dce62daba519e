"""A small convnet with def-pooling branches and per-class hinge heads.

Layout: a trunk of conv / relu / max-pool layers, then several branches
(part-filter convolution followed by def-pooling), whose flattened outputs
are concatenated and mapped to ``K`` class scores by one linear layer.
Every layer exposes explicit ``forward`` / ``backward`` methods over
batched ``[B, C, H, W]`` arrays.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .defpool import (
    DefPoolConfig,
    defpool_backward,
    defpool_forward,
    make_directional_bases,
    make_maxpool_basis,
)
from .tensor import (
    ConvFilterBank,
    DimensionError,
    ParameterError,
    conv2d,
    conv2d_backward,
    load_tensor,
    max_pool,
    max_pool_backward,
    save_tensor,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params, self.grads = {}, {}

    def out_shape(self, in_shape):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv(Layer):
    def __init__(self, in_ch, out_ch, k, rng, input_grad=True):
        super().__init__()
        self.input_grad = input_grad
        bound = math.sqrt(6.0 / (in_ch * k * k))
        self.params["weight"] = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        self.params["bias"] = np.zeros(out_ch)
        self.zero_grad()

    def out_shape(self, s):
        _, K, C, kh, kw = (None, *self.params["weight"].shape)
        if s[0] != C or s[1] < kh or s[2] < kw:
            raise DimensionError(f"conv {self.params['weight'].shape} cannot take {s}")
        return (K, s[1] - kh + 1, s[2] - kw + 1)

    def _bank(self):
        return ConvFilterBank(self.params["weight"], self.params["bias"])

    def forward(self, x):
        self.x = x
        return conv2d(x, self._bank())

    def backward(self, g):
        gx, gw, gb = conv2d_backward(g, self.x, self._bank(), self.input_grad)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx


class ReLU(Layer):
    def out_shape(self, s):
        return s

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, g):
        return np.where(self.mask, g, 0.0)


class MaxPool(Layer):
    def __init__(self, k, stride, pad=0):
        super().__init__()
        self.k, self.stride, self.pad = k, stride, pad

    def out_shape(self, s):
        f = lambda n: (n + 2 * self.pad - self.k) // self.stride + 1  # noqa: E731
        if f(s[1]) < 1 or f(s[2]) < 1:
            raise DimensionError(f"max-pool {self.k} cannot take {s}")
        return (s[0], f(s[1]), f(s[2]))

    def forward(self, x):
        self.in_shape = x.shape
        out, self.arg = max_pool(x, self.k, self.stride, self.pad)
        return out

    def backward(self, g):
        return max_pool_backward(g, self.arg, self.in_shape)


class DefPool(Layer):
    """Def-pooling layer; coefficients are a parameter when the basis is learnable."""

    def __init__(self, cfg: DefPoolConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.learnable:
            self.params["coeffs"] = cfg.coeffs
        self.zero_grad()

    def out_shape(self, s):
        if s[0] != self.cfg.channels or s[1] < self.cfg.sy or s[2] < self.cfg.sx:
            raise DimensionError(f"def-pool over {self.cfg.channels} channels cannot take {s}")
        return (s[0], s[1] // self.cfg.sy, s[2] // self.cfg.sx)

    def forward(self, x):
        if self.cfg.learnable:
            self.cfg.coeffs = self.params["coeffs"]
        out, self.rec = defpool_forward(x, self.cfg)
        return out

    def backward(self, g):
        gx, ga = defpool_backward(g, self.rec, self.cfg)
        if self.cfg.learnable:
            self.grads["coeffs"] += ga
        return gx


class Linear(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        bound = math.sqrt(6.0 / n_in)
        self.params["weight"] = rng.uniform(-bound, bound, size=(n_out, n_in))
        self.params["bias"] = np.zeros(n_out)
        self.zero_grad()

    def forward(self, x):
        self.x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, g):
        self.grads["weight"] += g.T @ self.x
        self.grads["bias"] += g.sum(axis=0)
        return g @ self.params["weight"]


class LayerStack:
    """Sequential layers whose shapes are checked against ``in_shape`` up front."""

    def __init__(self, layers, in_shape):
        self.layers = list(layers)
        self.in_shape = tuple(in_shape)
        s = self.in_shape
        for layer in self.layers:
            s = layer.out_shape(s)
        self.out_shape = s

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            if g is None:
                break
            g = layer.backward(g)
        return g


@dataclass
class Architecture:
    """Serializable description of a :class:`Network`.

    ``trunk`` entries are ``["conv", out_ch, k]``, ``["relu"]`` or
    ``["maxpool", k, stride]``.  Each branch is ``[part_size, n_parts]``;
    ``pooling`` is ``"defpool"`` (learnable directional penalties) or
    ``"maxpool"`` (the fixed zero/inf window of the same radius).
    """

    in_shape: tuple = (1, 28, 28)
    trunk: list = field(default_factory=lambda: [["conv", 8, 3], ["relu"], ["maxpool", 2, 2],
                                                 ["conv", 16, 3], ["relu"]])
    branches: list = field(default_factory=lambda: [[3, 6], [5, 6], [7, 6]])
    pooling: str = "defpool"
    radius: int = 3
    stride: int = 2
    classes: int = 4
    coeff_init: float = 0.0


class Network:
    def __init__(self, arch: Architecture, seed: int):
        if arch.pooling not in ("defpool", "maxpool"):
            raise ParameterError(f"unknown pooling {arch.pooling!r}")
        self.arch, self.seed = arch, seed
        rng = np.random.default_rng(seed)
        layers, s = [], tuple(arch.in_shape)
        for spec in arch.trunk:
            kind = spec[0]
            if kind == "conv":
                layer = Conv(s[0], spec[1], spec[2], rng, input_grad=bool(layers))
            elif kind == "relu":
                layer = ReLU()
            elif kind == "maxpool":
                layer = MaxPool(spec[1], spec[2])
            else:
                raise ParameterError(f"unknown trunk layer {kind!r}")
            layers.append(layer)
            s = layer.out_shape(s)
        self.trunk = LayerStack(layers, arch.in_shape)

        self.branches = []
        feat = 0
        for size, parts in arch.branches:
            conv = Conv(s[0], parts, size, rng)
            if arch.pooling == "defpool":
                basis = make_directional_bases(arch.radius)
                cfg = DefPoolConfig(arch.stride, arch.stride, basis, np.full((parts, basis.N), float(arch.coeff_init)))
            else:
                cfg = make_maxpool_basis(arch.radius, channels=parts, sx=arch.stride)
            stack = LayerStack([conv, DefPool(cfg)], s)
            self.branches.append(stack)
            feat += int(np.prod(stack.out_shape))
        self.n_features = feat
        self.head = Linear(feat, arch.classes, rng)

    def named_layers(self):
        for i, layer in enumerate(self.trunk.layers):
            yield f"trunk.{i}", layer
        for b, stack in enumerate(self.branches):
            for i, layer in enumerate(stack.layers):
                yield f"branch{b}.{i}", layer
        yield "head", self.head

    def parameters(self):
        """``(path, array)`` pairs; arrays are live views updated in place."""
        for name, layer in self.named_layers():
            for k, v in layer.params.items():
                yield f"{name}.{k}", v

    def gradients(self):
        for name, layer in self.named_layers():
            for k, v in layer.grads.items():
                yield f"{name}.{k}", v

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    def features(self, x):
        """Flattened def-pool outputs ``[B, n_features]`` (also caches for backward)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != tuple(self.arch.in_shape):
            raise DimensionError(f"expected [B, {self.arch.in_shape}], got {x.shape}")
        t = self.trunk.forward(x)
        self.trunk_out = t
        outs = [stack.forward(t) for stack in self.branches]
        self._shapes = [o.shape for o in outs]
        return np.concatenate([o.reshape(len(x), -1) for o in outs], axis=1)

    def forward(self, x):
        """Class scores ``[B, K]`` for a batch of images ``[B, C, H, W]``."""
        return self.head.forward(self.features(x))

    def backward(self, g_scores):
        """Accumulate parameter gradients; returns the input gradient if the first conv keeps it."""
        g = self.head.backward(g_scores)
        gt = np.zeros_like(self.trunk_out)
        start = 0
        for stack, shp in zip(self.branches, self._shapes):
            n = int(np.prod(shp[1:]))
            gt += stack.backward(g[:, start:start + n].reshape(shp))
            start += n
        return self.trunk.backward(gt)

    def reset_head(self, classes: int, seed: int):
        self.arch.classes = classes
        self.head = Linear(self.n_features, classes, np.random.default_rng(seed))

    def save(self, directory, info: dict | None = None):
        """Checkpoint: ``manifest.json`` plus one tensor file per parameter path.

        ``info`` (training configs, pretraining scheme, ...) is stored verbatim.
        """
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = {}
        for path, arr in self.parameters():
            fname = f"{path}.bin"
            save_tensor(arr, d / fname)
            files[path] = fname
        manifest = {"architecture": asdict(self.arch), "seed": self.seed, "parameters": files,
                    "info": info or {}}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        arch = Architecture(**manifest["architecture"])
        arch.in_shape = tuple(arch.in_shape)
        net = cls(arch, manifest["seed"])
        params = dict(net.parameters())
        for path, fname in manifest["parameters"].items():
            arr = load_tensor(d / fname)
            if arr.shape != params[path].shape:
                raise DimensionError(f"{path}: checkpoint shape {arr.shape} != {params[path].shape}")
            params[path][...] = arr
        return net


def hinge_loss(scores, labels):
    """Sum of per-class binary hinge losses.

    Works on a length-K vector or a ``[B, K]`` batch (loss summed per row).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise DimensionError(f"scores {s.shape} and labels {y.shape} differ")
    if not np.all((y == 1) | (y == -1)):
        raise ParameterError("labels must be -1 or +1")
    margin = 1.0 - y * s
    loss = np.maximum(margin, 0.0).sum(axis=-1)
    grad = np.where(margin > 0, -y, 0.0)
    return loss, grad


@dataclass
class TrainConfig:
    lr: float = 0.01
    drop_factor: float = 10.0
    drop_step: int | None = None  # defaults to 2/3 of iterations
    batch_size: int = 32
    iterations: int = 600
    seed: int = 0
    weight_decay: float = 1e-4
    momentum: float = 0.9
    coeff_lr_scale: float = 1.0  # def-pool coefficients often want a larger step
    clip_norm: float | None = 5.0  # global gradient-norm cap; None disables

    def __post_init__(self):
        if self.lr < 0 or self.iterations < 0 or self.batch_size < 1:
            raise ParameterError("lr >= 0, iterations >= 0 and batch_size >= 1 required")
        if self.drop_step is None:
            self.drop_step = max(1, (2 * self.iterations) // 3)
        if self.drop_step < 1:
            raise ParameterError("drop_step must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ParameterError("clip_norm must be positive or None")

    def rate(self, step: int) -> float:
        return self.lr / self.drop_factor ** (step // self.drop_step)


class SGD:
    """Momentum SGD with L2 weight decay and a step learning-rate schedule.

    The raw gradient is rescaled to at most ``clip_norm`` (global Euclidean
    norm) before decay and momentum; without the cap the first pretraining
    steps can push every trunk unit into the dead side of its ReLU.
    """

    def __init__(self, net: Network, cfg: TrainConfig):
        self.net, self.cfg, self.step_count = net, cfg, 0
        self.velocity = {p: np.zeros_like(v) for p, v in net.parameters()}

    def step(self, x, y) -> float:
        if len(x) == 0:
            raise ParameterError("empty batch")
        net = self.net
        net.zero_grad()
        scores = net.forward(x)
        loss, g = hinge_loss(scores, y)
        mean_loss = float(loss.mean())
        if not math.isfinite(mean_loss):
            raise DivergenceError(f"non-finite loss at step {self.step_count}")
        net.backward(g / len(x))
        self.apply()
        return mean_loss

    def apply(self) -> None:
        """Update every parameter from the gradients currently held by the model.

        The model only needs ``parameters()`` and ``gradients()`` yielding
        ``(path, array)`` pairs, so any small differentiable object works.
        """
        lr = self.cfg.rate(self.step_count)
        grads = dict(self.net.gradients())
        scale = 1.0
        if self.cfg.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.cfg.clip_norm:
                scale = self.cfg.clip_norm / norm
        for path, p in self.net.parameters():
            gp = grads[path] * scale if scale != 1.0 else grads[path]
            if self.cfg.weight_decay and not path.endswith(("bias", "coeffs")):
                gp = gp + self.cfg.weight_decay * p
            if path.endswith("coeffs"):
                gp = gp * self.cfg.coeff_lr_scale
            v = self.velocity[path]
            v *= self.cfg.momentum
            v -= lr * gp
            p += v
        self.step_count += 1


def sgd_step(net: Network, x, y, cfg: TrainConfig, optimizer: SGD | None = None) -> float:
    """One optimisation step on batch ``(x, y)``; returns the mean batch loss."""
    optimizer = optimizer or SGD(net, cfg)
    return optimizer.step(x, y)


def train(net: Network, x, y, cfg: TrainConfig, history: list | None = None) -> Network:
    """Minibatch training with batches drawn from a seeded permutation stream."""
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(net, cfg)
    n = len(x)
    order = rng.permutation(n)
    pos = 0
    for it in range(cfg.iterations):
        if pos + cfg.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = np.sort(order[pos:pos + cfg.batch_size])
        pos += cfg.batch_size
        loss = opt.step(x[idx], y[idx])
        if history is not None:
            history.append(loss)
    return net


def pretrain_then_finetune(arch: Architecture, pretrain, finetune, cfg: TrainConfig,
                           finetune_cfg: TrainConfig | None = None, seed: int = 0) -> Network:
    """Pretrain on ``pretrain = (x, y)`` then fine-tune on ``finetune = (x, y)``.

    All parameters are carried over; the class head is re-initialised only
    when the fine-tuning label count differs from the pretraining one.
    ``pretrain=None`` trains from scratch.  The scheme (whole scenes or
    object crops) is decided by what the caller puts in ``pretrain``.
    """
    x_ft, y_ft = finetune
    if len(x_ft) == 0:
        raise ParameterError("empty fine-tuning set")
    if pretrain is None:
        net = Network(Architecture(**{**asdict(arch), "classes": y_ft.shape[1]}), seed)
    else:
        x_pre, y_pre = pretrain
        if len(x_pre) == 0:
            raise ParameterError("empty pretraining set")
        net = Network(Architecture(**{**asdict(arch), "classes": y_pre.shape[1]}), seed)
        train(net, x_pre, y_pre, cfg)
        if y_pre.shape[1] != y_ft.shape[1]:
            net.reset_head(y_ft.shape[1], seed + 1)
    train(net, x_ft, y_ft, finetune_cfg or cfg)
    return net
