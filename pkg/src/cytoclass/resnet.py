"""Bottleneck residual network in numpy with hand-written backpropagation.

Layout is NHWC throughout. A network is a stem (conv-BN-ReLU) followed by
stages of bottleneck blocks

    1x1 reduce -> BN -> ReLU -> 3x3 (stride) -> BN -> ReLU -> 1x1 expand -> BN
    out = ReLU(branch + shortcut)

where the shortcut is the identity, or a strided 1x1 projection + BN when
the block changes resolution or width. Global average pooling and a linear
head produce class logits. ``stage_blocks=[3, 4, 6, 3]`` with widths
``[256, 512, 1024, 2048]`` is the 50-layer topology.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import AugmentConfig, Normalization, SplitManifest, augment_plane, normalize
from .errors import InvalidConfig, LabelOutOfRange, ShapeMismatch, StaleCache
from .rng import SplitMix64, derive_seed

EXPANSION = 4


@dataclass(frozen=True)
class NetConfig:
    input_side: int = 64
    in_channels: int = 1
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    stage_blocks: tuple = (1, 1, 1)
    stage_channels: tuple = (32, 64, 128)
    n_classes: int = 5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.stage_blocks) != len(self.stage_channels) or not self.stage_blocks:
            raise InvalidConfig("stage_blocks and stage_channels must have the same nonzero length")
        if any(b < 1 for b in self.stage_blocks):
            raise InvalidConfig("every stage needs at least one block")
        if any(c % EXPANSION or c < EXPANSION for c in self.stage_channels):
            raise InvalidConfig(f"stage widths must be positive multiples of {EXPANSION}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig("dtype must be float32 or float64")
        if self.input_side < 1 or self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise InvalidConfig("input_side must be positive and stem_kernel odd")

    def blocks(self):
        """``(prefix, in_ch, mid_ch, out_ch, stride, projected)`` per block."""
        out = []
        cin = self.stem_channels
        for s, (n_blocks, width) in enumerate(zip(self.stage_blocks, self.stage_channels)):
            for b in range(n_blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                proj = stride != 1 or cin != width
                out.append((f"s{s}.b{b}", cin, width // EXPANSION, width, stride, proj))
                cin = width
        return out


def parameter_shapes(cfg: NetConfig) -> dict:
    """Trainable parameter shapes in a fixed order."""
    k = cfg.stem_kernel
    shapes = {
        "stem.conv": (k, k, cfg.in_channels, cfg.stem_channels),
        "stem.bn.gamma": (cfg.stem_channels,),
        "stem.bn.beta": (cfg.stem_channels,),
    }
    for prefix, cin, mid, cout, _stride, proj in cfg.blocks():
        for name, shape, width in (
            ("conv1", (1, 1, cin, mid), mid),
            ("conv2", (3, 3, mid, mid), mid),
            ("conv3", (1, 1, mid, cout), cout),
        ):
            shapes[f"{prefix}.{name}"] = shape
            bn = f"{prefix}.bn{name[-1]}"
            shapes[f"{bn}.gamma"] = (width,)
            shapes[f"{bn}.beta"] = (width,)
        if proj:
            shapes[f"{prefix}.proj"] = (1, 1, cin, cout)
            shapes[f"{prefix}.bnp.gamma"] = (cout,)
            shapes[f"{prefix}.bnp.beta"] = (cout,)
    shapes["head.weight"] = (cfg.stage_channels[-1], cfg.n_classes)
    shapes["head.bias"] = (cfg.n_classes,)
    return shapes


def parameter_count(cfg: NetConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def layer_count(cfg: NetConfig) -> int:
    """Weighted layers on the main path: stem + 3 per block + head."""
    return 1 + 3 * sum(cfg.stage_blocks) + 1


# -- layer primitives -----------------------------------------------------

def conv_forward(x, w, stride):
    kh, kw, cin, cout = w.shape
    if kh == 1 and kw == 1:
        xs = x[:, ::stride, ::stride, :]
        return xs @ w[0, 0], (x.shape, xs, stride)
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    out = (cols @ w.reshape(-1, cout)).reshape(n, ho, wo, cout)
    return out, (xp.shape, cols, stride)


def conv_backward(dout, w, cache):
    kh, kw, cin, cout = w.shape
    in_shape, saved, stride = cache
    if kh == 1 and kw == 1:
        xs = saved
        dw = (xs.reshape(-1, cin).T @ dout.reshape(-1, cout)).reshape(w.shape)
        dx = np.zeros(in_shape, dtype=dout.dtype)
        dx[:, ::stride, ::stride, :] = dout @ w[0, 0].T
        return dx, dw
    cols = saved
    n, ho, wo = dout.shape[:3]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros(in_shape, dtype=dout.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, a, b, :]
    pad = kh // 2
    return dxp[:, pad:in_shape[1] - pad, pad:in_shape[2] - pad, :], dw


def bn_forward(x, gamma, beta, running, train, momentum, eps):
    if train:
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        m = x.size // x.shape[-1]
        running["mean"] = momentum * running["mean"] + (1 - momentum) * mu
        unbiased = var * m / max(m - 1, 1)
        running["var"] = momentum * running["var"] + (1 - momentum) * unbiased
    else:
        mu, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def bn_backward(dy, cache):
    xhat, inv, gamma = cache
    m = dy.size // dy.shape[-1]
    dgamma = np.sum(dy * xhat, axis=(0, 1, 2))
    dbeta = dy.sum(axis=(0, 1, 2))
    dxhat = dy * gamma
    dx = (inv / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * np.sum(dxhat * xhat, axis=(0, 1, 2)))
    return dx, dgamma, dbeta


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    return loss, d / n


# -- network --------------------------------------------------------------

@dataclass
class ForwardCache:
    version: int
    train: bool
    layers: dict


class ResidualNetwork:
    def __init__(self, cfg: NetConfig, params: dict, running: dict,
                 normalization: Normalization | None = None):
        self.cfg = cfg
        self.params = params
        self.running = running
        self.normalization = normalization or Normalization()
        self.version = 0

    def bn_names(self):
        return [n[: -len(".gamma")] for n in self.params if n.endswith(".gamma")]

    def copy(self) -> "ResidualNetwork":
        net = ResidualNetwork(self.cfg, {k: v.copy() for k, v in self.params.items()},
                              copy.deepcopy(self.running), self.normalization)
        return net

    def touch(self):
        """Invalidate outstanding forward caches after a parameter change."""
        self.version += 1

    # forward / backward

    def forward(self, x, train: bool = False):
        cfg = self.cfg
        x = np.asarray(x, dtype=cfg.dtype)
        if x.ndim == 3:
            x = x[..., None]
        if x.shape[1:] != (cfg.input_side, cfg.input_side, cfg.in_channels):
            raise ShapeMismatch(
                f"expected batch of {cfg.input_side}x{cfg.input_side}x{cfg.in_channels}, got {x.shape[1:]}"
            )
        P = self.params
        layers = {}

        def conv_bn(h, conv, bn, stride):
            a, cc = conv_forward(h, P[conv], stride)
            out, bc = bn_forward(a, P[f"{bn}.gamma"], P[f"{bn}.beta"], self.running[bn], train,
                                 cfg.bn_momentum, cfg.bn_eps)
            layers[conv], layers[bn] = cc, bc
            return out

        h = np.maximum(conv_bn(x, "stem.conv", "stem.bn", cfg.stem_stride), 0)
        layers["stem.relu"] = h > 0
        for prefix, _cin, _mid, _cout, stride, proj in cfg.blocks():
            r1 = np.maximum(conv_bn(h, f"{prefix}.conv1", f"{prefix}.bn1", 1), 0)
            r2 = np.maximum(conv_bn(r1, f"{prefix}.conv2", f"{prefix}.bn2", stride), 0)
            branch = conv_bn(r2, f"{prefix}.conv3", f"{prefix}.bn3", 1)
            short = conv_bn(h, f"{prefix}.proj", f"{prefix}.bnp", stride) if proj else h
            h = np.maximum(branch + short, 0)
            layers[f"{prefix}.masks"] = (r1 > 0, r2 > 0, h > 0)
        pooled = h.mean(axis=(1, 2))
        layers["pool"] = (h.shape, pooled)
        logits = pooled @ P["head.weight"] + P["head.bias"]
        return logits, ForwardCache(self.version, train, layers)

    def backward(self, cache: ForwardCache, dlogits) -> dict:
        if cache.version != self.version:
            raise StaleCache("parameters changed since this forward pass")
        if not cache.train:
            raise StaleCache("backward needs a train-mode forward cache")
        cfg, P, L = self.cfg, self.params, cache.layers
        dlogits = np.asarray(dlogits, dtype=cfg.dtype)
        g = {}
        shape, pooled = L["pool"]
        g["head.weight"] = pooled.T @ dlogits
        g["head.bias"] = dlogits.sum(axis=0)
        dpool = dlogits @ P["head.weight"].T
        dh = np.broadcast_to(dpool[:, None, None, :] / (shape[1] * shape[2]), shape).copy()

        def conv_bn_back(dout, conv, bn):
            da, g[f"{bn}.gamma"], g[f"{bn}.beta"] = bn_backward(dout, L[bn])
            dx, g[conv] = conv_backward(da, P[conv], L[conv])
            return dx

        for prefix, _cin, _mid, _cout, _stride, proj in reversed(cfg.blocks()):
            m1, m2, mo = L[f"{prefix}.masks"]
            dsum = dh * mo
            d = conv_bn_back(dsum, f"{prefix}.conv3", f"{prefix}.bn3") * m2
            d = conv_bn_back(d, f"{prefix}.conv2", f"{prefix}.bn2") * m1
            d = conv_bn_back(d, f"{prefix}.conv1", f"{prefix}.bn1")
            if proj:
                d = d + conv_bn_back(dsum, f"{prefix}.proj", f"{prefix}.bnp")
            else:
                d = d + dsum
            dh = d
        dh = dh * L["stem.relu"]
        conv_bn_back(dh, "stem.conv", "stem.bn")
        return {k: g[k] for k in P}

    def logits(self, planes, batch_size: int = 64) -> np.ndarray:
        out = [self.forward(planes[i:i + batch_size], train=False)[0]
               for i in range(0, len(planes), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.cfg.n_classes))

    def predict_scores(self, planes, batch_size: int = 64) -> np.ndarray:
        """Softmax scores for already-normalized planes (eval mode)."""
        return softmax(self.logits(planes, batch_size).astype(np.float64))

    def predict(self, planes) -> np.ndarray:
        return np.argmax(self.predict_scores(planes), axis=1)


def build_network(cfg: NetConfig = NetConfig(), seed: int = 0) -> ResidualNetwork:
    params = {}
    for idx, (name, shape) in enumerate(parameter_shapes(cfg).items()):
        size = int(np.prod(shape))
        if name.endswith(".gamma"):
            zero = name.endswith(".bn3.gamma")  # residual branch starts as zero
            arr = np.zeros(shape) if zero else np.ones(shape)
        elif name.endswith(".beta") or name == "head.bias":
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = np.sqrt(2.0 / fan_in) if name != "head.weight" else np.sqrt(1.0 / fan_in)
            arr = SplitMix64.derived(seed, idx).normal(size, std).reshape(shape)
        params[name] = arr.astype(cfg.dtype)
    running = {
        name[: -len(".gamma")]: {"mean": np.zeros(shape, cfg.dtype), "var": np.ones(shape, cfg.dtype)}
        for name, shape in parameter_shapes(cfg).items() if name.endswith(".gamma")
    }
    return ResidualNetwork(cfg, params, running)


def forward(net: ResidualNetwork, batch, train: bool = False):
    return net.forward(batch, train)


def backward(net: ResidualNetwork, cache: ForwardCache, dlogits) -> dict:
    return net.backward(cache, dlogits)


# -- optimizer ------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.setdefault(name, np.zeros_like(p))
        v = state.second_moment.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# -- training -------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float | None


@dataclass
class TrainResult:
    net: ResidualNetwork
    history: list
    best_epoch: int | None


def train(net: ResidualNetwork, train_planes, train_labels, val_planes=None, val_labels=None,
          augment: AugmentConfig | None = None, epochs: int = 500, batch_size: int = 32,
          seed: int = 0, lr: float = 0.001, record_ids=None, stop_at_val_accuracy: float | None = None,
          log=None) -> TrainResult:
    """Mini-batch Adam training on preprocessed ``[0, 1]`` planes.

    Planes are augmented (when ``augment`` is given) and normalized with
    ``net.normalization`` per batch. Each example's augmentation stream is
    derived from ``(seed, epoch, record_id)``. Returns the parameters of the
    epoch with the best validation accuracy (the last epoch when there is no
    validation data).
    """
    train_planes = np.asarray(train_planes)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    n = len(train_planes)
    if n == 0:
        raise InvalidConfig("training set is empty")
    record_ids = np.arange(n) if record_ids is None else np.asarray(record_ids)
    has_val = val_planes is not None and len(val_planes) > 0
    if has_val:
        val_x = normalize(np.asarray(val_planes), net.normalization)
        val_labels = np.asarray(val_labels, dtype=np.int64)
    state = AdamState(lr=lr)
    history = []
    best = (-1.0, None, None)
    for epoch in range(epochs):
        order = SplitMix64.derived(seed, epoch).permutation(n)
        losses, correct = [], 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = []
            for i in idx:
                plane = train_planes[i]
                if augment is not None:
                    plane = augment_plane(plane, augment, SplitMix64(derive_seed(seed, epoch, int(record_ids[i]))))
                batch.append(normalize(plane, net.normalization))
            logits, cache = net.forward(np.stack(batch), train=True)
            loss, dlogits = softmax_xent(logits.astype(np.float64), train_labels[idx])
            grads = net.backward(cache, dlogits)
            adam_step(net.params, grads, state)
            net.touch()
            losses.append(loss * len(idx))
            correct += int(np.sum(np.argmax(logits, axis=1) == train_labels[idx]))
        val_acc = float(np.mean(net.predict(val_x) == val_labels)) if has_val else None
        m = EpochMetrics(epoch, float(np.sum(losses) / n), correct / n, val_acc)
        history.append(m)
        if log is not None:
            log(m)
        score = val_acc if has_val else float(epoch)
        if score > best[0]:
            best = (score, epoch, net.copy())
        if stop_at_val_accuracy is not None and has_val and val_acc >= stop_at_val_accuracy:
            break
    if best[2] is not None:
        net.params, net.running = best[2].params, best[2].running
        net.touch()
    return TrainResult(net, history, best[1])


def train_from_split(net: ResidualNetwork, split: SplitManifest, planes, augment: AugmentConfig | None,
                     epochs: int, batch_size: int, seed: int, lr: float = 0.001, log=None) -> TrainResult:
    """Train on the train split of ``split``; ``planes`` holds one unaugmented plane per record."""
    tr = split.indices("train")
    va = split.indices("val")
    labels = split.labels
    return train(net, planes[tr], labels[tr], planes[va], labels[va], augment, epochs, batch_size,
                 seed, lr, record_ids=tr, log=log)
