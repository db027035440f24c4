"""Training of the toy face-embedding zoo and verification threshold calibration.

Embeddings are trained with a cosine-softmax identity classifier (CosFace
style margin) whose weight-normalized head is discarded after training. The
robust variant augments every batch with FIM dodging examples crafted on the
current weights.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from bpfa.attacks import AttackConfig, craft, embedding_distance
from bpfa.data import negative_pair_indices
from bpfa.nn import (
    AvgPool,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    ReLU,
    SegmentedNetwork,
    backward,
    forward_injected,
    forward_plain,
    trainable_params,
)
from bpfa.tensor import l2_normalize, l2_normalize_backward

log = logging.getLogger(__name__)

ARCHITECTURES = ("A", "B", "C", "D")
DISTANCE_METRIC = "sq_euclidean_normalized"


class TrainingError(RuntimeError):
    pass


def build_architecture(arch, input_shape=(1, 16, 16), embedding_dim=64, seed=0):
    """A: shallow wide MLP, B: deep narrow MLP, C: small conv net, D: deeper conv net with batchnorm."""
    c, h, w = input_shape
    flat = c * h * w
    if arch == "A":
        layers = [Flatten("flatten"), Dense("fc1", flat, 384), ReLU("relu1"), Dense("embed", 384, embedding_dim)]
    elif arch == "B":
        layers = [
            Flatten("flatten"),
            Dense("fc1", flat, 96), ReLU("relu1"),
            Dense("fc2", 96, 96), ReLU("relu2"),
            Dense("fc3", 96, 96), ReLU("relu3"),
            Dense("embed", 96, embedding_dim),
        ]
    elif arch == "C":
        fh, fw = h // 4, w // 4
        layers = [
            Conv2d("conv1", c, 8), ReLU("relu1"), AvgPool("pool1"),
            Conv2d("conv2", 8, 16), ReLU("relu2"), AvgPool("pool2"),
            Flatten("flatten"),
            Dense("fc1", 16 * fh * fw, 256), ReLU("relu3"),
            Dense("embed", 256, embedding_dim),
        ]
    elif arch == "D":
        fh, fw = h // 4, w // 4
        layers = [
            Conv2d("conv1", c, 8), BatchNorm("bn1", 8), ReLU("relu1"),
            Conv2d("conv2", 8, 8), BatchNorm("bn2", 8), ReLU("relu2"), AvgPool("pool1"),
            Conv2d("conv3", 8, 16), BatchNorm("bn3", 16), ReLU("relu3"), AvgPool("pool2"),
            Flatten("flatten"),
            Dense("fc1", 16 * fh * fw, 256), ReLU("relu4"),
            Dense("embed", 256, embedding_dim),
        ]
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    rng = np.random.default_rng([int(seed), ord(arch)])
    for layer in layers:
        if isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel ** 2
            layer.params["weight"] = rng.standard_normal(layer.params["weight"].shape) * np.sqrt(2.0 / fan_in)
        elif isinstance(layer, Dense):
            gain = 1.0 if layer.name == "embed" else 2.0
            layer.params["weight"] = rng.standard_normal(layer.params["weight"].shape) * np.sqrt(gain / layer.in_features)
    net = SegmentedNetwork(layers, input_shape, name=arch)
    net.metadata["architecture"] = arch
    return net


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "C"
    epochs: int = 30
    lr: float = 0.02
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    embedding_dim: int = 64
    scale: float = 16.0
    margin: float = 0.2
    holdout_per_identity: int = 5
    accuracy_floor: float = 0.95
    adversarial_training: bool = False
    adv_epsilon: float = 10.0
    adv_steps: int = 5
    adv_beta: float = None
    warmup_epochs: int = 3

    def __post_init__(self):
        if self.epochs <= 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, lr and batch_size must be positive")
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"arch must be one of {ARCHITECTURES}")
        if self.adversarial_training and (self.adv_epsilon is None or self.adv_steps is None):
            raise ValueError("adversarial training needs adv_epsilon and adv_steps")


@dataclass
class TrainResult:
    net: SegmentedNetwork
    log: list = field(default_factory=list)
    heldout_accuracy: float = None


def _cosface(emb, head, labels, scale, margin):
    """Loss and gradients of the additive-margin cosine softmax."""
    e = l2_normalize(emb)
    w = l2_normalize(head, axis=0)
    cos = e @ w
    n = len(labels)
    logits = scale * cos
    logits[np.arange(n), labels] -= scale * margin
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    dlogits = p
    dlogits[np.arange(n), labels] -= 1.0
    dcos = scale * dlogits / n
    de = l2_normalize_backward(emb, dcos @ w.T)
    dw = l2_normalize_backward(head, e.T @ dcos, axis=0)
    correct = float(np.mean(np.argmax(cos, axis=1) == labels))
    return loss, de, dw, correct


def _adversarial_batch(net, xb, cfg):
    beta = cfg.adv_beta if cfg.adv_beta is not None else max(1.0, 2.5 * cfg.adv_epsilon / cfg.adv_steps)
    acfg = AttackConfig(epsilon=cfg.adv_epsilon, beta=beta, n_max=cfg.adv_steps, mode="dodging")
    ref = forward_plain(net, xb)
    return craft(net, xb, ref, acfg).x_adv


def fit(ds, cfg, indices=None):
    """Train one embedding network; returns a :class:`TrainResult`."""
    if len(np.unique(ds.labels)) < 2:
        raise TrainingError("training needs at least two identities")
    train_idx, held_idx = ds.split(cfg.holdout_per_identity) if indices is None else (indices, np.array([], int))
    if len(np.unique(ds.labels[train_idx])) < 2:
        raise TrainingError("training split has fewer than two identities")
    net = build_architecture(cfg.arch, ds.params.image_shape, cfg.embedding_dim, cfg.seed)
    net.name = cfg.arch + ("-robust" if cfg.adversarial_training else "")
    train_images = ds.images[train_idx]
    net.input_offset = train_images.mean(axis=0)
    net.input_scale = float(1.0 / (train_images - net.input_offset).std())
    classes, y_all = np.unique(ds.labels[train_idx], return_inverse=True)
    rng = np.random.default_rng([int(cfg.seed), 7919])
    head = rng.standard_normal((cfg.embedding_dim, len(classes))) * 0.01
    velocity = {}
    steps_per_epoch = int(np.ceil(len(train_idx) / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    adversarial = cfg.adversarial_training and cfg.adv_steps > 0
    rows, step = [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_idx))
        for b in range(steps_per_epoch):
            sel = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb = ds.images[train_idx[sel]]
            yb = y_all[sel]
            if adversarial:
                xb = np.concatenate([xb, _adversarial_batch(net, xb, cfg)])
                yb = np.concatenate([yb, yb])
            trace = forward_injected(net, xb, None, None, 0.0, train=True)
            loss, de, dhead, acc = _cosface(trace.embedding, head, yb, cfg.scale, cfg.margin)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at step {step}")
            _, _, pgrads = backward(net, trace, de, with_params=True)
            lr = cfg.lr * (0.1 ** (int(step >= 0.6 * total) + int(step >= 0.85 * total)))
            warm = cfg.warmup_epochs * steps_per_epoch
            if step < warm:
                lr *= (step + 1) / warm
            _sgd(net, head, pgrads, dhead, velocity, lr, cfg)
            rows.append({"step": step, "loss": float(loss), "accuracy": acc})
            step += 1
        log.debug("epoch %d loss %.4f acc %.3f", epoch, rows[-1]["loss"], rows[-1]["accuracy"])
    set_activation_scales(net, ds.images[train_idx])
    result = TrainResult(net, rows)
    if len(held_idx):
        result.heldout_accuracy = verification_accuracy(net, ds, held_idx)
        net.metadata["heldout_accuracy"] = result.heldout_accuracy
        if result.heldout_accuracy < cfg.accuracy_floor:
            raise TrainingError(
                f"{net.name}: held-out pair accuracy {result.heldout_accuracy:.3f} "
                f"below floor {cfg.accuracy_floor} (final loss {rows[-1]['loss']:.4f})"
            )
    net.metadata["train_config"] = asdict(cfg)
    return result


def _sgd(net, head, pgrads, dhead, velocity, lr, cfg):
    for layer in net.layers:
        for pname in trainable_params(layer):
            key = (layer.name, pname)
            p = layer.params[pname]
            g = pgrads[key] + cfg.weight_decay * p
            v = velocity.get(key)
            v = g if v is None else cfg.momentum * v + g
            velocity[key] = v
            layer.params[pname] = p - lr * v
    v = velocity.get("head")
    v = dhead if v is None else cfg.momentum * v + dhead
    velocity["head"] = v
    head -= lr * v


def train(ds, cfg):
    return fit(ds, cfg).net


def adversarial_train(ds, cfg):
    if not cfg.adversarial_training:
        raise ValueError("adversarial_train needs cfg.adversarial_training=True")
    return fit(ds, cfg).net


def set_activation_scales(net, images):
    """Record the RMS activation of every layer over ``images``."""
    h = (np.asarray(images, dtype=np.float64) - net.input_offset) * net.input_scale
    for i, layer in enumerate(net.layers, start=1):
        h, _ = layer.forward(h)
        net.activation_scales[i] = float(np.sqrt(np.mean(h * h)))
    return net.activation_scales


def embed_all(net, images, batch=512):
    return np.concatenate([forward_plain(net, images[i:i + batch]) for i in range(0, len(images), batch)])


def verification_accuracy(net, ds, indices):
    """Balanced pair accuracy at the equal-error-rate threshold over all pairs in ``indices``."""
    emb = embed_all(net, ds.images[indices])
    labels = ds.labels[indices]
    i, j = np.triu_indices(len(indices), k=1)
    d = embedding_distance(emb[i], emb[j])
    same = labels[i] == labels[j]
    pos, neg = np.sort(d[same]), np.sort(d[~same])
    cand = np.concatenate([pos, neg])
    frr = 1.0 - np.searchsorted(pos, cand, side="left") / len(pos)
    far = np.searchsorted(neg, cand, side="left") / len(neg)
    k = int(np.argmin(np.abs(frr - far)))
    return float(1.0 - (frr[k] + far[k]) / 2.0)


# ---------------------------------------------------------------------------
# thresholds


@dataclass(frozen=True)
class Threshold:
    value: float
    far_target: float
    metric: str = DISTANCE_METRIC
    achieved_far: float = None
    n_negatives: int = None

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


def negative_distances(net, ds):
    emb = embed_all(net, ds.images)
    i, j = negative_pair_indices(ds.labels)
    return embedding_distance(emb[i], emb[j])


def threshold_from_distances(dist, far_target):
    """Distance ``t`` with ``mean(dist < t)`` as close as possible to ``far_target``.

    The threshold sits midway between the k-th and (k+1)-th smallest
    distances, ``k = round(far_target * N)``. ``far_target`` must lie in
    (0, 1] and ``N >= 1 / far_target``.
    """
    if not 0 < far_target <= 1:
        raise ValueError("far_target must lie in (0, 1]")
    d = np.sort(np.asarray(dist, dtype=np.float64))
    n = len(d)
    if n == 0 or n < 1.0 / far_target:
        raise ValueError(f"need at least {int(np.ceil(1 / far_target))} negative pairs, have {n}")
    k = int(round(far_target * n))
    if k >= n:
        t = float(np.nextafter(d[-1], np.inf))
    elif k == 0:
        t = float(d[0])
    else:
        t = float((d[k - 1] + d[k]) / 2.0)
    return t, float(np.mean(d < t))


def calibrate_threshold(net, ds, far_target, metric=DISTANCE_METRIC):
    if metric != DISTANCE_METRIC:
        raise ValueError(f"unsupported metric {metric!r}")
    dist = negative_distances(net, ds)
    t, achieved = threshold_from_distances(dist, far_target)
    return Threshold(t, far_target, metric, achieved, int(len(dist)))


def write_train_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "accuracy"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
