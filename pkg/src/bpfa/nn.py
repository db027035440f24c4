"""Layer-sequential embedding networks with feature-map injection hooks.

A :class:`SegmentedNetwork` is an ordered list of layers ``f_1 ... f_n``. The
feature map at index ``i`` is the output of layer ``i`` (1-based). Attacks
inject a sign step into selected feature maps during the forward pass and
collect the gradients at those same maps during the single backward pass.

All batched arrays carry a leading batch axis. Single images of shape
``net.input_shape`` are accepted and promoted to a batch of one.
"""

import csv
import io
import json
import os
import zipfile

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bpfa.tensor import NonFiniteError, ShapeError, check_finite

MODEL_FORMAT = "bpfa-model"
MODEL_VERSION = 1
HOOKABLE_KINDS = ("conv2d", "batchnorm", "relu")


class ModelFormatError(ValueError):
    """A model file is missing, truncated, corrupt or of the wrong version."""


class HookError(ValueError):
    """Invalid hook set, or a gradient bank that does not fit the network."""


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = None

    def __init__(self, name):
        self.name = name
        self.params = {}

    def config(self):
        return {}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, gy, cache):
        """Return ``(grad_input, {param_name: grad})``."""
        raise NotImplementedError

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({self.name!r}{', ' if cfg else ''}{cfg})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, name, in_channels, out_channels, kernel=3, stride=1, padding="same"):
        super().__init__(name)
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.params = {
            "weight": np.zeros((out_channels, in_channels, kernel, kernel)),
            "bias": np.zeros(out_channels),
        }

    def config(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }

    @property
    def _pad(self):
        return (self.kernel - 1) // 2 if self.padding == "same" else 0

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        p, k, s = self._pad, self.kernel, self.stride
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x, train=False):
        p, k, s = self._pad, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        # (B, C, Ho, Wo, k, k) x (O, C, k, k) -> (B, Ho, Wo, O)
        y = np.tensordot(win, self.params["weight"], axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]
        return np.ascontiguousarray(y), (xp.shape, win)

    def backward(self, gy, cache):
        xp_shape, win = cache
        p, k, s = self._pad, self.kernel, self.stride
        w = self.params["weight"]
        gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = gy.sum(axis=(0, 2, 3))
        gxp = np.zeros(xp_shape)
        ho, wo = gy.shape[2], gy.shape[3]
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))  # (B, Ho, Wo, C)
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else gxp
        return gx, {"weight": gw, "bias": gb}


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, in_features, out_features):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "weight": np.zeros((in_features, out_features)),
            "bias": np.zeros(out_features),
        }

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"{self.name}: expected input ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, train=False):
        return x @ self.params["weight"] + self.params["bias"], x

    def backward(self, gy, cache):
        x = cache
        return gy @ self.params["weight"].T, {"weight": x.T @ gy, "bias": gy.sum(axis=0)}


class BatchNorm(Layer):
    """Per-channel batch normalization.

    Attacks run it with frozen running statistics; ``train=True`` uses batch
    statistics and updates the running averages in place.
    """

    kind = "batchnorm"

    def __init__(self, name, num_features, eps=1e-5, momentum=0.1):
        super().__init__(name)
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.params = {
            "gamma": np.ones(num_features),
            "beta": np.zeros(num_features),
            "running_mean": np.zeros(num_features),
            "running_var": np.ones(num_features),
        }

    trainable = ("gamma", "beta")

    def config(self):
        return {"num_features": self.num_features, "eps": self.eps, "momentum": self.momentum}

    def out_shape(self, in_shape):
        if in_shape[0] != self.num_features:
            raise ShapeError(f"{self.name}: expected {self.num_features} features, got {in_shape[0]}")
        return tuple(in_shape)

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, train=False):
        axes = (0,) + tuple(range(2, x.ndim))
        gamma = self._bcast(self.params["gamma"], x.ndim)
        beta = self._bcast(self.params["beta"], x.ndim)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // x.shape[1]
            m = self.momentum
            self.params["running_mean"] = (1 - m) * self.params["running_mean"] + m * mean
            self.params["running_var"] = (1 - m) * self.params["running_var"] + m * var * n / max(n - 1, 1)
        else:
            mean, var = self.params["running_mean"], self.params["running_var"]
        inv_std = 1.0 / np.sqrt(self._bcast(var, x.ndim) + self.eps)
        xhat = (x - self._bcast(mean, x.ndim)) * inv_std
        return gamma * xhat + beta, (xhat, inv_std, train, axes)

    def backward(self, gy, cache):
        xhat, inv_std, train, axes = cache
        gamma = self._bcast(self.params["gamma"], gy.ndim)
        grads = {"gamma": (gy * xhat).sum(axis=axes), "beta": gy.sum(axis=axes)}
        gxhat = gy * gamma
        if not train:
            return gxhat * inv_std, grads
        n = gy.size // gy.shape[1]
        gx = (inv_std / n) * (
            n * gxhat
            - gxhat.sum(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return gx, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        return x * mask, mask

    def backward(self, gy, cache):
        return gy * cache, {}


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, name, size=2):
        super().__init__(name)
        self.size = size

    def config(self):
        return {"size": self.size}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.size or w % self.size:
            raise ShapeError(f"{self.name}: {h}x{w} not divisible by pool size {self.size}")
        return (c, h // self.size, w // self.size)

    def forward(self, x, train=False):
        b, c, h, w = x.shape
        s = self.size
        return x.reshape(b, c, h // s, s, w // s, s).mean(axis=(3, 5)), x.shape

    def backward(self, gy, cache):
        s = self.size
        gx = np.repeat(np.repeat(gy, s, axis=2), s, axis=3) / (s * s)
        return gx, {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, gy, cache):
        return gy.reshape(cache), {}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, Dense, BatchNorm, ReLU, AvgPool, Flatten)}


def trainable_params(layer):
    names = getattr(layer, "trainable", None)
    return tuple(layer.params) if names is None else names


# ---------------------------------------------------------------------------
# networks


class SegmentedNetwork:
    """Composition ``F = f_1 o ... o f_n`` over images in pixel units.

    Inputs are mapped by ``(x - input_offset) * input_scale`` before ``f_1``;
    the defaults send pixel values [0, 255] to [-1, 1]. ``input_offset`` may be
    a per-pixel mean image of shape ``input_shape``.
    ``activation_scales`` maps layer index to a typical activation magnitude;
    attacks use it to express feature-map step sizes in relative units.
    """

    def __init__(self, layers, input_shape, input_scale=1.0 / 127.5, input_offset=127.5, name="net"):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        if not layers:
            raise ValueError("a network needs at least one layer")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.input_scale = float(input_scale)
        self.input_offset = input_offset if np.ndim(input_offset) == 0 else np.asarray(input_offset, dtype=np.float64)
        self.name = name
        self.activation_scales = {}
        self.metadata = {}
        self.shapes = self._infer_shapes()
        if len(self.shapes[-1]) != 1:
            raise ShapeError(f"network output must be a vector, got shape {self.shapes[-1]}")

    def _infer_shapes(self):
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
            shapes.append(shape)
        return shapes

    @property
    def n(self):
        return len(self.layers)

    @property
    def embedding_dim(self):
        return self.shapes[-1][0]

    def layer(self, index):
        return self.layers[index - 1]

    def feature_shape(self, index):
        return self.shapes[index - 1]

    def indices_of_kind(self, kind):
        return [i for i, layer in enumerate(self.layers, start=1) if layer.kind == kind]

    def activation_scale(self, index):
        return self.activation_scales.get(index, 1.0)

    def param_bytes(self):
        return sum(p.nbytes for layer in self.layers for p in layer.params.values())

    def __call__(self, x):
        return forward_plain(self, x)

    def __repr__(self):
        return f"SegmentedNetwork({self.name!r}, n={self.n}, input={self.input_shape}, dim={self.embedding_dim})"


class HookSet:
    """Ordered, strictly increasing layer indices eligible for injection."""

    def __init__(self, indices=()):
        self.indices = tuple(int(i) for i in indices)
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise HookError(f"hook indices must be strictly increasing: {self.indices}")

    @classmethod
    def of_kind(cls, net, kind):
        if kind not in HOOKABLE_KINDS:
            raise HookError(f"layer kind {kind!r} is not hookable")
        return cls(net.indices_of_kind(kind))

    @classmethod
    def default(cls, net):
        """Conv outputs when the network has any, ReLU outputs otherwise."""
        conv = net.indices_of_kind("conv2d")
        return cls(conv) if conv else cls(net.indices_of_kind("relu"))

    def validate(self, net):
        for i in self.indices:
            if not 1 <= i <= net.n:
                raise HookError(f"hook index {i} outside [1, {net.n}]")
            if net.layer(i).kind not in HOOKABLE_KINDS:
                raise HookError(f"layer {i} ({net.layer(i).kind}) is not hookable")
        return self

    @property
    def theta(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __len__(self):
        return len(self.indices)

    def __contains__(self, i):
        return i in self.indices

    def __eq__(self, other):
        return isinstance(other, HookSet) and self.indices == other.indices

    def __repr__(self):
        return f"HookSet({list(self.indices)})"


class GradientBank:
    """Feature-map gradients recorded by one backward pass.

    Raw gradients are stored; the sign is taken when they are injected.
    ``uses`` counts how many injected forwards consumed this bank.
    """

    def __init__(self, grads=None, iteration_tag=0):
        self.grads = dict(grads or {})
        self.iteration_tag = iteration_tag
        self.uses = 0

    def __len__(self):
        return len(self.grads)

    def __contains__(self, index):
        return index in self.grads

    def __getitem__(self, index):
        return self.grads[index]

    @property
    def empty(self):
        return not self.grads

    @property
    def nbytes(self):
        return sum(g.nbytes for g in self.grads.values())

    def __repr__(self):
        return f"GradientBank(tag={self.iteration_tag}, indices={sorted(self.grads)}, bytes={self.nbytes})"


class ForwardTrace:
    """Post-injection activations at hooked indices plus the embedding."""

    def __init__(self, net, activations, embedding, caches, masks, batched, inject_first=False):
        self.activations = activations
        self.embedding = embedding
        self._net_id = id(net)
        self._caches = caches
        self._masks = masks
        self._batched = batched
        self._inject_first = inject_first


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], False
    if x.shape[1:] == net.input_shape:
        return x, True
    raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")


def _step_for(eta, index):
    return eta.get(index, 0.0) if isinstance(eta, dict) else float(eta)


def _run(net, x, hooks, bank, eta, masks, train, inject_first=False):
    xb, batched = _as_batch(net, x)
    check_finite(xb, "network input")
    hooks = hooks if hooks is not None else HookSet()
    masks = masks or {}
    if bank is not None and not bank.empty:
        bank.uses += 1
    h = (xb - net.input_offset) * net.input_scale
    activations, caches = {}, []
    for i, layer in enumerate(net.layers, start=1):
        h, cache = layer.forward(h, train=train)
        caches.append(cache)
        if i in masks and not inject_first:
            h = h * masks[i]
        if i in hooks:
            if bank is not None and i in bank:
                g = bank[i] if batched else bank[i][None]
                if g.shape != h.shape:
                    raise HookError(
                        f"bank gradient at layer {i} has shape {g.shape}, feature map has {h.shape}"
                    )
                step = _step_for(eta, i)
                if step != 0.0:
                    h = h + step * np.sign(g)
            activations[i] = h
        if i in masks and inject_first:
            h = h * masks[i]
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("network produced a non-finite embedding")
    emb = h if batched else h[0]
    acts = activations if batched else {i: a[0] for i, a in activations.items()}
    return ForwardTrace(net, acts, emb, caches, masks, batched, inject_first)


def forward_plain(net, x):
    """Embedding ``F(x)``; no hooks, no injection."""
    return _run(net, x, None, None, 0.0, None, False).embedding


def forward_segment(net, h, start, stop):
    """Apply layers ``start..stop`` (1-based, inclusive) to an internal feature map.

    ``start == 1`` expects pixel-unit images and applies the input mapping.
    """
    h = np.asarray(h, dtype=np.float64)
    if start == 1:
        h = (h - net.input_offset) * net.input_scale
    for layer in net.layers[start - 1:stop]:
        h, _ = layer.forward(h)
    return h


def forward_injected(net, x, hooks, bank, eta, masks=None, train=False, inject_first=False):
    """Forward pass that perturbs hooked feature maps with ``eta * sign(bank)``.

    ``eta`` is a scalar or a mapping ``{layer index: step}``. Positive steps
    raise the loss (beneficial perturbation), negative steps lower it. Indices
    without a bank entry are left alone, so an empty bank reproduces
    :func:`forward_plain` exactly. ``masks`` maps layer index to a
    multiplicative dropout mask; it applies before any injection at that
    index, or after it when ``inject_first`` is set.
    """
    hooks = hooks.validate(net) if hooks is not None else HookSet()
    if bank is not None:
        extra = set(bank.grads) - set(hooks.indices)
        if extra:
            raise HookError(f"bank has entries for unhooked layers {sorted(extra)}")
    return _run(net, x, hooks, bank, eta, masks, train, inject_first)


def backward(net, trace, loss_grad, hooks=None, with_params=False, iteration_tag=0):
    """Backpropagate ``dL/d embedding`` through ``net``.

    Returns ``(input_grad, bank)`` where ``bank`` holds ``dL/d omega_i`` at every
    hooked index, taken at the post-injection activations. With
    ``with_params=True`` a third item maps ``(layer name, param)`` to its
    gradient.
    """
    if trace._net_id != id(net) or len(trace._caches) != net.n:
        raise HookError("trace was not produced by this network")
    hooks = hooks if hooks is not None else HookSet()
    g = np.asarray(loss_grad, dtype=np.float64)
    if not trace._batched:
        g = g[None]
    if g.shape[1:] != (net.embedding_dim,):
        raise ShapeError(f"loss gradient shape {g.shape} does not match embedding dim {net.embedding_dim}")
    recorded, pgrads = {}, {}
    masks, first = trace._masks, trace._inject_first
    for i in range(net.n, 0, -1):
        if i in masks and first:
            g = g * masks[i]
        if i in hooks:
            recorded[i] = g if trace._batched else g[0]
        if i in masks and not first:
            g = g * masks[i]
        layer = net.layers[i - 1]
        g, grads = layer.backward(g, trace._caches[i - 1])
        if with_params:
            for pname in trainable_params(layer):
                pgrads[(layer.name, pname)] = grads[pname]
    g = g * net.input_scale
    input_grad = g if trace._batched else g[0]
    check_finite(input_grad, "input gradient")
    bank = GradientBank({i: recorded[i] for i in hooks}, iteration_tag=iteration_tag)
    if with_params:
        return input_grad, bank, pgrads
    return input_grad, bank


def bank_bytes_for(net, hooks, batch=1):
    """Closed-form bank size: sum of feature-map element counts times 8 bytes."""
    return sum(int(np.prod(net.feature_shape(i))) for i in hooks) * 8 * batch


# ---------------------------------------------------------------------------
# persistence


def _manifest(net):
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "name": net.name,
        "input_shape": list(net.input_shape),
        "input_scale": net.input_scale,
        "input_offset": float(net.input_offset) if np.ndim(net.input_offset) == 0 else None,
        "embedding_dim": net.embedding_dim,
        "activation_scales": {str(k): v for k, v in net.activation_scales.items()},
        "metadata": net.metadata,
        "layers": [
            {
                "kind": layer.kind,
                "name": layer.name,
                "config": layer.config(),
                "params": {k: list(v.shape) for k, v in layer.params.items()},
            }
            for layer in net.layers
        ],
    }


def save_model(net, path):
    arrays = {f"{layer.name}/{k}": v for layer in net.layers for k, v in layer.params.items()}
    if np.ndim(net.input_offset):
        arrays["__input_offset__"] = net.input_offset
    header = np.frombuffer(json.dumps(_manifest(net), sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=header, **arrays)


def load_model(path):
    if os.path.getsize(path) == 0:
        raise ModelFormatError(f"{path}: empty file")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise ModelFormatError(f"{path}: unreadable model container ({exc})") from exc
    if "__manifest__" not in arrays:
        raise ModelFormatError(f"{path}: missing manifest")
    try:
        manifest = json.loads(arrays.pop("__manifest__").tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt manifest") from exc
    if manifest.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: not a {MODEL_FORMAT} file")
    if manifest.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {manifest.get('version')}")
    offset = manifest.get("input_offset")
    if offset is None:
        if "__input_offset__" not in arrays:
            raise ModelFormatError(f"{path}: missing input offset image")
        offset = np.array(arrays.pop("__input_offset__"), dtype=np.float64)
    layers = []
    for spec in manifest["layers"]:
        cls = LAYER_KINDS.get(spec["kind"])
        if cls is None:
            raise ModelFormatError(f"{path}: unknown layer kind {spec['kind']!r}")
        layer = cls(spec["name"], **spec["config"])
        for pname, shape in spec["params"].items():
            key = f"{spec['name']}/{pname}"
            if key not in arrays:
                raise ModelFormatError(f"{path}: missing weights {key}")
            arr = arrays.pop(key)
            if list(arr.shape) != shape or pname not in layer.params or arr.shape != layer.params[pname].shape:
                raise ModelFormatError(f"{path}: weights {key} disagree with manifest")
            layer.params[pname] = np.array(arr, dtype=np.float64)
        layers.append(layer)
    if arrays:
        raise ModelFormatError(f"{path}: unexpected weight blobs {sorted(arrays)}")
    net = SegmentedNetwork(
        layers, manifest["input_shape"], manifest["input_scale"], offset, manifest["name"]
    )
    if net.embedding_dim != manifest["embedding_dim"]:
        raise ModelFormatError(f"{path}: embedding dim disagrees with manifest")
    net.activation_scales = {int(k): v for k, v in manifest["activation_scales"].items()}
    net.metadata = manifest["metadata"]
    return net


def dump_feature_perturbation(bank, index, eta, path, sample=0):
    """Write ``eta * sign(grad)`` at layer ``index`` as one CSV grid per channel.

    ``path`` is a directory; files are named ``channel_000.csv`` and so on.
    Vector feature maps produce a single one-row grid. Returns the file paths.
    """
    if index not in bank:
        raise HookError(f"layer {index} not present in bank")
    g = bank[index]
    if g.ndim in (2, 4):
        g = g[sample]
    pert = float(eta) * np.sign(g)
    if pert.ndim == 1:
        channels = [pert[None, :]]
    else:
        channels = list(pert)
    os.makedirs(path, exist_ok=True)
    out = []
    for c, grid in enumerate(channels):
        fname = os.path.join(path, f"channel_{c:03d}.csv")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in np.atleast_2d(grid):
            writer.writerow(repr(float(v)) for v in row)
        with open(fname, "w") as fh:
            fh.write(buf.getvalue())
        out.append(fname)
    return out


def read_grid(path):
    with open(path) as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
