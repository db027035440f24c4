"""Embedding-level attacks on face-embedding networks.

The engine runs the iterative sign-gradient attack (FIM) over a batch of
attacker images and layers optional augmentations on top:

* MI: L1-normalized momentum accumulation of the input gradient.
* DI: random shrink-and-pad of the input with probability ``di_prob``.
* DFANet: dropout on convolutional feature maps during the forward pass.
* BPFA: the feature-map gradients of the previous iteration are turned into
  ``+eta * sign(grad)`` perturbations injected into the hooked feature maps of
  the next forward pass. Each recorded bank feeds exactly one forward pass
  and is then replaced. ``eta < 0`` gives the adversarial variant (APFA).

Each sample owns its random generator, so a pair draws identical DI and
dropout randomness whichever other pairs share its batch and whichever
feature-map step is used.
"""

import copy
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from bpfa.nn import (
    HookSet,
    GradientBank,
    backward,
    bank_bytes_for,
    forward_injected,
    forward_plain,
)
from bpfa.tensor import l2_normalize, l2_normalize_backward

MODES = ("impersonation", "dodging")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 10.0
    beta: float = 1.0
    n_max: int = 100
    mode: str = "impersonation"
    eta: float = 0.0
    # eta is multiplied by each hooked layer's activation scale when True
    eta_relative: bool = True
    # None: default hook set; a layer kind name; or explicit 1-based indices
    hooks: object = None
    mi: bool = False
    mi_decay: float = 1.0
    di: bool = False
    di_prob: float = 0.5
    di_min_scale: float = 0.8
    dfanet: bool = False
    drop_rate: float = 0.1
    # where dropout and injection share a layer: False drops first, True injects first
    inject_before_dropout: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.drop_rate < 1:
            raise ValueError("drop_rate must lie in [0, 1)")
        if not 0 <= self.di_prob <= 1:
            raise ValueError("di_prob must lie in [0, 1]")
        if isinstance(self.hooks, list):
            object.__setattr__(self, "hooks", tuple(self.hooks))

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "FIM": {},
    "MI": {"mi": True},
    "DI": {"di": True},
    "DFANet": {"dfanet": True},
    "FMD": {"mi": True, "di": True},
    "FMDN": {"mi": True, "di": True, "dfanet": True},
}


def preset(name, **overrides):
    """Build a config from a baseline name, optionally suffixed with ``+BPFA``.

    ``+BPFA`` variants take ``eta`` from ``overrides``; the baseline names
    force ``eta=0``.
    """
    base, _, extra = name.partition("+")
    if base not in PRESETS or extra not in ("", "BPFA", "APFA"):
        raise KeyError(f"unknown attack preset {name!r}")
    opts = dict(PRESETS[base])
    opts.update(overrides)
    if not extra:
        opts["eta"] = 0.0
    elif extra == "APFA":
        opts["eta"] = -abs(opts.get("eta", 0.0))
    return AttackConfig(**opts)


def resolve_hooks(cfg, net):
    if cfg.hooks is None:
        return HookSet.default(net).validate(net)
    if isinstance(cfg.hooks, str):
        return HookSet.of_kind(net, cfg.hooks).validate(net)
    return HookSet(cfg.hooks).validate(net)


def feature_steps(cfg, net, hooks):
    """Per-hook injection step in feature units."""
    if not cfg.eta_relative:
        return {i: float(cfg.eta) for i in hooks}
    return {i: float(cfg.eta) * net.activation_scale(i) for i in hooks}


def dropout_sites(net):
    """Layers whose outputs DFANet drops: conv outputs, or hidden dense outputs in conv-free nets."""
    conv = net.indices_of_kind("conv2d")
    if conv:
        return conv
    return net.indices_of_kind("dense")[:-1]


def bank_bytes(cfg, net):
    return bank_bytes_for(net, resolve_hooks(cfg, net))


# ---------------------------------------------------------------------------
# losses


def _loss(net_out, ref_emb, sign):
    net_out = np.asarray(net_out, dtype=np.float64)
    ref_emb = np.asarray(ref_emb, dtype=np.float64)
    if net_out.shape != ref_emb.shape:
        raise ValueError(f"embedding shapes differ: {net_out.shape} vs {ref_emb.shape}")
    diff = l2_normalize(net_out) - l2_normalize(ref_emb)
    value = sign * np.sum(diff * diff, axis=-1)
    grad = l2_normalize_backward(net_out, sign * 2.0 * diff)
    return value, grad


def loss_impersonation(net_out, target_emb):
    """Squared distance between normalized embeddings, and its gradient wrt ``net_out``."""
    return _loss(net_out, target_emb, 1.0)


def loss_dodging(net_out, source_emb):
    return _loss(net_out, source_emb, -1.0)


LOSSES = {"impersonation": loss_impersonation, "dodging": loss_dodging}


def embedding_distance(a, b):
    """Squared Euclidean distance between L2-normalized embeddings (row-wise)."""
    d = l2_normalize(a) - l2_normalize(b)
    return np.sum(d * d, axis=-1)


# ---------------------------------------------------------------------------
# augmentations


def _di_draw(shape, p, rng, min_scale):
    """Draw one DI transform as index maps, or None for identity."""
    if p <= 0 or rng.random() >= p:
        return None
    _, h, w = shape
    lo = max(1, int(np.ceil(min_scale * min(h, w))))
    size = int(rng.integers(lo, min(h, w) + 1))
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return rows, cols, top, left, size


def _di_apply(x, draw):
    if draw is None:
        return x
    rows, cols, top, left, size = draw
    out = np.zeros_like(x)
    out[:, top:top + size, left:left + size] = x[:, rows[:, None], cols[None, :]]
    return out


def _di_backward(g, draw):
    if draw is None:
        return g
    rows, cols, top, left, size = draw
    gx = np.zeros_like(g)
    patch = g[:, top:top + size, left:left + size]
    np.add.at(gx, (slice(None), rows[:, None], cols[None, :]), patch)
    return gx


def di_transform(x, p, rng, min_scale=0.8):
    """Random nearest-neighbour shrink then zero-pad back to the input shape.

    Applied with probability ``p``; otherwise ``x`` is returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    return _di_apply(x, _di_draw(x.shape, p, rng, min_scale))


def dropout_mask(shape, drop_rate, rng):
    if drop_rate == 0:
        return np.ones(shape)
    return (rng.random(shape) >= drop_rate) / (1.0 - drop_rate)


def dfanet_dropout(activation, drop_rate, rng):
    """Inverted dropout: zero each element with probability ``drop_rate``, rescale the rest."""
    if not 0 <= drop_rate < 1:
        raise ValueError("drop_rate must lie in [0, 1)")
    activation = np.asarray(activation, dtype=np.float64)
    if drop_rate == 0:
        return activation.copy()
    return activation * dropout_mask(activation.shape, drop_rate, rng)


# ---------------------------------------------------------------------------
# engine


@dataclass
class AttackState:
    x_adv: np.ndarray
    bank: GradientBank
    momentum: np.ndarray
    t: int
    rngs: list
    loss: np.ndarray = None
    plain_loss: np.ndarray = None
    used_bank_tags: list = field(default_factory=list)


def sample_rngs(seed, n, offset=0):
    """One generator per sample, keyed by ``(seed, sample index)``."""
    return [np.random.default_rng([int(seed), offset + i]) for i in range(n)]


def init_state(x_src, seeds=None, cfg=None):
    x_src = np.asarray(x_src, dtype=np.float64)
    if seeds is None:
        rngs = sample_rngs(cfg.seed if cfg else 0, len(x_src))
    else:
        rngs = [np.random.default_rng(s) for s in seeds]
    return AttackState(x_src.copy(), GradientBank(), np.zeros_like(x_src), 1, rngs)


def attack_step(net, state, cfg, x_src, ref_emb, record_plain=False):
    """One iteration of the attack over a batch; returns the next state.

    ``x_src`` and ``ref_emb`` are batched. ``ref_emb`` is the clean surrogate
    embedding of the target (impersonation) or source (dodging) images.
    """
    hooks = resolve_hooks(cfg, net)
    batch = len(state.x_adv)
    shape = net.input_shape

    draws = [_di_draw(shape, cfg.di_prob, r, cfg.di_min_scale) for r in state.rngs] if cfg.di else [None] * batch
    x_in = np.stack([_di_apply(x, d) for x, d in zip(state.x_adv, draws)]) if cfg.di else state.x_adv

    masks = None
    if cfg.dfanet:
        masks = {
            i: np.stack([dropout_mask(net.feature_shape(i), cfg.drop_rate, r) for r in state.rngs])
            for i in dropout_sites(net)
        }

    bank = state.bank if state.t != 1 else GradientBank()
    if not bank.empty:
        state.used_bank_tags.append(bank.iteration_tag)
    steps = feature_steps(cfg, net, hooks)
    trace = forward_injected(net, x_in, hooks, bank, steps, masks=masks, inject_first=cfg.inject_before_dropout)
    loss, grad_emb = LOSSES[cfg.mode](trace.embedding, ref_emb)
    g_in, new_bank = backward(net, trace, grad_emb, hooks, iteration_tag=state.t)

    plain_loss = None
    if record_plain:
        plain = forward_injected(net, x_in, hooks, None, 0.0, masks=masks)
        plain_loss, _ = LOSSES[cfg.mode](plain.embedding, ref_emb)

    g = np.stack([_di_backward(gi, d) for gi, d in zip(g_in, draws)]) if cfg.di else g_in.copy()
    # A stationary start (dodging against the clean source embedding) has an
    # exactly zero gradient; step in a random sign direction instead.
    for i in np.flatnonzero(~np.any(g.reshape(batch, -1) != 0, axis=1)):
        g[i] = state.rngs[i].choice([-1.0, 1.0], size=shape)
    momentum = state.momentum
    if cfg.mi:
        l1 = np.abs(g).reshape(batch, -1).sum(axis=1).reshape((batch,) + (1,) * len(shape))
        momentum = cfg.mi_decay * momentum + g / np.where(l1 > 0, l1, 1.0)
        g = momentum

    x_new = state.x_adv - cfg.beta * np.sign(g)
    lo, hi = box_bounds(x_src, cfg.epsilon)
    x_new = np.minimum(np.maximum(x_new, lo), hi)

    return AttackState(
        x_new, new_bank, momentum, state.t + 1, state.rngs, loss, plain_loss, state.used_bank_tags
    )


@dataclass
class AttackResult:
    x_adv: np.ndarray
    losses: np.ndarray  # (n_max, batch) injected loss per iteration
    plain_losses: np.ndarray  # (n_max, batch), NaN where not recorded
    bank_bytes: list
    used_bank_tags: list

    def log_rows(self):
        """Trajectory rows ``(t, mean loss, bank bytes)``."""
        return [
            {"t": t + 1, "loss": float(self.losses[t].mean()), "bank_bytes": self.bank_bytes[t]}
            for t in range(len(self.losses))
        ]


def box_bounds(x_src, epsilon):
    """Per-pixel bounds of the epsilon box intersected with [0, 255].

    ``x + eps`` can round up, so bounds are pulled in by one ulp wherever
    ``|bound - x|`` would otherwise evaluate above ``eps``.
    """
    lo = x_src - epsilon
    lo = np.where(x_src - lo > epsilon, np.nextafter(lo, np.inf), lo)
    hi = x_src + epsilon
    hi = np.where(hi - x_src > epsilon, np.nextafter(hi, -np.inf), hi)
    return np.maximum(lo, 0.0), np.minimum(hi, 255.0)


def craft(net, x_src, ref_emb, cfg, seeds=None, record_plain=False, callback=None):
    """Run ``cfg.n_max`` iterations over a batch of attacker images."""
    x_src = np.asarray(x_src, dtype=np.float64)
    if x_src.shape == net.input_shape:
        x_src = x_src[None]
        ref_emb = np.asarray(ref_emb)[None]
    state = init_state(x_src, seeds, cfg)
    losses, plain, sizes = [], [], []
    for _ in range(cfg.n_max):
        state = attack_step(net, state, cfg, x_src, ref_emb, record_plain=record_plain)
        losses.append(state.loss)
        plain.append(state.plain_loss if state.plain_loss is not None else np.full(len(x_src), np.nan))
        sizes.append(state.bank.nbytes)
        if callback is not None:
            callback(state)
    return AttackResult(state.x_adv, np.array(losses), np.array(plain), sizes, state.used_bank_tags)


def reference_embeddings(net, ds, pairs, mode):
    idx = [p.target_idx if mode == "impersonation" else p.attacker_idx for p in pairs]
    return forward_plain(net, ds.images[idx])


def run_attack(net, pair, cfg, ds, record_plain=False):
    """Attack a single pair; returns ``(x_adv, trajectory rows)``."""
    if cfg.mode == "impersonation" and pair.attacker_id == pair.target_id:
        raise ValueError("impersonation attacks require a negative pair")
    x_src = ds.images[pair.attacker_idx]
    ref = reference_embeddings(net, ds, [pair], cfg.mode)[0]
    res = craft(net, x_src, ref, cfg, record_plain=record_plain)
    return res.x_adv[0], res.log_rows()


def run_attack_batch(net, ds, pairs, cfg, seeds=None, record_plain=False):
    if cfg.mode == "impersonation" and any(p.attacker_id == p.target_id for p in pairs):
        raise ValueError("impersonation attacks require negative pairs")
    x_src = ds.images[[p.attacker_idx for p in pairs]]
    ref = reference_embeddings(net, ds, pairs, cfg.mode)
    return craft(net, x_src, ref, cfg, seeds=seeds, record_plain=record_plain)


def loss_at_second_iteration(net, x_src, ref_emb, cfg, etas, seeds=None):
    """Injected loss at t=2 for each feature step in ``etas``.

    Iteration 1 never injects, so every step size sees the same first update
    and the same recorded bank.
    """
    x_src = np.asarray(x_src, dtype=np.float64)
    state = attack_step(net, init_state(x_src, seeds, cfg), cfg, x_src, ref_emb)
    out = []
    for eta in etas:
        s = copy.deepcopy(state)
        s.bank = copy.deepcopy(state.bank)
        nxt = attack_step(net, s, replace(cfg, eta=float(eta)), x_src, ref_emb)
        out.append(nxt.loss)
    return np.array(out)
