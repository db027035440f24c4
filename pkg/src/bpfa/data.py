"""Deterministic synthetic face-identity images and pair sampling.

A template shared by all identities carries a per-identity mix of
``latent_dim`` smooth basis patterns, so every identity lives in one common
low-dimensional subspace. Samples add low-frequency jitter, an optional small
translation and pixel noise, and are clamped to [0, 255].
"""

import csv
import json
import warnings
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

DATASET_FORMAT = "bpfa-dataset"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    """A dataset container is missing, corrupt or of another version."""


@dataclass(frozen=True)
class DatasetParams:
    num_identities: int = 20
    images_per_identity: int = 20
    image_shape: tuple = (1, 16, 16)
    seed: int = 0
    template_contrast: float = 40.0
    identity_contrast: float = 6.0
    latent_dim: int = 16
    smoothness: float = 1.0
    jitter: float = 8.0
    jitter_smoothness: float = 3.0
    max_shift: int = 0
    noise: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))


@dataclass
class IdentityDataset:
    params: DatasetParams
    images: np.ndarray  # (K*M, C, H, W), pixel units
    labels: np.ndarray  # (K*M,)
    metadata: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.params.seed

    def __len__(self):
        return len(self.labels)

    def indices_of(self, identity):
        return np.flatnonzero(self.labels == identity)

    def split(self, holdout_per_identity):
        """Return (train indices, held-out indices); the last images of each identity are held out."""
        m = self.params.images_per_identity
        pos = np.arange(len(self)) % m
        keep = pos < m - holdout_per_identity
        return np.flatnonzero(keep), np.flatnonzero(~keep)


@dataclass(frozen=True)
class FacePair:
    attacker_idx: int
    target_idx: int
    attacker_id: int
    target_id: int
    polarity: str

    def attacker_image(self, ds):
        return ds.images[self.attacker_idx]

    def target_image(self, ds):
        return ds.images[self.target_idx]


def _smooth_field(rng, shape, sigma):
    c, h, w = shape
    f = rng.standard_normal(shape)
    f = np.stack([gaussian_filter(f[i], sigma, mode="wrap") for i in range(c)])
    std = f.std()
    return f / std if std > 0 else f


def generate(params=DatasetParams()):
    if params.num_identities < 2 or params.images_per_identity < 2:
        raise ValueError("need at least 2 identities and 2 images per identity")
    rng = np.random.default_rng(params.seed)
    shape = params.image_shape
    template = 128.0 + params.template_contrast * _smooth_field(rng, shape, params.smoothness * 2)
    basis = np.stack([_smooth_field(rng, shape, params.smoothness) for _ in range(params.latent_dim)])
    images, labels = [], []
    for k in range(params.num_identities):
        z = rng.standard_normal(params.latent_dim)
        proto = template + params.identity_contrast * np.tensordot(z, basis, axes=1) / np.sqrt(params.latent_dim)
        for _ in range(params.images_per_identity):
            img = proto.copy()
            if params.jitter:
                img = img + params.jitter * _smooth_field(rng, shape, params.jitter_smoothness)
            if params.max_shift:
                dy, dx = rng.integers(-params.max_shift, params.max_shift + 1, size=2)
                img = np.roll(img, (int(dy), int(dx)), axis=(1, 2))
            if params.noise:
                img = img + params.noise * rng.standard_normal(shape)
            images.append(np.clip(img, 0.0, 255.0))
            labels.append(k)
    ds = IdentityDataset(params, np.stack(images), np.array(labels, dtype=np.int64))
    degenerate = params.noise == 0 and params.jitter == 0 and params.max_shift == 0
    ds.metadata["degenerate"] = bool(degenerate)
    if degenerate:
        warnings.warn("zero noise, jitter and shift: images of an identity are duplicates")
    within, between = separation_stats(ds, n_pairs=1000, seed=params.seed)
    ds.metadata["within_mean"] = within
    ds.metadata["between_mean"] = between
    ds.metadata["separable"] = bool(within < between)
    return ds


def separation_stats(ds, n_pairs=1000, seed=0):
    """Mean pixel-space L2 distance over sampled positive and negative pairs."""
    counts = np.bincount(ds.labels)
    n_pos = int((counts * (counts - 1)).sum())
    n_neg = len(ds) ** 2 - int((counts**2).sum())
    pos = sample_pairs(ds, min(n_pairs, n_pos // 2), "positive", seed)
    neg = sample_pairs(ds, min(n_pairs, n_neg // 2), "negative", seed)

    def mean_dist(pairs):
        a = ds.images[[p.attacker_idx for p in pairs]]
        b = ds.images[[p.target_idx for p in pairs]]
        return float(np.sqrt(((a - b) ** 2).reshape(len(pairs), -1).sum(axis=1)).mean())

    return mean_dist(pos), mean_dist(neg)


def sample_pairs(ds, n_pairs, polarity, seed, exclude=()):
    """Draw ``n_pairs`` distinct image pairs deterministically from ``seed``.

    ``exclude`` holds ``(attacker_idx, target_idx)`` tuples that must not be drawn.
    """
    if polarity not in ("negative", "positive"):
        raise ValueError(f"unknown polarity {polarity!r}")
    k = len(np.unique(ds.labels))
    if n_pairs and polarity == "negative" and k < 2:
        raise ValueError("negative pairs need at least two identities")
    if n_pairs and polarity == "positive" and np.bincount(ds.labels).max() < 2:
        raise ValueError("positive pairs need an identity with two images")
    rng = np.random.default_rng(seed)
    n = len(ds)
    pairs, seen = [], set(exclude)
    attempts = 0
    while len(pairs) < n_pairs:
        attempts += 1
        if attempts > 100 * n_pairs + 1000:
            raise ValueError(f"cannot draw {n_pairs} distinct {polarity} pairs")
        a = int(rng.integers(n))
        if polarity == "negative":
            candidates = np.flatnonzero(ds.labels != ds.labels[a])
        else:
            candidates = np.flatnonzero((ds.labels == ds.labels[a]) & (np.arange(n) != a))
        if not len(candidates):
            continue
        t = int(candidates[rng.integers(len(candidates))])
        if (a, t) in seen:
            continue
        seen.add((a, t))
        pairs.append(FacePair(a, t, int(ds.labels[a]), int(ds.labels[t]), polarity))
    return pairs


def negative_pair_indices(labels):
    """All unordered (i, j), i < j, with different labels."""
    i, j = np.triu_indices(len(labels), k=1)
    keep = labels[i] != labels[j]
    return i[keep], j[keep]


def save_dataset(ds, path):
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "params": asdict(ds.params),
        "metadata": ds.metadata,
    }
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=blob, images=ds.images, labels=ds.labels)


def load_dataset(path):
    try:
        with np.load(path, allow_pickle=False) as data:
            if "__header__" not in data.files:
                raise DatasetFormatError(f"{path}: not a dataset container")
            header = json.loads(data["__header__"].tobytes().decode())
            images, labels = data["images"], data["labels"]
    except (OSError, EOFError, KeyError, json.JSONDecodeError, zipfile.BadZipFile) as exc:
        raise DatasetFormatError(f"{path}: unreadable dataset container ({exc})") from exc
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset container")
    params = DatasetParams(**header["params"])
    return IdentityDataset(params, np.array(images, dtype=np.float64), np.array(labels), header["metadata"])


def save_pairs(pairs, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["attacker_idx", "target_idx", "polarity"])
        for p in pairs:
            writer.writerow([p.attacker_idx, p.target_idx, p.polarity])


def load_pairs(path, ds):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        FacePair(
            int(r["attacker_idx"]),
            int(r["target_idx"]),
            int(ds.labels[int(r["attacker_idx"])]),
            int(ds.labels[int(r["target_idx"])]),
            r["polarity"],
        )
        for r in rows
    ]
