"""Synthetic multi-domain classification data and the splitting protocol.

Domain shift is realized as input rotation: every domain draws from the
same two Gaussian class blobs, rotated by a per-domain angle, so the
labeling rule is invariant in the unrotated latent space and the shift
magnitude is a single interpretable parameter.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .objectives import Batch

TRAIN_FRACTION = 0.6
HELDOUT_FRACTION = 0.2  # each of validation and test


@dataclass(frozen=True)
class Domain:
    """One labeled example set; features (n, d), labels (n,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("domain features must be a nonempty (n, d) array")
        if labels.shape != (features.shape[0],):
            raise ValueError("domain labels must align with feature rows")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def as_batch(self, domain_id: int = 0) -> Batch:
        return Batch(
            features=self.features,
            labels=self.labels,
            domain_ids=np.full(self.n, domain_id, dtype=np.int64),
        )


@dataclass(frozen=True)
class MultiDomainDataset:
    """Labeled examples partitioned into domains sharing one feature space.

    Generators enforce at least two domains; derived datasets (e.g. the
    sources left after holding one domain out of a two-domain set) may
    carry a single domain.
    """

    domains: tuple[Domain, ...]
    n_classes: int
    n_features: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        domains = tuple(self.domains)
        if len(domains) < 1:
            raise ValueError("dataset needs at least one domain")
        for i, dom in enumerate(domains):
            if dom.features.shape[1] != self.n_features:
                raise ValueError(f"domain {i} feature width != {self.n_features}")
            if np.any(dom.labels < 0) or np.any(dom.labels >= self.n_classes):
                raise ValueError(f"domain {i} labels outside [0, {self.n_classes})")
        object.__setattr__(self, "domains", domains)

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    def domain_batch(self, index: int) -> Batch:
        return self.domains[index].as_batch(domain_id=index)

    def as_batch(self) -> Batch:
        """All domains concatenated, domain ids by position in the list."""
        return Batch(
            features=np.concatenate([d.features for d in self.domains]),
            labels=np.concatenate([d.labels for d in self.domains]),
            domain_ids=np.concatenate(
                [np.full(d.n, i, dtype=np.int64) for i, d in enumerate(self.domains)]
            ),
        )


def make_rotated_domains(
    n_domains: int,
    n_per_domain: int,
    angle_step_degrees: float,
    noise_std: float,
    seed: int,
) -> MultiDomainDataset:
    """Two-class 2-D Gaussian blobs; domain i is rotated by i * angle_step.

    Class means sit at (+1, 0) and (-1, 0) before rotation. Sampling is a
    pure function of the arguments.
    """
    n_classes = 2
    if n_domains < 2:
        raise ValueError("need at least two domains")
    if n_per_domain < 2 * n_classes:
        raise ValueError(f"need at least {2 * n_classes} examples per domain")
    if noise_std <= 0:
        raise ValueError("noise_std must be positive")
    rng = np.random.default_rng(seed)
    means = np.array([[1.0, 0.0], [-1.0, 0.0]])
    counts = [n_per_domain // 2, n_per_domain - n_per_domain // 2]
    domains = []
    for i in range(n_domains):
        angle = np.deg2rad(i * angle_step_degrees)
        rot = np.array(
            [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
        )
        feats, labels = [], []
        for cls, count in enumerate(counts):
            base = means[cls] + noise_std * rng.standard_normal((count, 2))
            feats.append(base @ rot.T)
            labels.append(np.full(count, cls, dtype=np.int64))
        domains.append(
            Domain(features=np.concatenate(feats), labels=np.concatenate(labels))
        )
    provenance = {
        "generator": "rotated_domains",
        "seed": int(seed),
        "n_domains": int(n_domains),
        "n_per_domain": int(n_per_domain),
        "angle_step_degrees": float(angle_step_degrees),
        "noise_std": float(noise_std),
    }
    return MultiDomainDataset(
        domains=tuple(domains),
        n_classes=n_classes,
        n_features=2,
        provenance=provenance,
    )


def leave_one_out_split(ds: MultiDomainDataset, target_index: int):
    """Hold one domain out as the target; the rest stay sources, in order."""
    if not 0 <= target_index < ds.n_domains:
        raise IndexError(
            f"target_index {target_index} out of range for {ds.n_domains} domains"
        )
    sources = tuple(d for i, d in enumerate(ds.domains) if i != target_index)
    provenance = dict(ds.provenance, holdout_target=int(target_index))
    return (
        MultiDomainDataset(
            domains=sources,
            n_classes=ds.n_classes,
            n_features=ds.n_features,
            provenance=provenance,
        ),
        ds.domains[target_index],
    )


def _largest_remainder(weights: np.ndarray, total: int, caps: np.ndarray) -> np.ndarray:
    """Allocate `total` units proportionally to weights, capped per entry."""
    shares = total * weights / weights.sum()
    alloc = np.minimum(np.floor(shares).astype(np.int64), caps)
    while alloc.sum() < total:
        remainders = np.where(alloc < caps, shares - alloc, -np.inf)
        best = int(np.argmax(remainders))
        if not np.isfinite(remainders[best]):
            break
        alloc[best] += 1
    return alloc


def in_domain_split(ds: MultiDomainDataset, seed: int):
    """Per-domain stratified 60/20/20 partition into (train, val, test).

    Validation and test each get floor(0.2 n) examples (at least one), split
    across classes by largest remainder, so counts are exact whenever the
    proportions divide evenly and no split is ever empty for domains of
    five or more examples. The parts are disjoint and jointly exhaustive.
    """
    rng = np.random.default_rng(seed)
    parts = {name: [] for name in ("train", "val", "test")}
    for dom in ds.domains:
        if dom.n < 5:
            raise ValueError("every domain needs at least 5 examples to split")
        classes = np.unique(dom.labels)
        shuffled = [rng.permutation(np.flatnonzero(dom.labels == cls)) for cls in classes]
        counts = np.array([idx.size for idx in shuffled], dtype=np.int64)
        n_heldout = max(1, int(np.floor(HELDOUT_FRACTION * dom.n)))
        val_counts = _largest_remainder(counts, n_heldout, caps=counts)
        test_counts = _largest_remainder(counts, n_heldout, caps=counts - val_counts)
        idx = {name: [] for name in parts}
        for cls_idx, n_val, n_test in zip(shuffled, val_counts, test_counts):
            idx["val"].append(cls_idx[:n_val])
            idx["test"].append(cls_idx[n_val : n_val + n_test])
            idx["train"].append(cls_idx[n_val + n_test :])
        for name in parts:
            chosen = np.sort(np.concatenate(idx[name]))
            parts[name].append(
                Domain(features=dom.features[chosen], labels=dom.labels[chosen])
            )
    out = []
    for name in ("train", "val", "test"):
        provenance = dict(ds.provenance, split=name, split_seed=int(seed))
        out.append(
            MultiDomainDataset(
                domains=tuple(parts[name]),
                n_classes=ds.n_classes,
                n_features=ds.n_features,
                provenance=provenance,
            )
        )
    return tuple(out)


def balanced_minibatch(
    sources: MultiDomainDataset, per_domain: int, rng: np.random.Generator
) -> Batch:
    """Sample per_domain examples from every source domain, without replacement.

    The generator is consumed in domain order, so identical generator state
    yields identical batches.
    """
    if per_domain < 1:
        raise ValueError("per_domain must be >= 1")
    feats, labels, ids = [], [], []
    for i, dom in enumerate(sources.domains):
        if dom.n < per_domain:
            raise ValueError(
                f"domain {i} has {dom.n} examples, fewer than per_domain={per_domain}"
            )
        chosen = rng.choice(dom.n, size=per_domain, replace=False)
        feats.append(dom.features[chosen])
        labels.append(dom.labels[chosen])
        ids.append(np.full(per_domain, i, dtype=np.int64))
    return Batch(
        features=np.concatenate(feats),
        labels=np.concatenate(labels),
        domain_ids=np.concatenate(ids),
    )


def write_csv(ds: MultiDomainDataset, path) -> None:
    """Export as feature_0..feature_k,label,domain_id rows, 17 significant digits."""
    path = Path(path)
    header = [f"feature_{j}" for j in range(ds.n_features)] + ["label", "domain_id"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, dom in enumerate(ds.domains):
            for row, label in zip(dom.features, dom.labels):
                writer.writerow([f"{x:.17g}" for x in row] + [int(label), i])


def read_csv(path, n_classes: int | None = None) -> MultiDomainDataset:
    """Inverse of write_csv; domain membership comes from the domain_id column."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 3 or header[-2:] != ["label", "domain_id"]:
            raise ValueError(f"unrecognized dataset CSV header in {path}")
        n_features = len(header) - 2
        rows = [(list(map(float, r[:n_features])), int(r[-2]), int(r[-1])) for r in reader]
    if not rows:
        raise ValueError(f"dataset CSV {path} has no data rows")
    domain_ids = sorted({r[2] for r in rows})
    domains = []
    for did in domain_ids:
        feats = np.array([r[0] for r in rows if r[2] == did])
        labels = np.array([r[1] for r in rows if r[2] == did], dtype=np.int64)
        domains.append(Domain(features=feats, labels=labels))
    if n_classes is None:
        n_classes = int(max(r[1] for r in rows)) + 1
    return MultiDomainDataset(
        domains=tuple(domains),
        n_classes=n_classes,
        n_features=n_features,
        provenance={"generator": "csv", "path": str(path)},
    )
