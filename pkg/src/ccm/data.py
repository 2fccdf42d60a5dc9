"""Seeded multi-domain datasets with a controllable spurious block.

Each sample concatenates two blocks. The *core* block is the class
prototype plus Gaussian noise, identical in law across domains. The
*spurious* block is a second prototype set that shows the true class with
per-domain probability ``spurious_agreement[d]`` and a uniformly random other
class otherwise. Source domains agree often; the held-out (last) domain is
anti-correlated, so a model that leans on the spurious block loses accuracy
there while one that uses the core block does not.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .blob import read_blob, write_blob
from .errors import ConfigError, FormatError

DATASET_FORMAT = "ccm-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    domain: int


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 5
    num_domains: int = 4
    core_dim: int = 10
    spurious_dim: int = 10
    spurious_agreement: tuple[float, ...] = (0.95, 0.9, 0.85, 0.05)
    noise_std: float = 0.2
    samples_per_domain: int = 2000
    spurious_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "spurious_agreement", tuple(float(p) for p in self.spurious_agreement))
        for name in ("num_classes", "num_domains", "core_dim", "spurious_dim", "samples_per_domain"):
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise ConfigError(f"must be a positive integer, got {v!r}", name)
        if self.num_classes < 2:
            raise ConfigError("need at least two classes", "num_classes")
        if len(self.spurious_agreement) != self.num_domains:
            raise ConfigError(
                f"{len(self.spurious_agreement)} probabilities for {self.num_domains} domains",
                "spurious_agreement",
            )
        if any(not 0.0 <= p <= 1.0 for p in self.spurious_agreement):
            raise ConfigError("probabilities must lie in [0, 1]", "spurious_agreement")
        if not self.noise_std >= 0:
            raise ConfigError("must be non-negative", "noise_std")
        if not self.spurious_scale >= 0:
            raise ConfigError("must be non-negative", "spurious_scale")

    @property
    def in_dim(self) -> int:
        return self.core_dim + self.spurious_dim

    @property
    def test_domain(self) -> int:
        return self.num_domains - 1

    @property
    def source_domains(self) -> list[int]:
        return list(range(self.num_domains - 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spurious_agreement"] = list(self.spurious_agreement)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown dataset key(s): {', '.join(unknown)}", unknown[0])
        return cls(**raw)


@dataclass
class DomainData:
    """All samples of one domain as arrays.

    ``spurious_class`` records which prototype the generator placed in the
    spurious block (generator bookkeeping, not a model input).
    """

    domain: int
    X: np.ndarray
    y: np.ndarray
    spurious_class: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[Sample]:
        for x, y in zip(self.X, self.y):
            yield Sample(x, int(y), self.domain)

    def subset(self, idx: np.ndarray) -> "DomainData":
        return DomainData(self.domain, self.X[idx], self.y[idx], self.spurious_class[idx])


def prototypes(rng: np.random.Generator, num_classes: int, dim: int) -> np.ndarray:
    """``num_classes`` unit vectors, orthonormal when ``num_classes <= dim``."""
    raw = rng.standard_normal((max(num_classes, dim), dim))
    if num_classes <= dim:
        q, _ = np.linalg.qr(raw[:dim].T)
        return q.T[:num_classes].copy()
    raw = raw[:num_classes]
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def generate(spec: DatasetSpec) -> dict[int, DomainData]:
    rng = np.random.default_rng(spec.seed)
    mu = prototypes(rng, spec.num_classes, spec.core_dim)
    nu = prototypes(rng, spec.num_classes, spec.spurious_dim) * spec.spurious_scale
    out = {}
    n, k = spec.samples_per_domain, spec.num_classes
    for d in range(spec.num_domains):
        r = np.random.default_rng([spec.seed, d])
        y = r.integers(0, k, size=n)
        agree = r.random(n) < spec.spurious_agreement[d]
        # shift in [1, k-1] gives a uniform y' != y
        other = (y + r.integers(1, k, size=n)) % k
        sp = np.where(agree, y, other)
        core = mu[y] + spec.noise_std * r.standard_normal((n, spec.core_dim))
        spur = nu[sp] + spec.noise_std * r.standard_normal((n, spec.spurious_dim))
        out[d] = DomainData(d, np.hstack([core, spur]), y.astype(np.int64), sp.astype(np.int64))
    return out


def split_train_val(
    data: dict[int, DomainData], val_fraction: float, seed: int, test_domain: int | None = None
) -> tuple[dict[int, DomainData], dict[int, DomainData]]:
    """Label-stratified train/val split of every source domain.

    ``test_domain`` (default: the highest domain id) is left out of both
    halves. Each domain's validation size is ``round(n * val_fraction)``,
    apportioned across classes by largest remainder.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"must lie strictly in (0, 1), got {val_fraction}", "val_fraction")
    if test_domain is None:
        test_domain = max(data)
    train, val = {}, {}
    for d, dd in sorted(data.items()):
        if d == test_domain:
            continue
        rng = np.random.default_rng([seed, d, 7919])
        classes, counts = np.unique(dd.y, return_counts=True)
        exact = counts * val_fraction
        take = np.floor(exact).astype(int)
        short = int(round(len(dd) * val_fraction)) - take.sum()
        order = np.argsort(-(exact - take), kind="stable")
        take[order[:short]] += 1
        val_idx = []
        for c, t in zip(classes, take):
            members = np.flatnonzero(dd.y == c)
            val_idx.append(rng.permutation(members)[:t])
        val_idx = np.sort(np.concatenate(val_idx)) if val_idx else np.zeros(0, dtype=int)
        mask = np.ones(len(dd), dtype=bool)
        mask[val_idx] = False
        train[d] = dd.subset(np.flatnonzero(mask))
        val[d] = dd.subset(val_idx)
    return train, val


# ---------------------------------------------------------------- caching


def save_dataset(path: str | Path, spec: DatasetSpec, data: dict[int, DomainData]) -> None:
    arrays = {}
    for d, dd in sorted(data.items()):
        arrays[f"{d}.X"] = dd.X
        arrays[f"{d}.y"] = dd.y
        arrays[f"{d}.spurious"] = dd.spurious_class
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "spec": spec.to_dict()}
    write_blob(path, header, arrays)


def load_dataset(path: str | Path, expected: DatasetSpec | None = None) -> tuple[DatasetSpec, dict[int, DomainData]]:
    """Load a cached dataset; with ``expected``, every spec field must match."""
    header, arrays = read_blob(path)
    if header.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a ccm dataset file")
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {header.get('version')}")
    try:
        spec = DatasetSpec.from_dict(header["spec"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: invalid spec header ({exc})") from None
    if expected is not None and spec != expected:
        diff = [
            f"{k}: file={v!r} requested={expected.to_dict()[k]!r}"
            for k, v in spec.to_dict().items()
            if expected.to_dict()[k] != v
        ]
        raise FormatError(f"{path}: spec mismatch ({'; '.join(diff)})")
    data = {}
    for d in range(spec.num_domains):
        try:
            X, y, s = arrays[f"{d}.X"], arrays[f"{d}.y"], arrays[f"{d}.spurious"]
        except KeyError as exc:
            raise FormatError(f"{path}: missing array {exc}") from None
        if X.shape != (spec.samples_per_domain, spec.in_dim):
            raise FormatError(f"{path}: domain {d} has shape {X.shape}, header implies "
                              f"{(spec.samples_per_domain, spec.in_dim)}")
        data[d] = DomainData(d, X, y, s)
    return spec, data


def load_spec_file(path: str | Path) -> DatasetSpec:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError("dataset spec file must hold a JSON object")
    return DatasetSpec.from_dict(raw)
