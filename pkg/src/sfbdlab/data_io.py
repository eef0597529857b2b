"""Synthetic distribution generators, dataset persistence, and RNG stream discipline.

Every stochastic operation in the package draws from a generator obtained via
:func:`rng_stream`, so outputs are pure functions of ``(inputs, seed)`` and
parallel workers need no coordination.

Dataset file format (version 1)
-------------------------------
``SFBDDATA`` magic (8 bytes), version byte, one JSON text line with keys
``d, n, tag, origin, lineage``, then the ``n*d`` float64 payload
(little-endian, row-major), then the first 8 bytes of the SHA-256 digest of
everything preceding the checksum.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

TAGS = ("clean", "noisy", "denoised")

_MAGIC = b"SFBDDATA"
_VERSION = 1
_CHECKSUM_BYTES = 8


class DatasetFormatError(ValueError):
    """Base class for dataset (de)serialization failures."""


class MalformedHeaderError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


def rng_stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Derive an independent generator from ``(seed, label, index)``.

    The stream key is the SeedSequence entropy tuple
    ``(seed, crc32(label), index)``.  Deriving per-index streams makes any
    chunking of a loop over ``index`` produce identical output.
    """
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, int(index)]))


@dataclass(frozen=True)
class Dataset:
    """A tagged collection of d-dimensional points.

    ``tag`` transitions are clean -> noisy (corruption) and noisy -> denoised
    (backward sampling); the operations performing those transitions enforce
    them.  ``origin`` is free-text provenance, ``seed_lineage`` the seeds that
    produced the points.
    """

    points: np.ndarray
    tag: str
    origin: str = ""
    seed_lineage: tuple[int, ...] = ()

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2:
            raise ValueError(f"points must have shape (n, d), got {pts.shape}")
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite entries")
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}, expected one of {TAGS}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "seed_lineage", tuple(int(s) for s in self.seed_lineage))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def with_points(self, points: np.ndarray, tag: str | None = None, origin: str | None = None,
                    extra_seeds: tuple[int, ...] = ()) -> "Dataset":
        return Dataset(
            points=points,
            tag=self.tag if tag is None else tag,
            origin=self.origin if origin is None else origin,
            seed_lineage=self.seed_lineage + extra_seeds,
        )


@dataclass(frozen=True)
class DistributionSpec:
    """Parameters of a synthetic ground-truth distribution.

    Families:
      - ``gaussian``: ``mean`` (d,), ``cov`` (d, d)
      - ``gaussian-mixture``: ``means`` (k, d), ``covs`` (k, d, d), ``weights`` (k,)
      - ``ring-of-gaussians``: ``modes`` isotropic components of width ``width``
        equally spaced on a circle of ``radius`` (d = 2)
      - ``two-moons``: two interleaved half circles of unit radius with
        isotropic jitter ``width`` (d = 2)
    """

    family: str
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    means: np.ndarray | None = None
    covs: np.ndarray | None = None
    weights: np.ndarray | None = None
    radius: float = 1.0
    width: float = 0.1
    modes: int = 8

    def __post_init__(self):
        for name in ("mean", "means", "weights"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=np.float64))
        for name in ("cov", "covs"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=np.float64))
        self.validate()

    def validate(self) -> None:
        if self.family == "gaussian":
            if self.mean is None or self.mean.ndim != 1:
                raise ValueError("gaussian spec: field 'mean' must be a 1-d vector")
            d = self.mean.shape[0]
            if self.cov is None or self.cov.shape != (d, d):
                raise ValueError("gaussian spec: field 'cov' must have shape (d, d)")
            _require_spd(self.cov, "cov")
        elif self.family == "gaussian-mixture":
            if self.means is None or self.means.ndim != 2:
                raise ValueError("gaussian-mixture spec: field 'means' must have shape (k, d)")
            k, d = self.means.shape
            if self.covs is None or self.covs.shape != (k, d, d):
                raise ValueError("gaussian-mixture spec: field 'covs' must have shape (k, d, d)")
            if self.weights is None or self.weights.shape != (k,):
                raise ValueError("gaussian-mixture spec: field 'weights' must have shape (k,)")
            if np.any(self.weights <= 0):
                raise ValueError("gaussian-mixture spec: field 'weights' must be positive")
            if abs(float(self.weights.sum()) - 1.0) > 1e-12:
                raise ValueError("gaussian-mixture spec: field 'weights' must sum to 1 within 1e-12")
            for i in range(k):
                _require_spd(self.covs[i], f"covs[{i}]")
        elif self.family == "ring-of-gaussians":
            if self.modes < 1:
                raise ValueError("ring-of-gaussians spec: field 'modes' must be >= 1")
            if self.radius <= 0 or self.width <= 0:
                raise ValueError("ring-of-gaussians spec: fields 'radius' and 'width' must be > 0")
        elif self.family == "two-moons":
            if self.width <= 0:
                raise ValueError("two-moons spec: field 'width' must be > 0")
        else:
            raise ValueError(f"unknown family {self.family!r}")

    @property
    def dim(self) -> int:
        if self.family == "gaussian":
            return self.mean.shape[0]
        if self.family == "gaussian-mixture":
            return self.means.shape[1]
        return 2

    def label(self) -> str:
        """Short provenance string used as the Dataset origin base."""
        if self.family == "gaussian":
            return f"gaussian(d={self.dim})"
        if self.family == "gaussian-mixture":
            return f"gaussian-mixture(k={self.means.shape[0]},d={self.dim})"
        if self.family == "ring-of-gaussians":
            return f"ring-of-gaussians(modes={self.modes},radius={self.radius:g},width={self.width:g})"
        return f"two-moons(width={self.width:g})"

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Population mean and covariance (closed form; two-moons unsupported)."""
        if self.family == "gaussian":
            return self.mean.copy(), self.cov.copy()
        if self.family == "gaussian-mixture":
            mu = self.weights @ self.means
            cov = np.zeros((self.dim, self.dim))
            for w, m, c in zip(self.weights, self.means, self.covs):
                diff = m - mu
                cov += w * (c + np.outer(diff, diff))
            return mu, cov
        if self.family == "ring-of-gaussians":
            means = self._ring_means()
            mu = means.mean(axis=0)
            cov = self.width ** 2 * np.eye(2)
            diffs = means - mu
            cov += diffs.T @ diffs / self.modes
            return mu, cov
        raise ValueError("two-moons moments are not available in closed form")

    def _ring_means(self) -> np.ndarray:
        ang = 2.0 * np.pi * np.arange(self.modes) / self.modes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _require_spd(mat: np.ndarray, name: str) -> None:
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ValueError(f"field '{name}' must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ValueError(f"field '{name}' must be positive definite") from None


def sample_distribution(spec: DistributionSpec, n: int, seed: int) -> Dataset:
    """Draw ``n`` i.i.d. points from ``spec``; tag ``clean``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = rng_stream(seed, "sample-distribution")
    d = spec.dim
    if n == 0:
        pts = np.zeros((0, d))
    elif spec.family == "gaussian":
        L = np.linalg.cholesky(spec.cov)
        pts = spec.mean + rng.standard_normal((n, d)) @ L.T
    elif spec.family == "gaussian-mixture":
        comp = rng.choice(len(spec.weights), size=n, p=spec.weights)
        pts = np.empty((n, d))
        for i in range(len(spec.weights)):
            mask = comp == i
            if mask.any():
                L = np.linalg.cholesky(spec.covs[i])
                pts[mask] = spec.means[i] + rng.standard_normal((mask.sum(), d)) @ L.T
    elif spec.family == "ring-of-gaussians":
        means = spec._ring_means()
        comp = rng.integers(0, spec.modes, size=n)
        pts = means[comp] + spec.width * rng.standard_normal((n, 2))
    else:  # two-moons
        half = rng.integers(0, 2, size=n)
        theta = rng.uniform(0.0, np.pi, size=n)
        x = np.where(half == 0, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(half == 0, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x, y], axis=1) + spec.width * rng.standard_normal((n, 2))
    return Dataset(points=pts, tag="clean", origin=spec.label(), seed_lineage=(seed,))


def split_clean_ratio(clean: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint split of a clean set; the subset gets ``round(ratio * n)`` points."""
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    m = int(round(ratio * clean.n))
    if m < 1:
        raise ValueError(f"ratio {ratio} leaves fewer than one point out of n={clean.n}")
    perm = rng_stream(seed, "split-clean-ratio").permutation(clean.n)
    subset = clean.with_points(clean.points[perm[:m]], extra_seeds=(seed,))
    rest = clean.with_points(clean.points[perm[m:]], extra_seeds=(seed,))
    return subset, rest


def save_dataset(ds: Dataset, path: str | Path) -> None:
    header = json.dumps({
        "d": ds.d,
        "n": ds.n,
        "tag": ds.tag,
        "origin": ds.origin,
        "lineage": list(ds.seed_lineage),
    }).encode("utf-8") + b"\n"
    payload = ds.points.astype("<f8").tobytes()
    body = _MAGIC + bytes([_VERSION]) + header + payload
    checksum = hashlib.sha256(body).digest()[:_CHECKSUM_BYTES]
    Path(path).write_bytes(body + checksum)


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 1 + _CHECKSUM_BYTES or not raw.startswith(_MAGIC):
        raise MalformedHeaderError(f"{path}: not a dataset file (bad magic)")
    if raw[len(_MAGIC)] != _VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {raw[len(_MAGIC)]}")
    body, checksum = raw[:-_CHECKSUM_BYTES], raw[-_CHECKSUM_BYTES:]
    if hashlib.sha256(body).digest()[:_CHECKSUM_BYTES] != checksum:
        raise ChecksumError(f"{path}: checksum mismatch")
    nl = body.find(b"\n", len(_MAGIC) + 1)
    if nl < 0:
        raise MalformedHeaderError(f"{path}: missing header line")
    try:
        meta = json.loads(body[len(_MAGIC) + 1:nl].decode("utf-8"))
        d, n = int(meta["d"]), int(meta["n"])
        tag, origin = meta["tag"], meta["origin"]
        lineage = tuple(int(s) for s in meta["lineage"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"{path}: bad header ({exc})") from None
    payload = body[nl + 1:]
    if len(payload) != n * d * 8:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, expected {n * d * 8}")
    pts = np.frombuffer(payload, dtype="<f8").reshape(n, d).copy()
    return Dataset(points=pts, tag=tag, origin=origin, seed_lineage=lineage)


def export_csv(ds: Dataset, path: str | Path) -> None:
    """Plain CSV with columns x1,...,xd for plotting."""
    header = ",".join(f"x{i + 1}" for i in range(ds.d))
    np.savetxt(path, ds.points, delimiter=",", header=header, comments="")
