"""Spatial-temporal data model, file ingestion and the synthetic generator.

A dataset is a ``T x N x d`` feature tensor (timestamps x channels x
features) with one integer label per timestamp. Training samples pair each
timestamp with its predecessor, so timestamp 0 is only ever history.
"""
import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"STHL1"
_HEADER = struct.Struct("<4I")
FORMATS = ("dense-binary", "csv-manifest")


class DatasetError(ValueError):
    """Base class for malformed dataset diagnostics."""


class ShapeMismatchError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class NonFiniteError(DatasetError):
    pass


class FormatError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    channel_names: list = field(default=None)

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 3:
            raise ShapeMismatchError(f"features must be T x N x d, got shape {feats.shape}")
        T, N, _ = feats.shape
        if T < 2:
            raise ShapeMismatchError(f"need at least 2 timestamps, got T={T}")
        if labels.shape != (T,):
            raise ShapeMismatchError(f"labels shape {labels.shape} does not match T={T}")
        if self.num_classes < 1:
            raise DatasetError(f"num_classes must be positive, got {self.num_classes}")
        bad = np.flatnonzero((labels < 0) | (labels >= self.num_classes))
        if bad.size:
            t = int(bad[0])
            raise LabelRangeError(
                f"label {labels[t]} at timestamp {t} outside [0, {self.num_classes})")
        nonfinite = np.argwhere(~np.isfinite(feats))
        if nonfinite.size:
            t, n, j = (int(v) for v in nonfinite[0])
            raise NonFiniteError(f"non-finite feature at (t={t}, channel={n}, f={j})")
        names = self.channel_names
        if names is None:
            names = [f"ch{i}" for i in range(N)]
        names = [str(s) for s in names]
        if len(names) != N:
            raise ShapeMismatchError(f"{len(names)} channel names for N={N} channels")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "channel_names", names)

    @property
    def T(self):
        return self.features.shape[0]

    @property
    def N(self):
        return self.features.shape[1]

    @property
    def d(self):
        return self.features.shape[2]

    def class_histogram(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def summary(self):
        return {
            "T": self.T, "N": self.N, "d": self.d, "C": self.num_classes,
            "class_histogram": self.class_histogram().tolist(),
        }


@dataclass(frozen=True, eq=False)
class SamplePair:
    current: np.ndarray
    previous: np.ndarray
    label: int

    def __post_init__(self):
        if self.current.shape != self.previous.shape or self.current.ndim != 2:
            raise ShapeMismatchError(
                f"pair matrices disagree: {self.current.shape} vs {self.previous.shape}")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 5
    T: int = 200
    N: int = 10
    d: int = 16
    class_separation: float = 3.0
    noise_std: float = 0.5
    interaction_strength: float = 0.4
    rng_seed: int = 7

    def __post_init__(self):
        if self.N < 2 or self.d < 2 or self.T < 2:
            raise ValueError(f"need N, d, T >= 2, got N={self.N}, d={self.d}, T={self.T}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if self.class_separation < 0 or self.noise_std < 0:
            raise ValueError("class_separation and noise_std must be nonnegative")
        if not 0.0 <= self.interaction_strength <= 1.0:
            raise ValueError(
                f"interaction_strength must lie in [0, 1], got {self.interaction_strength}")


def make_pairs(ds):
    """One sample per timestamp t >= 1: (X^t, X^{t-1}, y^t)."""
    return [
        SamplePair(ds.features[t], ds.features[t - 1], int(ds.labels[t]))
        for t in range(1, ds.T)
    ]


def stack_pairs(pairs):
    """Batch arrays (current, previous, labels) from a sequence of pairs."""
    cur = np.stack([p.current for p in pairs])
    prev = np.stack([p.previous for p in pairs])
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    return cur, prev, labels


def partner_channel(i, N):
    """Channel whose previous-timestamp signal leaks into channel ``i``."""
    return (i + 1) % N


def class_patterns(rng, C, N, d, separation):
    """(C, N, d) class means, pairwise ``separation`` apart in Frobenius norm.

    Half of each raw pattern's energy is a signature shared by all channels,
    half is channel-specific; the flattened patterns are then
    orthonormalised (when C <= N*d) and scaled.
    """
    shared = rng.standard_normal((C, 1, d))
    specific = rng.standard_normal((C, N, d))
    raw = (np.sqrt(COMMON_FRACTION) * shared
           + np.sqrt(1.0 - COMMON_FRACTION) * specific).reshape(C, N * d)
    if C <= N * d:
        q, r = np.linalg.qr(raw.T)
        q = q * np.sign(np.diag(r))  # keep each pattern's orientation
    else:
        q = raw.T / np.linalg.norm(raw, axis=1)
    return (separation / np.sqrt(2.0)) * q.T.reshape(C, N, d)


COMMON_FRACTION = 0.5


def generate_synthetic(spec):
    """Labeled multichannel signal with cross-channel temporal interaction.

    Labels are iid uniform per timestamp. The source signal of channel ``i``
    at ``t`` is its class mean plus gaussian noise of std ``noise_std``; the
    observed feature keeps ``1 - interaction_strength`` of that source and
    takes ``interaction_strength`` of the observed feature of channel
    ``partner_channel(i)`` at ``t - 1``.
    """
    rng = np.random.default_rng(spec.rng_seed)
    C, T, N, d = spec.num_classes, spec.T, spec.N, spec.d
    labels = rng.integers(0, C, size=T)
    means = class_patterns(rng, C, N, d, spec.class_separation)
    source = means[labels] + spec.noise_std * rng.standard_normal((T, N, d))

    m = spec.interaction_strength
    partners = np.array([partner_channel(i, N) for i in range(N)])
    feats = np.empty_like(source)
    feats[0] = source[0]
    for t in range(1, T):
        feats[t] = (1.0 - m) * source[t] + m * feats[t - 1][partners]
    return WindowedDataset(feats, labels, C)


def save_dataset(ds, path, format="dense-binary"):
    path = Path(path)
    if format == "dense-binary":
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_HEADER.pack(ds.T, ds.N, ds.d, ds.num_classes))
            fh.write(ds.features.astype("<f8").tobytes())
            fh.write(ds.labels.astype("<u4").tobytes())
    elif format == "csv-manifest":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "channel", "label"] + [f"f{j}" for j in range(ds.d)])
            for t in range(ds.T):
                for n in range(ds.N):
                    w.writerow([t, ds.channel_names[n], int(ds.labels[t])]
                               + [repr(float(v)) for v in ds.features[t, n]])
    else:
        raise ValueError(f"unknown dataset format {format!r}; expected one of {FORMATS}")


def load_dataset(path, format="dense-binary", num_classes=None):
    """Read a dataset file, validating shape, labels and finiteness.

    ``num_classes`` is only consulted for the CSV manifest, which carries no
    class count; it defaults to ``max(label) + 1``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    if format == "dense-binary":
        return _load_dense(path)
    if format == "csv-manifest":
        return _load_csv(path, num_classes)
    raise ValueError(f"unknown dataset format {format!r}; expected one of {FORMATS}")


def _load_dense(path):
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    off = len(MAGIC)
    if len(raw) < off + _HEADER.size:
        raise ShapeMismatchError(f"{path}: truncated header")
    T, N, d, C = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    n_feat = T * N * d
    expected = off + 8 * n_feat + 4 * T
    if len(raw) != expected:
        have_feat = (len(raw) - off - 4 * T) / 8
        raise ShapeMismatchError(
            f"{path}: header declares T={T}, N={N}, d={d} ({n_feat} features, {T} labels) "
            f"but payload is {len(raw) - off} bytes (~{have_feat:g} feature values); "
            f"expected {expected - off} bytes")
    feats = np.frombuffer(raw, dtype="<f8", count=n_feat, offset=off).reshape(T, N, d)
    labels = np.frombuffer(raw, dtype="<u4", count=T, offset=off + 8 * n_feat)
    return WindowedDataset(feats.astype(np.float64), labels.astype(np.int64), C)


def _load_csv(path, num_classes):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["t", "channel", "label"]:
            raise FormatError(f"{path}: header must start with t,channel,label")
        fcols = header[3:]
        if fcols != [f"f{j}" for j in range(len(fcols))] or not fcols:
            raise FormatError(f"{path}: feature columns must be f0..f{{d-1}}")
        d = len(fcols)
        rows = {}
        channels = []
        labels = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3 + d:
                raise ShapeMismatchError(
                    f"{path}:{lineno}: expected {3 + d} columns, got {len(row)}")
            t, ch, lab = int(row[0]), row[1], int(row[2])
            if ch not in channels:
                channels.append(ch)
            if t in labels and labels[t] != lab:
                raise DatasetError(f"{path}:{lineno}: conflicting labels at timestamp {t}")
            labels[t] = lab
            rows[(t, ch)] = [float(v) for v in row[3:]]
    T, N = len(labels), len(channels)
    if sorted(labels) != list(range(T)):
        raise ShapeMismatchError(f"{path}: timestamps must be 0..T-1 without gaps")
    feats = np.empty((T, N, d))
    for t in range(T):
        for n, ch in enumerate(channels):
            if (t, ch) not in rows:
                raise ShapeMismatchError(f"{path}: missing row for t={t}, channel={ch}")
            feats[t, n] = rows[(t, ch)]
    lab = np.array([labels[t] for t in range(T)], dtype=np.int64)
    C = num_classes if num_classes is not None else int(lab.max()) + 1
    return WindowedDataset(feats, lab, C, channels)
