"""EEG windows paired with 2-D gaze labels.

Signals are ``[N, channels, timesteps, 1]`` float32; labels are ``[N, 2]``
positions (x, y) in millimeter-convention units that are never converted.

File layout (little-endian)::

    b"EEGR" | u32 version=1 | u32 n_samples | u32 channels | u32 timesteps
    f32 signals[n_samples][channels][timesteps]
    f32 labels[n_samples][2]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import BadMagicError, FormatError, TruncatedError, VersionError
from .rng import SplitMix64, derive_seed

MAGIC = b"EEGR"
VERSION = 1
SCREEN = (800.0, 600.0)
_HEADER = struct.Struct("<4sIIII")


class CountMismatchError(FormatError):
    pass


@dataclass(frozen=True, eq=False)
class EegDataset:
    signals: np.ndarray
    labels: np.ndarray
    provenance: str = "memory"

    def __post_init__(self):
        if self.signals.ndim != 4 or self.signals.shape[3] != 1:
            raise ValueError(f"signals must be [N, C, T, 1], got {self.signals.shape}")
        if self.labels.shape != (self.signals.shape[0], 2):
            raise ValueError(f"labels must be [{self.signals.shape[0]}, 2], got {self.labels.shape}")
        if len(self) < 1:
            raise ValueError("dataset is empty")
        if not np.all(np.isfinite(self.labels)):
            raise ValueError("labels must be finite")

    def __len__(self) -> int:
        return self.signals.shape[0]

    @property
    def channels(self) -> int:
        return self.signals.shape[1]

    @property
    def timesteps(self) -> int:
        return self.signals.shape[2]

    def subset(self, indices) -> "EegDataset":
        idx = np.asarray(indices)
        return EegDataset(self.signals[idx], self.labels[idx], self.provenance)

    def standardized(self) -> "EegDataset":
        """Per-channel zero mean / unit variance over samples and time."""
        mean = self.signals.mean(axis=(0, 2, 3), keepdims=True)
        std = self.signals.std(axis=(0, 2, 3), keepdims=True)
        sig = ((self.signals - mean) / np.where(std > 0, std, 1)).astype(np.float32)
        return EegDataset(sig, self.labels, self.provenance + "+standardized")


def generate_synthetic(n: int, channels: int = 129, timesteps: int = 500, seed: int = 0,
                       noise_sigma: float = 0.0, map_seed: int = 0,
                       amplitude: float = 10.0) -> EegDataset:
    """Synthetic windows whose channel amplitudes encode the gaze point.

    Labels are uniform over ``[0, 800] x [0, 600]``. With ``u, v`` the
    labels rescaled to ``[-1, 1]``, channel ``c`` of a sample is

        amplitude * (M[c] . (u, v, 1)) * (1 + 0.5 sin(2 pi f_c t / T + phi_c)) + noise

    where ``M``, ``f_c`` in [1, 4) cycles per window and ``phi_c`` come from
    ``map_seed`` (shared across datasets), labels and noise from ``seed``.
    Channel means are therefore affine in the label.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    mrng = SplitMix64(derive_seed(map_seed, "synthetic-map"))
    mixing = mrng.normal(channels * 3).reshape(channels, 3)
    freqs = mrng.uniform(channels, 1.0, 4.0)
    phases = mrng.uniform(channels, 0.0, 2 * np.pi)
    t = np.arange(timesteps) / timesteps
    profile = 1.0 + 0.5 * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])

    rng = SplitMix64(derive_seed(seed, "synthetic-data"))
    labels = np.stack([rng.uniform(n, 0.0, SCREEN[0]), rng.uniform(n, 0.0, SCREEN[1])], axis=1)
    uv1 = np.column_stack([2 * labels[:, 0] / SCREEN[0] - 1, 2 * labels[:, 1] / SCREEN[1] - 1,
                           np.ones(n)])
    amp = amplitude * (uv1 @ mixing.T)
    signals = amp[:, :, None] * profile[None, :, :]
    if noise_sigma > 0:
        signals = signals + rng.normal(signals.size, 0.0, noise_sigma).reshape(signals.shape)
    return EegDataset(signals.astype(np.float32)[..., None], labels.astype(np.float32),
                      f"synthetic(seed={seed}, noise={noise_sigma})")


def to_bytes(ds: EegDataset) -> bytes:
    n, c, t, _ = ds.signals.shape
    return b"".join([
        _HEADER.pack(MAGIC, VERSION, n, c, t),
        ds.signals.astype("<f4").tobytes(),
        ds.labels.astype("<f4").tobytes(),
    ])


def from_bytes(data: bytes, provenance: str = "bytes") -> EegDataset:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedError("header truncated")
    _, version, n, c, t = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    if min(n, c, t) < 1:
        raise FormatError(f"degenerate header: n={n}, channels={c}, timesteps={t}")
    n_sig = n * c * t
    expected = _HEADER.size + 4 * (n_sig + 2 * n)
    if len(data) < expected:
        raise TruncatedError(f"payload has {len(data)} bytes, header implies {expected}")
    if len(data) > expected:
        raise CountMismatchError(f"payload has {len(data)} bytes, header implies {expected}")
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    signals = body[:n_sig].astype(np.float32).reshape(n, c, t, 1)
    labels = body[n_sig:].astype(np.float32).reshape(n, 2)
    return EegDataset(signals, labels, provenance)


def save(ds: EegDataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path) -> EegDataset:
    return from_bytes(Path(path).read_bytes(), f"file({path})")


# ---------------------------------------------------------------------------
# splits and batches


@dataclass(frozen=True)
class SplitSpec:
    """``fixed`` keeps train/val constant; ``per-epoch`` re-draws them each epoch.

    The test partition depends only on ``seed`` and ``fractions``.
    """

    mode: str = "fixed"
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "per-epoch"):
            raise ValueError(f"split mode must be 'fixed' or 'per-epoch', got {self.mode!r}")
        fr = self.fractions
        if len(fr) != 3 or any(not 0 < f < 1 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            raise ValueError(f"fractions must be three values in (0, 1) summing to 1, got {fr}")


def partition_sizes(n: int, fractions) -> tuple[int, int, int]:
    """Floor for train and val, remainder to test."""
    n_train = int(np.floor(n * fractions[0] + 1e-9))
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split(dataset, spec: SplitSpec, epoch: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint, exhaustive (train, val, test) index arrays, each sorted.

    ``dataset`` is anything with a length, or the sample count itself.
    """
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    n_train, n_val, n_test = partition_sizes(n, spec.fractions)
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n} samples leave an empty partition with fractions {spec.fractions}")
    perm = SplitMix64(derive_seed(spec.seed, "split")).permutation(n)
    pool, test = perm[:n_train + n_val], perm[n_train + n_val:]
    if spec.mode == "per-epoch":
        pool = pool[SplitMix64(derive_seed(spec.seed, "split-epoch", epoch)).permutation(pool.size)]
    return np.sort(pool[:n_train]), np.sort(pool[n_train:]), np.sort(test)


def batches(indices, batch_size: int = 64, seed: int = 0, epoch: int = 1) -> list[np.ndarray]:
    """Shuffle ``indices`` with (seed, epoch) and cut into batches; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = np.asarray(indices)
    order = idx[SplitMix64(derive_seed(seed, "batches", epoch)).permutation(idx.size)]
    return [order[i:i + batch_size] for i in range(0, order.size, batch_size)]
