"""Geometric MU-MIMO channel generation, CSI distortion and dataset files.

Index convention: ``H[i, j]`` is the ``R x T`` channel from transmitter
``j`` to receiver ``i``, and ``distances[i, j]`` is the distance between
those two nodes.  The desired link of pair ``i`` is ``H[i, i]``.

Random streams: every sampler takes an integer seed.  Batches derive one
independent stream per sample with :func:`sample_rng`, which feeds
``(seed, index)`` into ``numpy.random.SeedSequence``.
"""

from dataclasses import dataclass, field
import hashlib
import math
import struct

import numpy as np

DEFAULT_SIGMA = 2.6e-5
DEFAULT_PMAX = 1.0

__all__ = [
    "NetworkConfig",
    "Topology",
    "FadingSpec",
    "SpatialSpec",
    "RAYLEIGH",
    "RICIAN",
    "UNIFORM",
    "sample_rng",
    "sample_topology",
    "sample_csi",
    "sample_network",
    "sample_dataset",
    "distort_csi",
    "path_factor",
    "rician_params",
    "save_dataset",
    "load_dataset",
    "DatasetFormatError",
    "ChannelSource",
    "derive_seed",
]


@dataclass(frozen=True)
class NetworkConfig:
    M: int = 10
    T: int = 5
    R: int = 3
    d: int = 1
    sigma: float = DEFAULT_SIGMA
    Pmax: float = DEFAULT_PMAX
    alpha: tuple = None

    def __post_init__(self):
        for name in ("M", "T", "R", "d"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d > min(self.R, self.T):
            raise ValueError("d must not exceed min(R, T)")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not self.Pmax > 0:
            raise ValueError("Pmax must be > 0")
        if self.alpha is not None:
            alpha = tuple(float(a) for a in self.alpha)
            if len(alpha) != self.M or any(a <= 0 for a in alpha):
                raise ValueError("alpha must hold M positive weights")
            object.__setattr__(self, "alpha", alpha)

    @property
    def weights(self):
        return np.ones(self.M) if self.alpha is None else np.asarray(self.alpha)

    @property
    def shape(self):
        return (self.M, self.M, self.R, self.T)

    def with_size(self, M):
        return NetworkConfig(M, self.T, self.R, self.d, self.sigma, self.Pmax, None)


@dataclass(frozen=True)
class FadingSpec:
    kind: str = "rayleigh"
    k_factor: float = None

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in ("rayleigh", "rician"):
            raise ValueError(f"unknown fading kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "rician":
            k = 100.0 if self.k_factor is None else float(self.k_factor)
            if not k > 0:
                raise ValueError("Rician k_factor must be > 0")
            object.__setattr__(self, "k_factor", k)

    @classmethod
    def parse(cls, text):
        """``'rayleigh'``, ``'rician'`` (20 dB) or ``'rician:<k linear>'``."""
        name, _, k = text.partition(":")
        return cls(name, float(k) if k else None)

    def __str__(self):
        return self.kind if self.kind == "rayleigh" else f"rician:{self.k_factor:g}"


@dataclass(frozen=True)
class SpatialSpec:
    kind: str = "uniform"
    stddev: float = None

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown spatial distribution {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "gaussian" and not (self.stddev and self.stddev > 0):
            raise ValueError("Gaussian placement needs stddev > 0")

    @classmethod
    def gaussian(cls, stddev):
        return cls("gaussian", float(stddev))

    @classmethod
    def parse(cls, text):
        name, _, s = text.partition(":")
        return cls(name, float(s) if s else None)

    def __str__(self):
        return "uniform" if self.kind == "uniform" else f"gaussian:{self.stddev:g}"


RAYLEIGH = FadingSpec("rayleigh")
RICIAN = FadingSpec("rician", 100.0)
UNIFORM = SpatialSpec("uniform")


@dataclass
class Topology:
    tx_positions: np.ndarray
    rx_positions: np.ndarray
    distances: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.distances is None:
            self.distances = pairwise_distances(self.tx_positions, self.rx_positions)

    @property
    def M(self):
        return len(self.tx_positions)


def pairwise_distances(tx, rx):
    """``l[i, j] = |tx_j - rx_i|``."""
    diff = rx[:, None, :] - tx[None, :, :]
    return np.sqrt(np.sum(diff ** 2, axis=-1))


def sample_rng(seed, index=None):
    """Generator for ``seed`` or for sample ``index`` of the stream family ``seed``."""
    if index is None:
        return np.random.default_rng(np.random.SeedSequence(int(seed)))
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return sample_rng(seed)


def sample_topology(M, spatial=UNIFORM, rng_seed=0):
    """Drop ``M`` transmitters and ``M`` receivers in the plane."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if isinstance(spatial, str):
        spatial = SpatialSpec.parse(spatial)
    rng = _rng(rng_seed)
    side = math.sqrt(M)
    if spatial.kind == "uniform":
        tx = rng.uniform(0.0, side, size=(M, 2))
        rx = rng.uniform(0.0, side, size=(M, 2))
    else:
        centre = side / 2.0
        tx = rng.normal(centre, spatial.stddev, size=(M, 2))
        rx = rng.normal(centre, spatial.stddev, size=(M, 2))
    return Topology(tx, rx)


def path_factor(distances):
    return 1.0 / (1.0 + np.asarray(distances) ** 3)


def rician_params(k):
    """Per-component mean and standard deviation of the Rician coefficients."""
    return math.sqrt(k / (2.0 * (k + 1.0))), math.sqrt(1.0 / (2.0 * (k + 1.0)))


def sample_csi(topology, fading=RAYLEIGH, config=None, rng_seed=0):
    """Draw a CSI tensor of shape ``(M, M, R, T)`` for a fixed topology."""
    if config is None:
        config = NetworkConfig(M=topology.M)
    if topology.M != config.M:
        raise ValueError(f"topology has {topology.M} pairs, config expects {config.M}")
    if isinstance(fading, str):
        fading = FadingSpec.parse(fading)
    rng = _rng(rng_seed)
    shape = (config.M, config.M, config.R, config.T)
    scale = path_factor(topology.distances)[:, :, None, None]
    if fading.kind == "rayleigh":
        a = rng.standard_normal(shape)
        b = rng.standard_normal(shape)
        return (a + 1j * b) * (scale / math.sqrt(2.0))
    mu, sd = rician_params(fading.k_factor)
    a = rng.normal(mu, sd, size=shape)
    b = rng.normal(mu, sd, size=shape)
    return (a + 1j * b) * scale


def sample_network(config, fading=RAYLEIGH, spatial=UNIFORM, rng_seed=0):
    """Topology and CSI from a single stream."""
    rng = _rng(rng_seed)
    topo = sample_topology(config.M, spatial, rng)
    return sample_csi(topo, fading, config, rng)


def sample_dataset(config, n, fading=RAYLEIGH, spatial=UNIFORM, seed=0, start=0):
    """``n`` CSI tensors stacked as ``(n, M, M, R, T)``; sample k uses stream ``(seed, start + k)``."""
    out = np.empty((n,) + config.shape, dtype=np.complex128)
    for k in range(n):
        out[k] = sample_network(config, fading, spatial, sample_rng(seed, start + k))
    return out


def distort_csi(H, rate, sigma_r, rng_seed=0):
    """Add complex Gaussian noise to a random subset of the coefficients.

    Exactly ``floor(rate * H.size)`` coefficients (chosen uniformly without
    replacement) receive ``c + 1j * d`` with ``c, d ~ N(0, sigma_r)``
    (``sigma_r`` is a standard deviation).  The other entries are untouched.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if sigma_r < 0:
        raise ValueError("sigma_r must be >= 0")
    H = np.asarray(H, dtype=np.complex128)
    out = H.copy()
    count = int(math.floor(rate * H.size + 1e-9))
    if count == 0 or sigma_r == 0:
        return out
    rng = _rng(rng_seed)
    idx = rng.choice(H.size, size=count, replace=False)
    noise = rng.normal(0.0, sigma_r, size=count) + 1j * rng.normal(0.0, sigma_r, size=count)
    flat = out.reshape(-1)
    flat[idx] += noise
    return out


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

MAGIC = b"UWMM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ")


class DatasetFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def save_dataset(path, tensors, d=1):
    """Write CSI tensors to ``path``.

    Layout: ``b"UWMM"``, version u32, M, R, T, d as u32, count u64 (all
    little endian), then every tensor in row-major order as pairs of
    little-endian float64 (real, imaginary).
    """
    tensors = [np.asarray(t, dtype=np.complex128) for t in tensors]
    if tensors:
        shape = tensors[0].shape
        if len(shape) != 4 or shape[0] != shape[1]:
            raise ValueError(f"expected (M, M, R, T) tensors, got {shape}")
        for t in tensors:
            if t.shape != shape:
                raise ValueError("all tensors in a dataset must share one shape")
        M, _, R, T = shape
    else:
        M = R = T = 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, M, R, T, d, len(tensors)))
        for t in tensors:
            fh.write(np.ascontiguousarray(t).astype("<c16").tobytes())


def load_dataset(path):
    """Read a dataset written by :func:`save_dataset`; returns a list of arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise DatasetFormatError("truncated header", len(data))
    magic, version, M, R, T, d, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}", 4)
    per = M * M * R * T * 16
    expected = _HEADER.size + per * count
    if count and per == 0:
        raise DatasetFormatError("zero-sized samples with nonzero count", 8)
    if len(data) < expected:
        offset = _HEADER.size + per * ((len(data) - _HEADER.size) // per if per else 0)
        raise DatasetFormatError(f"truncated payload: expected {expected} bytes, found {len(data)}", offset)
    if len(data) > expected:
        raise DatasetFormatError("trailing bytes after payload", expected)
    out = []
    for k in range(count):
        start = _HEADER.size + k * per
        arr = np.frombuffer(data, dtype="<c16", count=M * M * R * T, offset=start)
        out.append(arr.astype(np.complex128).reshape(M, M, R, T))
    return out


@dataclass(frozen=True)
class ChannelSource:
    """Deterministic supply of CSI batches for one experiment.

    Sample ``k`` of stream ``name`` always comes from ``SeedSequence([seed',
    k])`` where ``seed'`` mixes ``seed`` with ``name``, so batches are
    reproducible and distinct streams never overlap.
    """

    config: NetworkConfig = NetworkConfig()
    fading: FadingSpec = RAYLEIGH
    spatial: SpatialSpec = UNIFORM
    seed: int = 0

    def stream_seed(self, name):
        return derive_seed(self.seed, name)

    def draw(self, n, name="train", start=0):
        return sample_dataset(self.config, n, self.fading, self.spatial, self.stream_seed(name), start)


def derive_seed(seed, purpose):
    """Stable 63-bit seed from ``(seed, purpose)``: first 8 bytes of SHA-256 of ``"<seed>:<purpose>"``."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
