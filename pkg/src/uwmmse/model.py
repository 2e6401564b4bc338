"""Unfolded WMMSE network.

Each layer runs the classical receive-filter and weight updates, then
corrects the weights with a per-node complex MLP whose parameters are
produced by a two-layer complex graph convolution over a learned channel
compression, and finally solves the beamformer system with a trainable
multiplier followed by power saturation.  One parameter set is shared by
all layers, so a model trained with one layer runs unchanged with more.

All functions accept an optional leading sample axis on ``H`` and work on
arrays or tape variables alike.
"""

from dataclasses import dataclass, field, fields
import hashlib
import math

import numpy as np

from . import autodiff as ad
from . import linalg
from .channel import DEFAULT_PMAX, DEFAULT_SIGMA, NetworkConfig
from .wmmse import (
    PAPER,
    TRANSPOSED,
    _insert_axis,
    initial_beamformers,
    saturate,
    update_u,
    update_v_fixed_mu,
    update_w_hat,
)

__all__ = [
    "ModelParams",
    "LayerTrace",
    "UnsupportedConfigurationError",
    "CheckpointError",
    "gamma_transform",
    "build_features",
    "psi_gcn",
    "phi_mlp",
    "mlp_size",
    "pack_mlp",
    "unpack_mlp",
    "update_v_unfolded",
    "beta_saturate",
    "forward",
    "theorem1_residual",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
]

PARAM_NAMES = ("theta11", "theta12", "theta21", "theta22", "omega", "mu")


class UnsupportedConfigurationError(ValueError):
    pass


def mlp_size(G, d=1):
    """Length of one node's flattened MLP parameter vector (weights and biases)."""
    return (G * d * d + G) + (d * d * G + d * d)


def _glorot(rng, shape, fan_in, fan_out):
    sd = math.sqrt(1.0 / (fan_in + fan_out))
    return rng.normal(0.0, sd, shape) + 1j * rng.normal(0.0, sd, shape)


@dataclass
class ModelParams:
    """Trainable parameters plus the hyperparameters that fix their shapes.

    ``theta11``/``theta12`` are ``F x F'`` and ``theta21``/``theta22`` are
    ``P x F`` (``F' = R + T`` feature width, ``P`` the per-node MLP size);
    ``omega`` is ``R x T`` and ``mu`` a complex scalar.  Array fields may
    hold tape variables while a forward pass is being recorded.
    """

    theta11: object
    theta12: object
    theta21: object
    theta22: object
    omega: object
    mu: object
    R: int = 3
    T: int = 5
    d: int = 1
    F: int = 32
    G: int = 16

    @property
    def F_in(self):
        return self.R + self.T

    @property
    def P(self):
        return mlp_size(self.G, self.d)

    @property
    def hyper(self):
        return {"R": self.R, "T": self.T, "d": self.d, "F": self.F, "G": self.G, "Fp": self.F_in, "P": self.P}

    @classmethod
    def init(cls, R=3, T=5, d=1, F=32, G=16, rng=None, mu=0.1):
        """Glorot-style complex initialisation (each component with variance ``1/(fan_in+fan_out)``)."""
        if d != 1:
            raise UnsupportedConfigurationError("the unfolded network supports d = 1 only")
        rng = np.random.default_rng(rng)
        Fp = R + T
        P = mlp_size(G, d)
        return cls(
            theta11=_glorot(rng, (F, Fp), Fp, F),
            theta12=_glorot(rng, (F, Fp), Fp, F),
            theta21=_glorot(rng, (P, F), F, P),
            theta22=_glorot(rng, (P, F), F, P),
            omega=_glorot(rng, (R, T), R, T),
            mu=np.array(complex(mu)),
            R=R,
            T=T,
            d=d,
            F=F,
            G=G,
        )

    def as_dict(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace_arrays(self, arrays):
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(arrays)
        return ModelParams(**kw)

    def copy(self):
        return self.replace_arrays({k: np.array(v, dtype=np.complex128) for k, v in self.as_dict().items()})

    def zero_theta(self):
        """Copy with the graph-convolution weights zeroed (the learned weight correction vanishes)."""
        out = self.copy()
        for name in ("theta11", "theta12", "theta21", "theta22"):
            setattr(out, name, np.zeros_like(getattr(out, name)))
        return out

    def validate(self):
        expect = {
            "theta11": (self.F, self.F_in),
            "theta12": (self.F, self.F_in),
            "theta21": (self.P, self.F),
            "theta22": (self.P, self.F),
            "omega": (self.R, self.T),
            "mu": (),
        }
        for name, shape in expect.items():
            a = np.asarray(ad.value(getattr(self, name)))
            if a.shape != shape:
                raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
        return self


@dataclass
class LayerTrace:
    S: np.ndarray
    Q: np.ndarray
    Z: np.ndarray
    Xi: np.ndarray
    U: np.ndarray
    W_hat: np.ndarray
    phi_out: np.ndarray
    W: np.ndarray
    V_bar: np.ndarray
    V: np.ndarray


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def gamma_transform(H, omega, normalize=True):
    """Compress each ``R x T`` block to a scalar: ``S_ij = sum_pq omega_pq H_ij[p, q]``.

    Rows are then scaled to unit L1 magnitude (``eps = 1e-12``), which keeps
    phases and only looks at one row at a time.
    """
    S = ad.sum(ad.mul(H, omega), axis=(-2, -1))
    return ad.row_normalize(S) if normalize else S


def build_features(U, V):
    """Node features ``[U_i, V_i]`` as rows of an ``M x (R + T)`` matrix."""
    su = np.shape(ad.value(U))
    sv = np.shape(ad.value(V))
    if su[-1] != 1 or sv[-1] != 1:
        raise UnsupportedConfigurationError("node features are defined for d = 1 only")
    return ad.concat([ad.reshape(U, su[:-1]), ad.reshape(V, sv[:-1])], axis=-1)


def _graph_conv(S, X, theta_self, theta_nbr):
    """``diag(S) X theta_self^H + S X theta_nbr^H``; the neighbour sum is order-independent."""
    self_gain = ad.reshape(ad.diagonal(S), np.shape(ad.value(S))[:-1] + (1,))
    a = ad.matmul(ad.mul(self_gain, X), ad.adjoint(theta_self))
    SX = ad.node_sum(ad.mul(ad.reshape(S, np.shape(ad.value(S)) + (1,)), _insert_axis(X, 2)), -2)
    b = ad.matmul(SX, ad.adjoint(theta_nbr))
    return ad.add(a, b)


def psi_gcn(S, Q, params, return_hidden=False):
    """Two complex graph-convolution layers with Cartesian ReLU; returns ``M x P`` MLP parameters."""
    Z = ad.crelu(_graph_conv(S, Q, params.theta11, params.theta12))
    Xi = ad.crelu(_graph_conv(S, Z, params.theta21, params.theta22))
    return (Xi, Z) if return_hidden else Xi


def unpack_mlp(xi, G, d=1):
    """Split flattened per-node MLP vectors ``(..., P)`` into ``W1, b1, W2, b2``.

    Order: ``W1`` (``G x d^2``, row-major), ``b1`` (``G``), ``W2``
    (``d^2 x G``, row-major), ``b2`` (``d^2``).
    """
    lead = np.shape(ad.value(xi))[:-1]
    dd = d * d
    cuts = np.cumsum([G * dd, G, dd * G, dd])
    if np.shape(ad.value(xi))[-1] != cuts[-1]:
        raise ValueError(f"expected {cuts[-1]} MLP parameters, got {np.shape(ad.value(xi))[-1]}")
    W1 = ad.reshape(ad.getitem(xi, (Ellipsis, slice(0, cuts[0]))), lead + (G, dd))
    b1 = ad.reshape(ad.getitem(xi, (Ellipsis, slice(cuts[0], cuts[1]))), lead + (G, 1))
    W2 = ad.reshape(ad.getitem(xi, (Ellipsis, slice(cuts[1], cuts[2]))), lead + (dd, G))
    b2 = ad.reshape(ad.getitem(xi, (Ellipsis, slice(cuts[2], cuts[3]))), lead + (dd, 1))
    return W1, b1, W2, b2


def pack_mlp(W1, b1, W2, b2):
    """Inverse of :func:`unpack_mlp` for arrays."""
    lead = np.shape(W1)[:-2]
    parts = [np.reshape(a, lead + (-1,)) for a in (W1, b1, W2, b2)]
    return np.concatenate(parts, axis=-1)


def phi_mlp(xi, W_hat, G):
    """Per-node weight correction; returns ``(phi_out, W_hat + phi_out)``.

    ``phi_out = crelu(W2 crelu(W1 vec(W_hat) + b1) + b2)`` with the MLP
    parameters of node ``i`` read from row ``i`` of ``xi``.
    """
    shape = np.shape(ad.value(W_hat))
    d = shape[-1]
    if d != 1:
        raise UnsupportedConfigurationError("the weight MLP is defined for d = 1 only")
    W1, b1, W2, b2 = unpack_mlp(xi, G, d)
    x = ad.reshape(W_hat, shape[:-2] + (d * d, 1))
    h = ad.crelu(ad.add(ad.matmul(W1, x), b1))
    out = ad.crelu(ad.add(ad.matmul(W2, h), b2))
    phi_out = ad.reshape(out, shape)
    return phi_out, ad.add(W_hat, phi_out)


def update_v_unfolded(H, U, W, mu, convention=TRANSPOSED):
    """Raw beamformers with the trainable multiplier, before saturation."""
    return update_v_fixed_mu(H, U, W, mu, convention)


def beta_saturate(V_bar, pmax=DEFAULT_PMAX):
    return saturate(V_bar, pmax)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def forward(H, params, K, *, sigma=DEFAULT_SIGMA, pmax=DEFAULT_PMAX, trace=False, convention=TRANSPOSED):
    """Run ``K`` unfolded layers from the all-equal start.

    Returns ``(V, traces)``; ``traces`` is a list of :class:`LayerTrace`
    (plain arrays) when ``trace`` is set, otherwise ``None``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    Hs = np.shape(ad.value(H))
    if len(Hs) < 4 or Hs[-4] != Hs[-3]:
        raise linalg.ShapeError(f"expected (..., M, M, R, T) CSI, got {Hs}")
    if (Hs[-2], Hs[-1]) != (params.R, params.T):
        raise linalg.ShapeError(f"CSI antenna shape {Hs[-2:]} does not match parameters ({params.R}, {params.T})")
    V = initial_beamformers(Hs[-3], Hs[-1], params.d, pmax, Hs[:-4])
    S = gamma_transform(H, params.omega)  # layer-invariant: same H and omega
    traces = [] if trace else None
    for _ in range(K):
        U = update_u(H, V, sigma)
        W_hat = update_w_hat(H, U, V)
        Q = build_features(U, V)
        Xi, Z = psi_gcn(S, Q, params, return_hidden=True)
        phi_out, W = phi_mlp(Xi, W_hat, params.G)
        V_bar = update_v_unfolded(H, U, W, params.mu, convention)
        V = beta_saturate(V_bar, pmax)
        if trace:
            traces.append(
                LayerTrace(*(np.array(ad.value(x)) for x in (S, Q, Z, Xi, U, W_hat, phi_out, W, V_bar, V)))
            )
    return V, traces


def theorem1_residual(traces, H, convention=TRANSPOSED):
    """Per-layer, per-node residual of the fixed-point condition for the learned weights.

    For layer ``k`` and node ``i``::

        || A_i^{-1} [ sum_{j != i} G_ji^H U_j (w_j* phi_i - w_i* phi_j) U_j^H G_ji ] C_i^{-1} B_i ||_F

    where ``G_ji`` is the channel from ``i`` to ``j`` (``H[j, i]``; ``H[i, j]``
    under the literal convention), ``A_i`` the layer's beamformer matrix
    built from ``W_hat``, ``C_i`` the same matrix built from the final
    layer's ``U`` and ``W_hat`` (proxies for the optimum), and
    ``B_i = H_ii^H U_i*``.  Singular ``A_i`` or ``C_i`` gives NaN.
    Returns an array ``(K, M)``.
    """
    H = np.asarray(H, dtype=np.complex128)
    if H.ndim != 4:
        raise ValueError("theorem1_residual expects a single CSI sample")
    if traces[-1].U.shape[-1] != 1:
        raise UnsupportedConfigurationError("residual is defined for d = 1 only")
    M = H.shape[0]
    T = H.shape[-1]

    def link(j, i):
        return H[j, i] if convention == TRANSPOSED else H[i, j]

    U_s = traces[-1].U
    w_s = traces[-1].W_hat[:, 0, 0]

    def system(U, w):
        out = np.zeros((M, T, T), dtype=np.complex128)
        for i in range(M):
            for j in range(M):
                g = linalg.adjoint(link(j, i)) @ U[j]
                out[i] += w[j] * (g @ linalg.adjoint(g))
        return out

    C = system(U_s, w_s)
    res = np.full((len(traces), M), np.nan)
    for k, tr in enumerate(traces):
        U = tr.U
        w = tr.W_hat[:, 0, 0]
        phi = tr.phi_out[:, 0, 0]
        A = system(U, w)
        for i in range(M):
            B = linalg.adjoint(H[i, i]) @ U_s[i]
            acc = np.zeros((T, T), dtype=np.complex128)
            for j in range(M):
                if j == i:
                    continue
                g = linalg.adjoint(link(j, i)) @ U[j]
                acc += (w_s[j] * phi[i] - w_s[i] * phi[j]) * (g @ linalg.adjoint(g))
            if not np.any(acc):
                res[k, i] = 0.0
                continue
            try:
                Y = linalg.solve(C[i], B)
                X = linalg.solve(A[i], acc @ Y)
            except linalg.SingularMatrixError:
                continue
            res[k, i] = float(linalg.frob_norm(X))
    return res


def count_parameters(params):
    """Complex parameter counts per block."""
    theta = sum(int(np.size(ad.value(getattr(params, n)))) for n in ("theta11", "theta12", "theta21", "theta22"))
    omega = int(np.size(ad.value(params.omega)))
    mu = int(np.size(ad.value(params.mu)))
    return {"theta": theta, "omega": omega, "mu": mu, "total": theta + omega + mu}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "uwmmse-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _fmt(x):
    return "%.17g" % x


def save_checkpoint(path, params, network=None, K_train=1, meta=None):
    """Write parameters as line-oriented text.

    Layout: a version line, ``network.*`` and ``hyper.*`` key/value lines,
    optional ``meta.*`` lines, then per parameter a ``param <name> <shape>``
    line followed by one ``<real> <imag>`` line per entry (row-major,
    17 significant digits), an ``end`` line and finally
    ``sha256 <hex digest of everything above>``.
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    if network is not None:
        for f in fields(network):
            v = getattr(network, f.name)
            if f.name == "alpha":
                v = "" if v is None else ",".join(_fmt(a) for a in v)
            elif isinstance(v, float):
                v = _fmt(v)
            lines.append(f"network.{f.name} = {v}")
    for k in ("R", "T", "d", "F", "G", "Fp", "P"):
        lines.append(f"hyper.{k} = {params.hyper[k]}")
    lines.append(f"hyper.K_train = {int(K_train)}")
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k} = {v}")
    for name in PARAM_NAMES:
        a = np.asarray(ad.value(getattr(params, name)), dtype=np.complex128)
        shape = " ".join(str(s) for s in a.shape)
        lines.append(f"param {name} {shape}".rstrip())
        lines.extend(f"{_fmt(z.real)} {_fmt(z.imag)}" for z in a.reshape(-1))
    lines.append("end")
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("ascii")).hexdigest()
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(body)
        fh.write(f"sha256 {digest}\n")


def _parse_network(kv):
    if not kv:
        return None
    kw = {}
    for k, v in kv.items():
        if k in ("M", "T", "R", "d"):
            kw[k] = int(v)
        elif k in ("sigma", "Pmax"):
            kw[k] = float(v)
        elif k == "alpha":
            kw[k] = tuple(float(a) for a in v.split(",")) if v else None
    return NetworkConfig(**kw)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(params, info)``.

    ``info`` holds ``network`` (a :class:`NetworkConfig` or ``None``),
    ``K_train`` and the ``meta`` mapping.
    """
    with open(path, "r", encoding="ascii", newline="\n") as fh:
        text = fh.read()
    cut = text.rfind("sha256 ")
    if cut < 0 or not text.endswith("\n"):
        raise CheckpointError("missing integrity hash (file truncated?)")
    body, tail = text[:cut], text[cut:].strip()
    if hashlib.sha256(body.encode("ascii")).hexdigest() != tail.split()[-1]:
        raise CheckpointError("integrity hash mismatch")
    lines = body.splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {head[1]}")
    sections = {"network": {}, "hyper": {}, "meta": {}}
    arrays = {}
    pos = 1
    while pos < len(lines):
        line = lines[pos]
        if line == "end":
            break
        if line.startswith("param "):
            parts = line.split()
            name = parts[1]
            shape = tuple(int(s) for s in parts[2:])
            n = int(np.prod(shape)) if shape else 1
            rows = lines[pos + 1 : pos + 1 + n]
            if len(rows) != n:
                raise CheckpointError(f"parameter {name} is truncated")
            vals = np.array([[float(x) for x in r.split()] for r in rows])
            if vals.shape != (n, 2):
                raise CheckpointError(f"parameter {name} has malformed entries")
            arrays[name] = (vals[:, 0] + 1j * vals[:, 1]).reshape(shape)
            pos += 1 + n
            continue
        key, _, val = line.partition(" = ")
        sec, _, sub = key.partition(".")
        if sec not in sections:
            raise CheckpointError(f"unexpected line {line!r}")
        sections[sec][sub] = val
        pos += 1
    else:
        raise CheckpointError("missing end marker")
    hyper = sections["hyper"]
    try:
        hp = {k: int(hyper[k]) for k in ("R", "T", "d", "F", "G")}
    except KeyError as exc:
        raise CheckpointError(f"missing hyperparameter {exc}") from None
    missing = [n for n in PARAM_NAMES if n not in arrays]
    if missing:
        raise CheckpointError(f"missing parameters {missing}")
    params = ModelParams(**arrays, **hp)
    try:
        params.validate()
    except ValueError as exc:
        raise CheckpointError(f"shape mismatch: {exc}") from None
    info = {
        "network": _parse_network(sections["network"]),
        "K_train": int(hyper.get("K_train", 1)),
        "meta": sections["meta"],
    }
    return params, info
