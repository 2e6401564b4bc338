"""Unsupervised training of the unfolded network.

The loss is the negative mean sum-rate of a minibatch after ``K_train``
layers.  Gradients come from one tape per minibatch (all samples share the
leading batch axis); if the batched forward hits a singular system the
step falls back to per-sample tapes and drops the failing samples.
"""

from dataclasses import dataclass, field
import csv
import logging
import math

import numpy as np

from . import autodiff as ad
from . import linalg
from .channel import ChannelSource
from .model import ModelParams, forward, load_checkpoint, save_checkpoint
from .wmmse import TRANSPOSED, sum_rate

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "StepError",
    "Adam",
    "NovoGrad",
    "loss",
    "batch_loss_and_grad",
    "evaluate",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

_FORWARD_ERRORS = (linalg.SingularMatrixError, linalg.DomainError, FloatingPointError)


class StepError(RuntimeError):
    """Every sample of a minibatch failed in the forward pass."""


@dataclass(frozen=True)
class TrainConfig:
    K_train: int = 1
    K_infer: int = 3
    batch_size: int = 16
    max_steps: int = 2000
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    eval_every: int = 100
    patience: int = 10
    val_size: int = 128
    F: int = 32
    G: int = 16
    mu_init: float = 0.1
    convention: str = TRANSPOSED

    def __post_init__(self):
        for name in ("K_train", "K_infer", "batch_size", "eval_every", "patience", "val_size", "F", "G"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "novograd"):
            raise ValueError("optimizer must be 'adam' or 'novograd'")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)  # one per executed step
    val_steps: list = field(default_factory=list)
    val_sum_rate: list = field(default_factory=list)
    best_step: int = 0
    best_val: float = -math.inf
    diverged: bool = False
    dropped_samples: int = 0

    @property
    def steps(self):
        return len(self.train_loss)

    def rows(self):
        vals = dict(zip(self.val_steps, self.val_sum_rate))
        last = max([self.steps - 1] + self.val_steps)
        for s in range(last + 1):
            tl = self.train_loss[s] if s < self.steps else None
            yield s, tl, vals.get(s)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "train_loss", "val_sum_rate"])
            for s, tl, v in self.rows():
                w.writerow([s, "" if tl is None else repr(float(tl)), "" if v is None else repr(float(v))])


# ---------------------------------------------------------------------------
# Optimisers (on stacked real/imaginary coordinates)
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        out = {}
        for name, p in params.as_dict().items():
            g = np.asarray(grads[name])
            g2 = g.real ** 2 + 1j * g.imag ** 2  # per-coordinate squares
            m = self.m.get(name, 0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0) * self.beta2 + (1 - self.beta2) * g2
            self.m[name], self.v[name] = m, v
            mh = m / (1 - self.beta1 ** self.t)
            vh = v / (1 - self.beta2 ** self.t)
            upd = mh.real / (np.sqrt(vh.real) + self.eps) + 1j * mh.imag / (np.sqrt(vh.imag) + self.eps)
            out[name] = np.asarray(p) - self.lr * upd
        return params.replace_arrays(out)


class NovoGrad:
    """Layer-wise second moments: one scalar per parameter block."""

    def __init__(self, lr=1e-2, beta1=0.95, beta2=0.98, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        out = {}
        for name, p in params.as_dict().items():
            g = np.asarray(grads[name])
            norm2 = float(np.sum(g.real ** 2 + g.imag ** 2))
            v = norm2 if name not in self.v else self.beta2 * self.v[name] + (1 - self.beta2) * norm2
            self.v[name] = v
            scaled = g / (math.sqrt(v) + self.eps)
            m = scaled if name not in self.m else self.beta1 * self.m[name] + scaled
            self.m[name] = m
            out[name] = np.asarray(p) - self.lr * m
        return params.replace_arrays(out)


def make_optimizer(config):
    cls = Adam if config.optimizer == "adam" else NovoGrad
    return cls(lr=config.learning_rate)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _rates(H, params, K, sigma, pmax, convention):
    V, _ = forward(H, params, K, sigma=sigma, pmax=pmax, convention=convention)
    return sum_rate(H, V, sigma)


def loss(H_batch, params, K, *, sigma, pmax=1.0, convention=TRANSPOSED):
    """Negative mean sum-rate over a batch ``(B, M, M, R, T)`` (a tape variable when params are)."""
    H_batch = np.asarray(H_batch)
    if H_batch.ndim == 4:
        H_batch = H_batch[None]
    if H_batch.shape[0] == 0:
        raise ValueError("batch is empty")
    rates = _rates(H_batch, params, K, sigma, pmax, convention)
    return ad.neg(ad.scale(ad.sum(rates), 1.0 / H_batch.shape[0]))


def batch_loss_and_grad(H_batch, params, K, *, sigma, pmax=1.0, convention=TRANSPOSED):
    """``(loss value, GradientSet, kept sample count)`` for one minibatch.

    Samples whose forward pass fails (singular system) are dropped from the
    mean with a warning; a batch with no surviving sample raises
    :class:`StepError`.
    """

    def program(H, p):
        return loss(H, p, K, sigma=sigma, pmax=pmax, convention=convention)

    try:
        tape, out = ad.record_forward(program, H_batch, params)
        return float(ad.value(out)), ad.backward(tape, out), len(H_batch)
    except _FORWARD_ERRORS as exc:
        log.warning("batched forward failed (%s); retrying per sample", exc)
    total = None
    value = 0.0
    kept = 0
    for k, H in enumerate(H_batch):
        try:
            tape, out = ad.record_forward(program, H[None], params)
        except _FORWARD_ERRORS as exc:
            log.warning("dropping sample %d from the batch: %s", k, exc)
            continue
        g = ad.backward(tape, out)
        total = g if total is None else total + g
        value += float(ad.value(out))
        kept += 1
    if kept == 0:
        raise StepError("every sample in the batch failed in the forward pass")
    return value / kept, total * (1.0 / kept), kept


def evaluate(H, params, K, *, sigma, pmax=1.0, convention=TRANSPOSED):
    """Per-sample sum-rates (no tape); failing samples give NaN."""
    H = np.asarray(H)
    try:
        return np.asarray(_rates(H, params, K, sigma, pmax, convention))
    except _FORWARD_ERRORS:
        out = np.full(len(H), np.nan)
        for k in range(len(H)):
            try:
                out[k] = float(_rates(H[k], params, K, sigma, pmax, convention))
            except _FORWARD_ERRORS:
                pass
        return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(config, source=None, rng=0, params=None, progress=None):
    """Train from a fresh (or given) parameter set; returns ``(best params, history)``.

    Minibatch ``s`` holds samples ``s*B .. s*B+B-1`` of the source's
    ``train`` stream; the validation set is the first ``val_size`` samples
    of its ``validation`` stream.  Validation (mean sum-rate at ``K_train``
    layers) runs before the first step, every ``eval_every`` steps and after
    the last one.  Training stops after ``patience`` evaluations without
    improvement, or on a non-finite loss or gradient (``history.diverged``).
    """
    source = source or ChannelSource()
    net = source.config
    if params is None:
        init_rng = np.random.default_rng(np.random.SeedSequence([int(rng), 1]))
        params = ModelParams.init(net.R, net.T, net.d, config.F, config.G, init_rng, mu=config.mu_init)
    params = params.copy()
    hist = TrainHistory()
    if config.max_steps == 0:
        return params, hist
    opt = make_optimizer(config)
    val_H = source.draw(config.val_size, "validation")
    kw = dict(sigma=net.sigma, pmax=net.Pmax, convention=config.convention)

    best = params.copy()
    stale = 0

    def validate(step, p):
        nonlocal best, stale
        score = float(np.nanmean(evaluate(val_H, p, config.K_train, **kw)))
        hist.val_steps.append(step)
        hist.val_sum_rate.append(score)
        if score > hist.best_val:
            hist.best_val, hist.best_step = score, step
            best = p.copy()
            stale = 0
        else:
            stale += 1
        if progress:
            progress(step, score)
        return stale >= config.patience

    for step in range(config.max_steps):
        if step % config.eval_every == 0 and validate(step, params):
            break
        H = source.draw(config.batch_size, "train", start=step * config.batch_size)
        try:
            value, grads, kept = batch_loss_and_grad(H, params, config.K_train, **kw)
        except StepError:
            hist.diverged = True
            log.error("step %d: no sample survived the forward pass", step)
            break
        hist.dropped_samples += len(H) - kept
        hist.train_loss.append(value)
        if not (math.isfinite(value) and grads.all_finite()):
            hist.diverged = True
            log.error("step %d: non-finite loss or gradient, stopping", step)
            break
        params = opt.step(params, grads)
    else:
        validate(config.max_steps, params)
    return best, hist
