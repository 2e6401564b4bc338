"""Experiment harness: algorithm comparison, generalisation sweeps, the
weight/power F1 study, CSI-distortion robustness, timing and equivariance.

Every experiment returns an :class:`ExperimentResult` whose rows share one
schema and can be written as CSV; aggregates and run metadata go to a JSON
summary.  Sum-rates are normalised by the sum-rate of WMMSE(100) on the
identical CSI sample.

Emitted beamformers (every layer or sweep) can be routed through a
:class:`PowerAudit`, which keeps the largest per-node power ratio seen.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import csv
import json
import math
import threading
import time

import numpy as np

from .channel import RAYLEIGH, ChannelSource, NetworkConfig, SpatialSpec, derive_seed, distort_csi
from .model import forward
from .wmmse import SolverOptions, run_wmmse, sum_rate

__all__ = [
    "ROW_FIELDS",
    "WMMSE",
    "TR_WMMSE",
    "ExperimentResult",
    "PowerAudit",
    "uwmmse_name",
    "f1_score",
    "compare_algorithms",
    "generalization_sweep",
    "spatial_generalization",
    "convergence_f1",
    "robustness_sweep",
    "timing_benchmark",
    "equivariance_test",
    "plot_result",
]

ROW_FIELDS = (
    "experiment",
    "sample",
    "algorithm",
    "M",
    "fading",
    "param",
    "sum_rate",
    "normalized_sum_rate",
    "wall_time",
)

WMMSE = "WMMSE(100)"
TR_WMMSE = "Tr-WMMSE(3)"
WMMSE_ITERS = 100
TRUNCATED_ITERS = 3


def uwmmse_name(K):
    return f"UWMMSE({K})"


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    experiment: str
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, **row):
        missing = set(ROW_FIELDS) - set(row) - {"experiment"}
        if missing:
            raise ValueError(f"row is missing {sorted(missing)}")
        self.rows.append({"experiment": self.experiment, **row})

    def select(self, **match):
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def values(self, column, **match):
        return np.array([r[column] for r in self.select(**match)], dtype=float)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROW_FIELDS)
            for r in self.rows:
                w.writerow([_cell(r[k]) for k in ROW_FIELDS])

    def summary(self, config=None):
        return {"experiment": self.experiment, "config": config or {}, "aggregates": self.aggregates, "meta": self.meta}

    def write_json(self, path, config=None):
        with open(path, "w") as fh:
            json.dump(_jsonable(self.summary(config)), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def mean_and_stderr(values):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"mean": float("nan"), "stderr": float("nan"), "n": 0}
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return {"mean": float(np.mean(v)), "stderr": se, "n": int(v.size)}


class PowerAudit:
    """Largest per-node ``Tr(V_i V_i^H) / Pmax`` over everything recorded."""

    def __init__(self, pmax=1.0):
        self.pmax = pmax
        self.max_ratio = 0.0
        self.count = 0
        self.worst = None
        self._lock = threading.Lock()

    def record(self, label, V):
        V = np.asarray(V)
        power = np.sum(np.abs(V) ** 2, axis=(-2, -1))
        ratio = float(np.max(power)) / self.pmax
        with self._lock:
            self.count += power.size
            if ratio > self.max_ratio:
                self.max_ratio, self.worst = ratio, label

    def ok(self, tol=1e-9):
        return self.max_ratio <= 1.0 + tol


# ---------------------------------------------------------------------------
# Algorithm runners (one CSI sample each)
# ---------------------------------------------------------------------------


def _wmmse_opts(iters, exact=False):
    return SolverOptions(max_iters=iters, early_exit=not exact)


def _run_classical(H, iters, net, audit=None, label="", exact=False):
    res = run_wmmse(H, net.sigma, net.Pmax, _wmmse_opts(iters, exact), trace=audit is not None)
    if audit is not None:
        for k, st in enumerate(res.states):
            audit.record(f"{label} sweep {k + 1}", st["V"])
    return res.V


def _run_uwmmse(H, params, K, net, audit=None, label=""):
    V, traces = forward(H, params, K, sigma=net.sigma, pmax=net.Pmax, trace=audit is not None)
    if audit is not None:
        for k, tr in enumerate(traces):
            audit.record(f"{label} layer {k + 1}", tr.V)
    return np.asarray(V)


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, max(time.perf_counter() - t0, 1e-12)


def _map(fn, items, threads):
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _rate(H, V, net):
    return float(sum_rate(H, V, net.sigma, net.alpha))


def _fading_name(fading):
    return str(fading)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def compare_algorithms(testset, params, K_infer=3, net=None, *, fading=RAYLEIGH, bins=20, threads=None, audit=None):
    """WMMSE(100), Tr-WMMSE(3) and UWMMSE(K_infer) on each test sample.

    A sample on which an algorithm raises is recorded with a missing
    (NaN) sum-rate.  ``meta['histogram']`` holds shared bin edges and the
    per-algorithm counts of per-sample sum-rates.
    """
    testset = np.asarray(testset)
    if len(testset) == 0:
        raise ValueError("testset is empty")
    net = net or NetworkConfig(M=testset.shape[1], R=testset.shape[3], T=testset.shape[4])
    U_NAME = uwmmse_name(K_infer)
    runners = (
        (WMMSE, lambda H, lab: _run_classical(H, WMMSE_ITERS, net, audit, lab)),
        (TR_WMMSE, lambda H, lab: _run_classical(H, TRUNCATED_ITERS, net, audit, lab)),
        (U_NAME, lambda H, lab: _run_uwmmse(H, params, K_infer, net, audit, lab)),
    )

    def work(k):
        H = testset[k]
        out = []
        for name, run in runners:
            try:
                V, t = _timed(run, H, f"compare sample {k} {name}")
                out.append((name, _rate(H, V, net), t))
            except (ArithmeticError, RuntimeError, ValueError):
                out.append((name, float("nan"), float("nan")))
        return out

    res = ExperimentResult("compare", meta={"K_infer": K_infer, "n_samples": len(testset)})
    for k, out in enumerate(_map(work, range(len(testset)), threads)):
        ref = out[0][1]
        for name, sr, t in out:
            res.add(
                sample=k, algorithm=name, M=net.M, fading=_fading_name(fading), param=None,
                sum_rate=sr, normalized_sum_rate=sr / ref, wall_time=t,
            )
    names = [n for n, _ in runners]
    for name in names:
        res.aggregates[name] = {
            "sum_rate": mean_and_stderr(res.values("sum_rate", algorithm=name)),
            "normalized_sum_rate": mean_and_stderr(res.values("normalized_sum_rate", algorithm=name)),
            "wall_time": mean_and_stderr(res.values("wall_time", algorithm=name)),
        }
    every = res.values("sum_rate")
    every = every[np.isfinite(every)]
    if every.size:
        edges = np.histogram_bin_edges(every, bins=bins)
        res.meta["histogram"] = {
            "edges": edges,
            "counts": {n: np.histogram(_finite(res.values("sum_rate", algorithm=n)), bins=edges)[0] for n in names},
        }
    return res


def _finite(v):
    return v[np.isfinite(v)]


def generalization_sweep(params, sizes, fading=RAYLEIGH, source=None, n_samples=100, K_infer=3, *, threads=None, audit=None):
    """Per network size, UWMMSE and Tr-WMMSE normalised by WMMSE(100) on fresh samples."""
    source = source or ChannelSource()
    res = ExperimentResult("generalize", meta={"K_infer": K_infer, "fading": str(fading), "n_samples": n_samples})
    U_NAME = uwmmse_name(K_infer)
    for M in sizes:
        net = source.config.with_size(int(M))
        sub = replace(source, config=net, fading=fading)
        data = sub.draw(n_samples, f"generalize:{M}")

        def work(k, data=data, net=net, M=M):
            H = data[k]
            ref = _rate(H, _run_classical(H, WMMSE_ITERS, net, audit, f"M={M} sample {k} {WMMSE}"), net)
            rows = []
            for name, run in (
                (U_NAME, lambda: _run_uwmmse(H, params, K_infer, net, audit, f"M={M} sample {k} {U_NAME}")),
                (TR_WMMSE, lambda: _run_classical(H, TRUNCATED_ITERS, net, audit, f"M={M} sample {k} {TR_WMMSE}")),
            ):
                V, t = _timed(run)
                sr = _rate(H, V, net)
                rows.append((name, sr, sr / ref, t))
            return rows

        for k, rows in enumerate(_map(work, range(n_samples), threads)):
            for name, sr, nsr, t in rows:
                res.add(sample=k, algorithm=name, M=int(M), fading=str(fading), param=None,
                        sum_rate=sr, normalized_sum_rate=nsr, wall_time=t)
        res.aggregates[str(M)] = {
            name: mean_and_stderr(res.values("normalized_sum_rate", algorithm=name, M=int(M)))
            for name in (U_NAME, TR_WMMSE)
        }
    return res


def spatial_generalization(params, stddevs, source=None, n_samples=100, K_infer=3, *, threads=None, audit=None):
    """UWMMSE on Gaussian-placed networks, normalised by WMMSE(100) per sample."""
    source = source or ChannelSource()
    net = source.config
    U_NAME = uwmmse_name(K_infer)
    res = ExperimentResult("spatial", meta={"K_infer": K_infer, "n_samples": n_samples})
    for s in stddevs:
        sub = replace(source, spatial=SpatialSpec.gaussian(s))
        data = sub.draw(n_samples, f"spatial:{float(s)!r}")

        def work(k, data=data, s=s):
            H = data[k]
            ref = _rate(H, _run_classical(H, WMMSE_ITERS, net, audit, f"stddev={s} sample {k} {WMMSE}"), net)
            V, t = _timed(_run_uwmmse, H, params, K_infer, net, audit, f"stddev={s} sample {k} {U_NAME}")
            sr = _rate(H, V, net)
            return sr, sr / ref, t

        for k, (sr, nsr, t) in enumerate(_map(work, range(n_samples), threads)):
            res.add(sample=k, algorithm=U_NAME, M=net.M, fading=str(source.fading), param=float(s),
                    sum_rate=sr, normalized_sum_rate=nsr, wall_time=t)
        res.aggregates[repr(float(s))] = mean_and_stderr(res.values("normalized_sum_rate", param=float(s)))
    return res


def f1_score(prediction, truth):
    """Binary F1 of boolean vectors; 0 when precision + recall is 0."""
    pred = np.asarray(prediction, dtype=bool)
    true = np.asarray(truth, dtype=bool)
    tp = np.sum(pred & true)
    precision = tp / pred.sum() if pred.sum() else 0.0
    recall = tp / true.sum() if true.sum() else 0.0
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def _weight_norms(W):
    return np.sqrt(np.sum(np.abs(np.asarray(W)) ** 2, axis=(-2, -1)))


def _f1_trajectory(weights, V_final, w_threshold, p_threshold):
    truth = _weight_norms(V_final) > p_threshold
    return [f1_score(_weight_norms(W) > w_threshold, truth) for W in weights]


def convergence_f1(params, testset, w_threshold=1.0, p_threshold=None, K=3, net=None,
                   wmmse_iters=(1, 2, 3, 50, 100), *, threads=None, audit=None):
    """Agreement between thresholded weight norms and the final power allocation.

    Truth per sample is ``||V_i||_F > p_threshold`` for the method's own final
    beamformers (UWMMSE layer ``K``; WMMSE sweep ``max(wmmse_iters)``, run
    without early exit).  Prediction at layer / sweep ``k`` is
    ``||W_i||_F > w_threshold`` with the learned weights for UWMMSE and the
    classical weights for WMMSE.  Returns ``{'uwmmse': [F1 per layer],
    'wmmse': {sweep: F1}}`` averaged over samples, plus the thresholds.
    """
    testset = np.asarray(testset)
    if len(testset) == 0:
        raise ValueError("testset is empty")
    net = net or NetworkConfig(M=testset.shape[1], R=testset.shape[3], T=testset.shape[4])
    if net.d != 1:
        raise ValueError("the F1 study is defined for d = 1")
    p_threshold = math.sqrt(net.Pmax) / 2 if p_threshold is None else p_threshold
    n_iters = max(wmmse_iters)

    def work(k):
        H = testset[k]
        V, traces = forward(H, params, K, sigma=net.sigma, pmax=net.Pmax, trace=True)
        wm = run_wmmse(H, net.sigma, net.Pmax, _wmmse_opts(n_iters, exact=True), trace=True)
        if audit is not None:
            for j, tr in enumerate(traces):
                audit.record(f"f1 sample {k} UWMMSE layer {j + 1}", tr.V)
            for j, st in enumerate(wm.states):
                audit.record(f"f1 sample {k} WMMSE sweep {j + 1}", st["V"])
        u = _f1_trajectory([tr.W for tr in traces], V, w_threshold, p_threshold)
        w = _f1_trajectory([wm.states[i - 1]["W_hat"] for i in wmmse_iters], wm.V, w_threshold, p_threshold)
        return u, w

    out = _map(work, range(len(testset)), threads)
    u = np.mean([o[0] for o in out], axis=0)
    w = np.mean([o[1] for o in out], axis=0)
    return {
        "uwmmse": [float(x) for x in u],
        "wmmse": {int(i): float(x) for i, x in zip(wmmse_iters, w)},
        "w_threshold": float(w_threshold),
        "p_threshold": float(p_threshold),
        "n_samples": len(testset),
    }


def robustness_sweep(params, rates, sigma_r, testset, K_infer=3, net=None, seed=0, *, threads=None, audit=None):
    """UWMMSE and WMMSE(100) run on distorted CSI, scored on the clean CSI.

    Normalisation is by WMMSE(100) on the clean sample.  Sample ``k`` uses
    one distortion seed at every rate.
    """
    testset = np.asarray(testset)
    if len(testset) == 0:
        raise ValueError("testset is empty")
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise ValueError("rates must lie in [0, 1]")
    net = net or NetworkConfig(M=testset.shape[1], R=testset.shape[3], T=testset.shape[4])
    U_NAME = uwmmse_name(K_infer)
    res = ExperimentResult("robustness", meta={"sigma_r": sigma_r, "K_infer": K_infer, "n_samples": len(testset)})

    def work(k):
        H = testset[k]
        ref = _rate(H, _run_classical(H, WMMSE_ITERS, net, audit, f"robustness sample {k} clean"), net)
        clean = _rate(H, _run_uwmmse(H, params, K_infer, net, audit, f"robustness sample {k} clean"), net)
        rows = []
        dseed = derive_seed(seed, f"distortion:{k}")
        for r in rates:
            Hd = distort_csi(H, r, sigma_r, dseed)
            for name, run in (
                (U_NAME, lambda: _run_uwmmse(Hd, params, K_infer, net, audit, f"rate={r} sample {k} {U_NAME}")),
                (WMMSE, lambda: _run_classical(Hd, WMMSE_ITERS, net, audit, f"rate={r} sample {k} {WMMSE}")),
            ):
                V, t = _timed(run)
                sr = _rate(H, V, net)
                rows.append((name, float(r), sr, sr / ref, t))
        return clean, rows

    cleans = []
    for k, (clean, rows) in enumerate(_map(work, range(len(testset)), threads)):
        cleans.append(clean)
        for name, r, sr, nsr, t in rows:
            res.add(sample=k, algorithm=name, M=net.M, fading="", param=r,
                    sum_rate=sr, normalized_sum_rate=nsr, wall_time=t)
    res.meta["uwmmse_clean_sum_rate"] = cleans
    for name in (U_NAME, WMMSE):
        res.aggregates[name] = {
            repr(float(r)): mean_and_stderr(res.values("normalized_sum_rate", algorithm=name, param=float(r)))
            for r in rates
        }
    return res


def timing_benchmark(testset, params, K_infer=3, net=None, *, audit=None):
    """Mean per-sample wall time of WMMSE(100), Tr-WMMSE(3) and UWMMSE(K_infer).

    Runs single-threaded; the first sample only warms caches and JIT and is
    excluded.  WMMSE(100) runs all 100 sweeps (no early exit).
    """
    testset = np.asarray(testset)
    if len(testset) == 0:
        raise ValueError("testset is empty")
    net = net or NetworkConfig(M=testset.shape[1], R=testset.shape[3], T=testset.shape[4])
    U_NAME = uwmmse_name(K_infer)
    runners = (
        (WMMSE, lambda H: _run_classical(H, WMMSE_ITERS, net, exact=True)),
        (TR_WMMSE, lambda H: _run_classical(H, TRUNCATED_ITERS, net, exact=True)),
        (U_NAME, lambda H: _run_uwmmse(H, params, K_infer, net)),
    )
    res = ExperimentResult("timing", meta={"K_infer": K_infer, "warmup_samples": 1})
    for k, H in enumerate(testset):
        for name, run in runners:
            V, t = _timed(run, H)
            if audit is not None:
                audit.record(f"timing sample {k} {name}", V)
            if k == 0:
                continue
            sr = _rate(H, V, net)
            res.add(sample=k, algorithm=name, M=net.M, fading="", param=None,
                    sum_rate=sr, normalized_sum_rate=float("nan"), wall_time=t)
    for k in range(1, len(testset)):
        ref = res.select(sample=k, algorithm=WMMSE)[0]["sum_rate"]
        for r in res.select(sample=k):
            r["normalized_sum_rate"] = r["sum_rate"] / ref
    if len(testset) == 1:  # nothing left after warm-up: time the single sample again
        H = testset[0]
        for name, run in runners:
            V, t = _timed(run, H)
            res.add(sample=0, algorithm=name, M=net.M, fading="", param=None,
                    sum_rate=_rate(H, V, net), normalized_sum_rate=float("nan"), wall_time=t)
    res.aggregates = {name: mean_and_stderr(res.values("wall_time", algorithm=name)) for name, _ in runners}
    return res


def equivariance_test(params, M, trials, rng=0, K=3, net=None):
    """Max over trials of ``||f(P H P^T) - P f(H)||_F / ||f(H)||_F``.

    Each trial draws a fresh CSI sample and a uniform random node
    permutation.  Returns ``(max deviation, per-trial deviations)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    net = (net or NetworkConfig()).with_size(int(M))
    gen = np.random.default_rng(rng)
    data = ChannelSource(net, seed=int(gen.integers(2 ** 62))).draw(trials, "equivariance")
    devs = []
    for H in data:
        perm = gen.permutation(M)
        V, _ = forward(H, params, K, sigma=net.sigma, pmax=net.Pmax)
        Vp, _ = forward(H[perm][:, perm], params, K, sigma=net.sigma, pmax=net.Pmax)
        V = np.asarray(V)
        devs.append(float(np.linalg.norm(np.asarray(Vp) - V[perm]) / np.linalg.norm(V)))
    return max(devs), devs


# ---------------------------------------------------------------------------
# Plots (vector graphics from CSV rows)
# ---------------------------------------------------------------------------


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_result(csv_path, svg_path, title=None):
    """Standalone SVG built from an experiment CSV.

    Rows with a ``param`` column are drawn as mean normalised sum-rate
    versus the parameter (or versus ``M`` for size sweeps); otherwise a
    histogram of per-sample sum-rates per algorithm.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_rows(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    algs = sorted({r["algorithm"] for r in rows})
    experiment = rows[0]["experiment"] if rows else ""
    x_key = "M" if experiment == "generalize" else "param"
    for alg in algs:
        sel = [r for r in rows if r["algorithm"] == alg and r["sum_rate"] not in ("", "nan")]
        if any(r[x_key] for r in sel) and experiment != "compare":
            xs = sorted({float(r[x_key]) for r in sel})
            ys = [np.nanmean([float(r["normalized_sum_rate"]) for r in sel if float(r[x_key]) == x]) for x in xs]
            ax.plot(xs, ys, marker="o", label=alg)
            ax.set_xlabel("network size" if x_key == "M" else "parameter")
            ax.set_ylabel("normalized sum-rate")
        else:
            ax.hist([float(r["sum_rate"]) for r in sel], bins=20, alpha=0.5, label=alg)
            ax.set_xlabel("sum-rate (bits/s/Hz)")
            ax.set_ylabel("samples")
    ax.set_title(title or experiment)
    if algs:
        ax.legend()
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
