"""Command-line entry point: ``uwmmse generate | train | eval``.

Configuration is flat ``key = value`` text with ``network.``, ``train.``
and ``eval.`` sections (``#`` starts a comment); ``--override key=value``
replaces single entries.  All randomness derives from one global seed via
:func:`uwmmse.channel.derive_seed`.  Every output directory receives
``resolved_config.txt`` and ``VERSION``.

Exit codes: 0 success, 2 usage or invalid configuration, 3 runtime failure
or training divergence, 4 I/O failure.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from . import experiments as ex
from .channel import (
    ChannelSource,
    DatasetFormatError,
    FadingSpec,
    NetworkConfig,
    SpatialSpec,
    derive_seed,
    load_dataset,
    save_dataset,
)
from .model import CheckpointError, ModelParams, load_checkpoint, save_checkpoint
from .train import TrainConfig, loss, train
from .wmmse import CONVENTIONS

log = logging.getLogger("uwmmse")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

EXPERIMENTS = ("compare", "generalize", "spatial", "convergence", "robustness", "timing", "equivariance", "gradcheck")

# key -> (parser, default); every accepted key is listed here
SCHEMA = {
    "seed": (int, 0),
    "network.M": (int, 10),
    "network.R": (int, 3),
    "network.T": (int, 5),
    "network.d": (int, 1),
    "network.sigma": (float, 2.6e-5),
    "network.Pmax": (float, 1.0),
    "network.alpha": (str, ""),
    "network.fading": (str, "rayleigh"),
    "network.spatial": (str, "uniform"),
    "network.convention": (str, "transposed"),
    "generate.n_samples": (int, 10),
    "generate.file": (str, "dataset.bin"),
    "train.K_train": (int, 1),
    "train.K_infer": (int, 3),
    "train.batch_size": (int, 16),
    "train.max_steps": (int, 2000),
    "train.learning_rate": (float, 1e-2),
    "train.optimizer": (str, "adam"),
    "train.eval_every": (int, 100),
    "train.patience": (int, 10),
    "train.val_size": (int, 128),
    "train.F": (int, 32),
    "train.G": (int, 16),
    "train.mu_init": (float, 0.1),
    "eval.experiment": (str, ""),
    "eval.checkpoint": (str, ""),
    "eval.testset": (str, ""),
    "eval.K_infer": (int, 3),
    "eval.n_samples": (int, 500),
    "eval.sweep_samples": (int, 100),
    "eval.sizes": (str, "10,20,30,40,50"),
    "eval.test_fading": (str, ""),
    "eval.stddevs": (str, "5,10,20,50,100"),
    "eval.rates": (str, "0,0.2,0.4,0.6,0.8,1.0"),
    "eval.sigma_r": (float, 0.001),
    "eval.w_threshold": (float, 1.0),
    "eval.p_threshold": (float, -1.0),  # negative: sqrt(Pmax)/2
    "eval.trials": (int, 100),
    "eval.timing_M": (int, 20),
    "eval.timing_samples": (int, 50),
    "eval.bins": (int, 20),
    "eval.gradcheck_M": (int, 4),
    "eval.gradcheck_coords": (int, 50),
    "eval.gradcheck_inits": (int, 3),
    "eval.gradcheck_precision": (str, "mp"),
}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def parse_config_text(text, origin="<config>"):
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{origin}:{n}: expected key = value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(raw):
    """Validate and type every entry; unknown keys are rejected."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise UsageError(f"unknown configuration keys: {', '.join(unknown)}")
    cfg = {}
    for key, (kind, default) in SCHEMA.items():
        if key not in raw:
            cfg[key] = default
            continue
        try:
            cfg[key] = kind(raw[key])
        except ValueError:
            raise UsageError(f"{key}: cannot parse {raw[key]!r} as {kind.__name__}") from None
    return cfg


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


class RunConfig:
    """Typed view of a resolved configuration, validated up front."""

    def __init__(self, cfg):
        self.raw = cfg
        try:
            alpha = _floats(cfg["network.alpha"]) or None
            self.network = NetworkConfig(
                cfg["network.M"], cfg["network.T"], cfg["network.R"], cfg["network.d"],
                cfg["network.sigma"], cfg["network.Pmax"], alpha,
            )
            self.fading = FadingSpec.parse(cfg["network.fading"])
            self.spatial = SpatialSpec.parse(cfg["network.spatial"])
            self.test_fading = FadingSpec.parse(cfg["eval.test_fading"]) if cfg["eval.test_fading"] else self.fading
            if cfg["network.convention"] not in CONVENTIONS:
                raise ValueError(f"network.convention must be one of {CONVENTIONS}")
            self.train = TrainConfig(
                K_train=cfg["train.K_train"], K_infer=cfg["train.K_infer"], batch_size=cfg["train.batch_size"],
                max_steps=cfg["train.max_steps"], learning_rate=cfg["train.learning_rate"],
                optimizer=cfg["train.optimizer"], eval_every=cfg["train.eval_every"],
                patience=cfg["train.patience"], val_size=cfg["train.val_size"], F=cfg["train.F"],
                G=cfg["train.G"], mu_init=cfg["train.mu_init"], convention=cfg["network.convention"],
            )
            self.sizes = _ints(cfg["eval.sizes"])
            self.stddevs = _floats(cfg["eval.stddevs"])
            self.rates = _floats(cfg["eval.rates"])
            if any(not 0 <= r <= 1 for r in self.rates):
                raise ValueError("eval.rates must lie in [0, 1]")
            if cfg["generate.n_samples"] < 0:
                raise ValueError("generate.n_samples must be >= 0")
            for key in ("eval.n_samples", "eval.sweep_samples", "eval.trials", "eval.timing_samples", "eval.K_infer"):
                if cfg[key] < 1:
                    raise ValueError(f"{key} must be >= 1")
            if cfg["eval.gradcheck_precision"] not in ("double", "extended", "mp"):
                raise ValueError("eval.gradcheck_precision must be double, extended or mp")
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        self.seed = cfg["seed"]

    def source(self, config=None, fading=None):
        return ChannelSource(config or self.network, fading or self.fading, self.spatial, derive_seed(self.seed, "channel"))

    def echo(self):
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))


def load_run_config(args):
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw.update(parse_config_text(fh.read(), args.config))
        except OSError as exc:
            raise IOError(f"cannot read config {args.config}: {exc}") from exc
    for item in args.override or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--override expects key=value, got {item!r}")
        raw[key.strip()] = value.strip()
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    return RunConfig(resolve_config(raw))


def prepare_out(out, run):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.txt"), "w") as fh:
        fh.write(run.echo())
    with open(os.path.join(out, "VERSION"), "w") as fh:
        fh.write(f"uwmmse {__version__}\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(run, out, threads=None):
    prepare_out(out, run)
    n = run.raw["generate.n_samples"]
    data = run.source().draw(n, "generate")
    path = os.path.join(out, run.raw["generate.file"])
    save_dataset(path, list(data), d=run.network.d)
    print(f"wrote {n} samples to {path}")
    return EXIT_OK


def cmd_train(run, out, threads=None):
    prepare_out(out, run)
    cfg = run.train

    def progress(step, score):
        log.info("step %d: validation sum-rate %.4f", step, score)

    params, hist = train(cfg, run.source(), rng=derive_seed(run.seed, "init"), progress=progress)
    meta = {
        "seed": run.seed,
        "best_step": hist.best_step,
        "steps": hist.steps,
        "diverged": int(hist.diverged),
        "convention": cfg.convention,
    }
    save_checkpoint(os.path.join(out, "checkpoint.txt"), params, run.network, cfg.K_train, meta)
    hist.write_csv(os.path.join(out, "history.csv"))
    print(f"trained {hist.steps} steps; best validation sum-rate {hist.best_val:.4f} at step {hist.best_step}")
    if hist.diverged:
        print("training diverged; wrote the best parameters seen", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _testset(run, n, purpose, config=None, fading=None):
    path = run.raw["eval.testset"]
    if path and config is None:
        data = np.asarray(load_dataset(path))
        if len(data) == 0:
            raise UsageError(f"test set {path} is empty")
        return data[:n]
    return run.source(config, fading).draw(n, purpose)


def _write(result, out, run, plot=True):
    base = os.path.join(out, result.experiment)
    result.write_csv(base + ".csv")
    result.write_json(base + ".json", run.raw)
    if plot and result.rows:
        ex.plot_result(base + ".csv", base + ".svg")


def cmd_eval(run, out, threads=None, experiment=None, checkpoint=None):
    experiment = experiment or run.raw["eval.experiment"]
    if experiment not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {experiment!r}; valid names: {', '.join(EXPERIMENTS)}")
    checkpoint = checkpoint or run.raw["eval.checkpoint"]
    K = run.raw["eval.K_infer"]
    net = run.network
    if experiment == "gradcheck":
        params = None
    elif not checkpoint:
        raise UsageError("eval needs a checkpoint (--checkpoint or eval.checkpoint)")
    else:
        params, _ = load_checkpoint(checkpoint)
    prepare_out(out, run)
    audit = ex.PowerAudit(net.Pmax)
    cfg = run.raw

    if experiment == "compare":
        res = ex.compare_algorithms(_testset(run, cfg["eval.n_samples"], "test"), params, K, net,
                                    fading=run.fading, bins=cfg["eval.bins"], threads=threads, audit=audit)
        _write(res, out, run)
        for name, agg in res.aggregates.items():
            print(f"{name}: mean sum-rate {agg['sum_rate']['mean']:.4f} "
                  f"(normalized {agg['normalized_sum_rate']['mean']:.4f}, {agg['wall_time']['mean'] * 1e3:.2f} ms)")
    elif experiment == "generalize":
        res = ex.generalization_sweep(params, run.sizes, run.test_fading, run.source(), cfg["eval.sweep_samples"], K,
                                      threads=threads, audit=audit)
        _write(res, out, run)
        for M, agg in res.aggregates.items():
            print(f"M={M}: " + ", ".join(f"{n} {a['mean']:.4f}" for n, a in agg.items()))
    elif experiment == "spatial":
        res = ex.spatial_generalization(params, run.stddevs, run.source(), cfg["eval.sweep_samples"], K,
                                        threads=threads, audit=audit)
        _write(res, out, run)
        for s, agg in res.aggregates.items():
            print(f"stddev {s}: normalized {agg['mean']:.4f}")
    elif experiment == "convergence":
        p_thr = None if cfg["eval.p_threshold"] < 0 else cfg["eval.p_threshold"]
        f1 = ex.convergence_f1(params, _testset(run, cfg["eval.sweep_samples"], "test"), cfg["eval.w_threshold"], p_thr,
                               K, net, threads=threads, audit=audit)
        _write_json(os.path.join(out, "convergence.json"), "convergence", run, f1)
        print("UWMMSE F1 per layer: " + " ".join(f"{x:.4f}" for x in f1["uwmmse"]))
        print("WMMSE F1 per sweep: " + " ".join(f"{k}:{x:.4f}" for k, x in f1["wmmse"].items()))
    elif experiment == "robustness":
        res = ex.robustness_sweep(params, run.rates, cfg["eval.sigma_r"], _testset(run, cfg["eval.sweep_samples"], "test"),
                                  K, net, derive_seed(run.seed, "distortion"), threads=threads, audit=audit)
        _write(res, out, run)
        for name, agg in res.aggregates.items():
            print(f"{name}: " + " ".join(f"{r}:{a['mean']:.4f}" for r, a in agg.items()))
    elif experiment == "timing":
        tnet = net.with_size(cfg["eval.timing_M"])
        data = run.source(tnet).draw(cfg["eval.timing_samples"], "timing")
        res = ex.timing_benchmark(data, params, K, tnet, audit=audit)
        _write(res, out, run, plot=False)
        for name, agg in res.aggregates.items():
            print(f"{name}: {agg['mean'] * 1e3:.3f} ms per sample")
    elif experiment == "equivariance":
        dev, devs = ex.equivariance_test(params, net.M, cfg["eval.trials"], derive_seed(run.seed, "equivariance"), K, net)
        _write_json(os.path.join(out, "equivariance.json"), "equivariance", run, {"max_deviation": dev, "deviations": devs})
        print(f"max relative deviation {dev:.3e}")
    else:
        summary = run_gradcheck(run)
        _write_json(os.path.join(out, "gradcheck.json"), "gradcheck", run, summary)
        for k, r in enumerate(summary["inits"]):
            print(f"init {k}: {r['pass_fraction'] * 100:.1f}% of {r['coords']} coordinates within 1e-4 "
                  f"(max rel err {r['max_rel_error']:.2e})")
    if experiment not in ("equivariance", "gradcheck"):
        print(f"power audit: {audit.count} node beamformers, max Tr(VV^H)/Pmax = {audit.max_ratio:.12f}")
        _write_json(os.path.join(out, "power_audit.json"), "power_audit", run,
                    {"max_ratio": audit.max_ratio, "count": audit.count, "worst": audit.worst})
    return EXIT_OK


def run_gradcheck(run):
    cfg = run.raw
    net = run.network.with_size(cfg["eval.gradcheck_M"])
    H = run.source(net).draw(2, "gradcheck")
    out = {"M": net.M, "K": 1, "batch": 2, "h": 1e-6, "precision": cfg["eval.gradcheck_precision"], "inits": []}
    for k in range(cfg["eval.gradcheck_inits"]):
        rng = np.random.default_rng(derive_seed(run.seed, f"gradcheck:{k}"))
        params = ModelParams.init(net.R, net.T, net.d, run.train.F, run.train.G, rng, mu=run.train.mu_init)

        def program(Hb, p):
            return loss(Hb, p, 1, sigma=net.sigma, pmax=net.Pmax, convention=run.train.convention)

        rep = ad.check_gradients(program, H, params, h=1e-6, n_coords=cfg["eval.gradcheck_coords"], rng=rng,
                                 precision=cfg["eval.gradcheck_precision"])
        out["inits"].append({
            "coords": len(rep), "pass_fraction": rep.fraction_below(1e-4),
            "max_rel_error": rep.max_rel_error, "rel_errors": rep.rel_errors,
        })
    return out


def _write_json(path, name, run, payload):
    res = ex.ExperimentResult(name, aggregates=payload)
    res.write_json(path, run.raw)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="uwmmse", description="Unfolded WMMSE beamforming: data, training, evaluation.")
    p.add_argument("--version", action="version", version=f"uwmmse {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value configuration file")
    common.add_argument("--seed", type=int, metavar="N", help="global seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (created if missing)")
    common.add_argument("--threads", type=int, metavar="N", default=None,
                        help="worker threads for evaluation sweeps (default: available CPUs)")
    common.add_argument("--override", action="append", metavar="KEY=VALUE", help="replace one configuration entry")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="sample a CSI dataset file")
    sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="run one experiment on a checkpoint")
    ev.add_argument("experiment", nargs="?", help=f"one of: {', '.join(EXPERIMENTS)}")
    ev.add_argument("--checkpoint", metavar="PATH", help="checkpoint written by 'train'")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        parser.error("--threads must be >= 1")
    try:
        run = load_run_config(args)
        if args.command == "generate":
            return cmd_generate(run, args.out, threads)
        if args.command == "train":
            return cmd_train(run, args.out, threads)
        return cmd_eval(run, args.out, threads, args.experiment, args.checkpoint)
    except UsageError as exc:
        print(f"uwmmse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DatasetFormatError, CheckpointError) as exc:
        print(f"uwmmse: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"uwmmse: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
