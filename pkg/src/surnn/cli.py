"""Command-line driver: gen, train, bench, diag, gradcheck, fetch-mnist.

Exit codes: 0 ok, 1 usage or invalid config, 2 I/O failure, 3 numeric abort
or failed gradient check.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import urllib.request
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import diagnostics, plots, sparse_exec, tasks
from .numerics import Rng, save_tensor
from .trainer import (LOG_FIELDS, LayerConfig, Model, ModelConfig, NumericAbort, TrainConfig, config_hash,
                      gradcheck_model, train)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "SURNN_OUT"
MNIST_FILES = ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
               "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz")

log = logging.getLogger("surnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_schema() -> dict:
    return json.loads(resources.files("surnn").joinpath("config_schema.json").read_text())


def load_config(path) -> dict:
    with open(path) as f:
        cfg = json.load(f)
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as e:
        raise UsageError(f"invalid config {path}: {e.message}") from e
    return cfg


def out_dir(args_value: str | None, cfg: dict | None = None) -> Path:
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    if args_value:
        return Path(args_value)
    if cfg and cfg.get("out_dir"):
        return Path(cfg["out_dir"])
    return Path("runs")


# -- task construction ------------------------------------------------------------

def build_task(spec: dict):
    name = spec["name"]
    if name == "copy":
        return tasks.CopyTask(spec.get("delay", 100), eval_size=spec.get("eval_size", 256),
                              alphabet=spec.get("alphabet", 8))
    if name == "selective-copy":
        return tasks.SelectiveCopyTask(spec.get("T", 512), n_tokens=spec.get("n_tokens", 16),
                                       eval_size=spec.get("eval_size", 256),
                                       alphabet=spec.get("alphabet", 8))
    if name == "mackey-glass":
        cfg = tasks.MgConfig(horizon=spec.get("horizon", 10))
        return tasks.MackeyGlassTask(cfg, window=spec.get("window", 200),
                                     washout=spec.get("washout", 20),
                                     series_len=spec.get("series_len", 12000),
                                     eval_size=spec.get("eval_size", 64))
    if name in ("smnist", "psmnist"):
        for key in ("images", "labels", "test_images", "test_labels"):
            if key not in spec:
                raise UsageError(f"task {name} needs '{key}' (IDX file path)")
        tr_x, tr_y = tasks.load_idx(spec["images"]), tasks.load_idx(spec["labels"])
        te_x, te_y = tasks.load_idx(spec["test_images"]), tasks.load_idx(spec["test_labels"])
        n, m = spec.get("train_size", len(tr_y)), spec.get("test_size", len(te_y))
        return tasks.SequentialImageTask.from_arrays(tr_x[:n], tr_y[:n], te_x[:m], te_y[:m],
                                                     permuted=(name == "psmnist"))
    raise UsageError(f"unknown task {name!r}")


def build_model(model_spec: dict, task, seed: int) -> Model:
    layers = [LayerConfig(**l) for l in model_spec["layers"]]
    return Model(ModelConfig(layers, task.input_dim, task.outputs,
                             max_len=model_spec.get("max_len", task.length),
                             dropout=model_spec.get("dropout", 0.0), seed=seed))


# -- commands ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = {"name": args.task}
    if args.config:
        spec.update(load_config_task(args.config))
    for key in ("delay", "T", "n_tokens", "horizon"):
        v = getattr(args, key)
        if v is not None:
            spec[key] = v
    h = config_hash({"task": spec, "seed": args.seed, "batch": args.batch})
    dest = out_dir(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    rng = Rng(args.seed)
    if args.task == "mackey-glass":
        mg = tasks.MgConfig(horizon=spec.get("horizon", 10))
        series = tasks.gen_mackey_glass(mg, spec.get("series_len", args.batch))
        save_tensor(dest / "series.bin", series.values, {"config_hash": h})
        files = {"series": "series.bin"}
        extra = {"mean": series.mean, "std": series.std}
    else:
        if args.task == "copy":
            batch = tasks.gen_copy_memory(rng, args.batch, spec.get("delay", 100))
        elif args.task == "selective-copy":
            batch = tasks.gen_selective_copy(rng, args.batch, spec.get("T", 512),
                                             spec.get("n_tokens", 16))
        else:
            raise UsageError(f"gen supports copy, selective-copy and mackey-glass, not {args.task!r}")
        files = {}
        for name in ("inputs", "targets", "loss_mask"):
            save_tensor(dest / f"{name}.bin", getattr(batch, name), {"config_hash": h})
            files[name] = f"{name}.bin"
        extra = {"shapes": {k: list(getattr(batch, k).shape) for k in ("inputs", "targets", "loss_mask")}}
    manifest = {"task": spec, "seed": args.seed, "config_hash": h, "files": files, **extra}
    (dest / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"# config_hash={h}")
    print(f"wrote {len(files)} tensor file(s) to {dest}")
    return EXIT_OK


def load_config_task(path) -> dict:
    with open(path) as f:
        return json.load(f).get("task", {})


def _train_seed(cfg: dict, seed: int, dest: Path, h: str) -> dict:
    task = build_task(cfg["task"])
    optim = cfg.get("optim", {})
    budget = cfg.get("budget", {})
    model = build_model(cfg["model"], task, seed)
    run_dir = dest / f"seed{seed}"
    tc = TrainConfig(steps=budget.get("steps", 1000), epochs=budget.get("epochs"),
                     batch_size=optim.get("batch_size", 32), lr=optim.get("lr", 1e-3),
                     clip=optim.get("clip", 1.0),
                     gate_weight_decay=optim.get("gate_weight_decay", 0.0),
                     gate_clip=optim.get("gate_clip"),
                     eval_every=budget.get("eval_every", 100), seed=seed,
                     target_loss=budget.get("target_loss"),
                     target_metric=budget.get("target_metric"),
                     time_budget_s=budget.get("time_budget_s"),
                     log_path=str(run_dir / "metrics.csv"),
                     checkpoint_dir=str(run_dir / "checkpoint"))
    rows = train(model, task, tc, header=f"config_hash={h} seed={seed}")
    plots.plot_metrics(rows, run_dir / "eval_loss.png")
    return {"seed": seed, **rows[-1]}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    h = config_hash(cfg)
    build_task(cfg["task"])  # fail fast on a bad task before any worker starts
    dest = out_dir(args.out, cfg)
    dest.mkdir(parents=True, exist_ok=True)
    seeds = cfg.get("seeds", [0])
    if args.workers > 1 and len(seeds) > 1:
        # seeds are independent runs, so each worker owns one
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(min(args.workers, len(seeds))) as pool:
            summary = list(pool.map(_train_seed, [cfg] * len(seeds), seeds,
                                    [dest] * len(seeds), [h] * len(seeds)))
    else:
        summary = [_train_seed(cfg, seed, dest, h) for seed in seeds]
    for last in summary:
        print(f"seed {last['seed']}: step {last['step']} eval_loss {last['eval_loss']:.6g} "
              f"eval_metric {last['eval_metric']:.6g} update_rate {last['update_rate']:.4f}")
    with open(dest / "summary.csv", "w", newline="") as f:
        f.write(f"# config_hash={h}\n")
        w = csv.DictWriter(f, fieldnames=["seed"] + LOG_FIELDS)
        w.writeheader()
        w.writerows(summary)
    return EXIT_OK


def cmd_bench(args) -> int:
    dtype = np.float32 if args.dtype == "float32" else np.float64
    h = config_hash(vars(args) | {"func": None})
    rows = []
    for s in args.sparsity:
        rows += sparse_exec.bench("dense", args.H, args.D, args.T, s, args.repeats, dtype, args.block)
        rows += sparse_exec.bench("sparse", args.H, args.D, args.T, s, args.repeats, dtype, args.block)
    dest = Path(args.out) if args.out else out_dir(None) / "bench.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", newline="") as f:
        f.write(f"# config_hash={h}\n")
        w = csv.DictWriter(f, fieldnames=sparse_exec.BENCH_FIELDS)
        w.writeheader()
        w.writerows(rows)
    plots.plot_bench(rows, dest.with_suffix(".png"))
    for s in args.sparsity:
        d = next(r for r in rows if r["mode"] == "dense" and r["sparsity"] == s and r["head"] == "total")
        sp = next(r for r in rows if r["mode"] == "sparse" and r["sparsity"] == s and r["head"] == "total")
        print(f"sparsity {s:.2f}: MAC ratio {sp['macs'] / d['macs']:.4f} "
              f"wall-clock ratio {sp['median_us'] / d['median_us']:.4f}")
    return EXIT_OK


def cmd_diag(args) -> int:
    dest = out_dir(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    h = config_hash(vars(args) | {"func": None})
    if args.kind == "grad-profile":
        models = {}
        for kind in ("gru", "su-gru"):
            gate = {"type": "rhythmic", "target_rate": args.rate, "max_len": max(args.delays) + 21}
            models[kind] = Model(ModelConfig([LayerConfig(kind=kind, H=args.H, gate=gate)], 10, 8,
                                             max_len=max(args.delays) + 21, seed=args.seed))
        bundle = diagnostics.run_grad_profile(models, args.delays, seed=args.seed)
        bundle.to_csv(dest / "grad_profile.csv")
        plots.plot_grad_profiles(bundle, dest / "grad_profile.png")
        for (tag, T), tr in sorted(bundle.traces.items()):
            print(f"{tag} T={T}: max/min ratio {diagnostics.trace_ratio(tr):.4g} "
                  f"early/late {diagnostics.trailing_fraction(tr):.4g}")
    elif args.kind == "depth":
        fit = diagnostics.fit_effective_depth(rho=args.rho, T=args.T, schedule=args.schedule)
        with open(dest / "depth_fit.csv", "w", newline="") as f:
            f.write(f"# config_hash={h} slope={fit.slope!r} intercept={fit.intercept!r} r2={fit.r2!r}\n")
            w = csv.writer(f)
            w.writerow(["updates", "log_norm"])
            w.writerows(fit.samples.tolist())
        plots.plot_depth_fit(fit, dest / "depth_fit.png")
        print(f"slope {fit.slope:.5f} (ln rho = {np.log(args.rho):.5f}), R2 {fit.r2:.4f}")
    elif args.kind == "retention":
        from .onepass import RetentionSpec, init_onepass, retention_bound_C
        C = retention_bound_C(RetentionSpec(args.L, args.rho_ret, 0.0))
        p = init_onepass(Rng(args.seed), 4, args.H, C)
        p.base.b_ih[args.H:2 * args.H] = -1.0  # keep z margins positive
        rng = np.random.default_rng(args.seed)
        xs = rng.standard_normal((args.T, 4)) * 0.1
        gs = (rng.random((args.T, args.H)) < 0.05).astype(float)
        z_pre, _ = diagnostics.onepass_z_preactivations(p, xs, gs)
        rep = diagnostics.audit_retention(p, z_pre, gs, args.rho_ret, design_len=args.L)
        with open(dest / "retention.csv", "w", newline="") as f:
            f.write(f"# config_hash={h} C={C!r}\n")
            w = csv.writer(f)
            w.writerow(["unit", "start", "length", "retained", "min_margin"])
            w.writerows(rep.runs)
        print(f"C={C:.4f} runs checked {rep.checked} violations {len(rep.violations)}")
    elif args.kind == "spatiotemporal":
        cfg = load_config(args.config) if args.config else None
        if cfg is None:
            raise UsageError("spatiotemporal dumps need --config")
        task = build_task(cfg["task"])
        model = build_model(cfg["model"], task, cfg.get("seeds", [0])[0])
        if args.checkpoint:
            from .trainer import restore
            restore(model, args.checkpoint)
        batch = task.eval_batch().slice(0, args.batch)
        dims = tuple(args.dims)
        diagnostics.dump_spatiotemporal(model, batch.inputs, dims, dest, header=f"config_hash={h}")
        plots.plot_maps(diagnostics.spatiotemporal_maps(model, batch.inputs, dims),
                        dest / "spatiotemporal.png")
        print(f"wrote spatio-temporal maps to {dest}")
    return EXIT_OK


def gradcheck_suite(H: int = 4, T: int = 8, seed: int = 0, tol: float = 1e-5) -> list[dict]:
    """Finite-difference check of every cell kind, hard and soft gates, on a tiny net."""
    rng = Rng(seed)
    x = rng.normal(0.0, 1.0, (2, T, 3))
    y = rng.integers(0, 3, (2, T))
    mask = np.ones((2, T))
    results = []
    cases = [("rnn", False), ("gru", False), ("su-rnn", False), ("su-rnn", True),
             ("su-gru", False), ("su-gru", True), ("onepass-su-gru", False), ("onepass-su-gru", True)]
    for kind, soft in cases:
        layers = [LayerConfig(kind=kind, H=H, soft=soft,
                              gate={"type": "rhythmic", "target_rate": 0.5, "max_len": T},
                              C=-3.0 if kind.startswith("onepass") else None)
                  for _ in range(2)]
        model = Model(ModelConfig(layers, 3, 3, max_len=T, seed=seed))
        errs = gradcheck_model(model, x, y, mask)
        worst = max(errs.values())
        results.append({"kind": kind, "soft": soft, "worst_rel_err": worst, "pass": worst < tol})
    return results


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(args.H, args.T, args.seed, args.tol)
    for r in results:
        mode = "soft" if r["soft"] else "hard"
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['kind']:<15} {mode}  max rel err {r['worst_rel_err']:.3e}")
    return EXIT_OK if all(r["pass"] for r in results) else EXIT_NUMERIC


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_checksums(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            digest, name = line.split()
            out[name.lstrip("*")] = digest.lower()
    return out


def cmd_fetch_mnist(args) -> int:
    dest = Path(args.dir)
    dest.mkdir(parents=True, exist_ok=True)
    expected = read_checksums(args.checksums) if args.checksums else None
    if expected is None and not args.record:
        raise UsageError("pass --checksums FILE (sha256sum format) or --record to write one")
    recorded = []
    for name in MNIST_FILES:
        target = dest / name
        if not target.exists():
            url = args.base_url.rstrip("/") + "/" + name
            log.info("downloading %s", url)
            urllib.request.urlretrieve(url, target)
        digest = sha256_of(target)
        if expected is not None:
            if name not in expected:
                raise UsageError(f"checksum file has no entry for {name}")
            if expected[name] != digest:
                target.unlink()
                print(f"checksum mismatch for {name}: got {digest}", file=sys.stderr)
                return EXIT_IO
        recorded.append(f"{digest}  {name}")
        print(f"ok {name} {digest}")
    if args.record:
        (dest / "SHA256SUMS").write_text("\n".join(recorded) + "\n")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="surnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--workers", type=int, default=1,
                   help="processes for independent seeds in train (1 = sequential)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("task", choices=["copy", "selective-copy", "mackey-glass"])
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--batch", type=int, default=64, help="sequences (series length for mackey-glass)")
    g.add_argument("--delay", type=int)
    g.add_argument("--T", type=int)
    g.add_argument("--n-tokens", dest="n_tokens", type=int)
    g.add_argument("--horizon", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train models from a JSON experiment config")
    t.add_argument("config")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="dense vs mask-aware GRU step latency")
    b.add_argument("--H", type=int, default=256)
    b.add_argument("--D", type=int, default=1)
    b.add_argument("--T", type=int, default=784)
    b.add_argument("--sparsity", type=float, nargs="+", default=[0.0, 0.5, 0.83])
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    b.add_argument("--block", type=int, default=1)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("diag", help="diagnostic CSV products and figures")
    d.add_argument("kind", choices=["grad-profile", "depth", "retention", "spatiotemporal"])
    d.add_argument("--out")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--H", type=int, default=64)
    d.add_argument("--T", type=int, default=200)
    d.add_argument("--delays", type=int, nargs="+", default=[50, 100, 200])
    d.add_argument("--rate", type=float, default=0.1, help="gate update rate for grad-profile")
    d.add_argument("--rho", type=float, default=0.9)
    d.add_argument("--schedule", choices=["bernoulli", "rhythmic"], default="bernoulli")
    d.add_argument("--L", type=int, default=100)
    d.add_argument("--rho-ret", dest="rho_ret", type=float, default=0.01)
    d.add_argument("--config")
    d.add_argument("--checkpoint")
    d.add_argument("--batch", type=int, default=16)
    d.add_argument("--dims", type=int, nargs=2, default=[28, 28])
    d.set_defaults(func=cmd_diag)

    c = sub.add_parser("gradcheck", help="finite-difference certification of the reverse pass")
    c.add_argument("--H", type=int, default=4)
    c.add_argument("--T", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("fetch-mnist", help="download the four MNIST IDX files and verify SHA-256")
    f.add_argument("--dir", default="data/mnist")
    f.add_argument("--base-url", default="https://storage.googleapis.com/cvdf-datasets/mnist")
    f.add_argument("--checksums", help="sha256sum-format file with the expected digests")
    f.add_argument("--record", action="store_true", help="write SHA256SUMS instead of verifying")
    f.set_defaults(func=cmd_fetch_mnist)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"surnn: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as e:
        print(f"surnn: numeric abort: {e}; dump at {e.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, tasks.IdxFormatError) as e:
        print(f"surnn: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
