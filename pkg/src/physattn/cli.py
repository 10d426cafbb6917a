"""Command-line entry point: data generation, training, evaluation, slice
ablations, scaling benchmarks and slice-weight export.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. All randomness flows from explicit --seed flags / config values.
The PHYSATTN_THREADS environment variable caps worker threads for data
generation (default 1, which keeps runs deterministic and single-process).
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from dataclasses import fields, replace

import numpy as np

from . import darcy, metrics, training
from .attention import regular_square_slices, write_slice_weights_csv
from .errors import ConfigError, DataError, GeometryError, NumericError
from .model import ModelConfig, forward, init_params, load_checkpoint
from .tensor import Graph
from .training import TrainConfig, relative_l2_loss

TRAIN_FILE = "train.pded"
TEST_FILE = "test.pded"
CONFIG_ECHO = "config.txt"

_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


def worker_count() -> int:
    raw = os.environ.get("PHYSATTN_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"PHYSATTN_THREADS must be an integer, got '{raw}'") from None
    if value < 1:
        raise ConfigError(f"PHYSATTN_THREADS must be >= 1, got {value}")
    return value


# -- run configuration ---------------------------------------------------------


def _convert(name, kind, raw):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            return None if raw.lower() in ("none", "") else float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value '{raw}' for config key '{name}'") from None


def _parse_pairs(lines, source):
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got '{text}'")
        key, value = text.split("=", 1)
        pairs.append((key.strip(), value))
    return pairs


def load_run_config(config_path=None, overrides=()):
    """Merge a key=value file with command-line overrides (flags win).
    Unknown keys are rejected."""
    pairs = []
    if config_path is not None:
        try:
            with open(config_path) as fh:
                pairs += _parse_pairs(fh.readlines(), str(config_path))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
    pairs += _parse_pairs(list(overrides), "--set")

    model_kwargs, train_kwargs = {}, {}
    for key, raw in pairs:
        if key in _MODEL_FIELDS:
            model_kwargs[key] = _convert(key, str(_MODEL_FIELDS[key].type), raw)
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = _convert(key, str(_TRAIN_FIELDS[key].type), raw)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return (
        ModelConfig(**model_kwargs).validate(),
        TrainConfig(**train_kwargs).validate(),
    )


def echo_config(path, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Write the fully resolved configuration in re-parseable key=value form."""
    lines = []
    for f in fields(ModelConfig):
        lines.append(f"{f.name}={getattr(model_cfg, f.name)}")
    for f in fields(TrainConfig):
        value = getattr(train_cfg, f.name)
        lines.append(f"{f.name}={'none' if value is None else value}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _prepare_out_dir(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(
            f"output directory '{path}' already has contents; pass --force to reuse it"
        )
    os.makedirs(path, exist_ok=True)
    return path


def _load_split(data_path, split):
    if os.path.isfile(data_path):
        return darcy.load_dataset(data_path)
    candidate = os.path.join(data_path, f"{split}.pded")
    if not os.path.exists(candidate):
        raise DataError(f"no dataset at '{candidate}'")
    return darcy.load_dataset(candidate)


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args):
    out = _prepare_out_dir(args.out, args.force)
    train_ds, test_ds = darcy.build_dataset(
        args.task, args.n_train, args.n_test, args.res, args.seed,
        workers=worker_count(),
    )
    darcy.save_dataset(os.path.join(out, TRAIN_FILE), train_ds)
    darcy.save_dataset(os.path.join(out, TEST_FILE), test_ds)
    manifest = {
        "task": args.task,
        "resolution": args.res,
        "n_train": args.n_train,
        "n_test": args.n_test,
        "base_seed": args.seed,
        "files": {"train": TRAIN_FILE, "test": TEST_FILE},
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.n_train}+{args.n_test} samples at {args.res}x{args.res} to {out}")
    return 0


def cmd_train(args):
    model_cfg, train_cfg = load_run_config(args.config, args.set)
    out = _prepare_out_dir(args.out, args.force)
    train_ds = _load_split(args.data, "train")
    test_ds = _load_split(args.data, "test")
    echo_config(os.path.join(out, CONFIG_ECHO), model_cfg, train_cfg)
    _, history = training.train(
        model_cfg, train_cfg, train_ds, test_ds, out_dir=out,
        log=print if args.verbose else None,
    )
    final = history.records[-1]
    print(
        f"finished {train_cfg.epochs} epochs: train loss {final.train_loss:.6f}, "
        f"test rel L2 {final.test_rel_l2:.6f}"
    )
    return 0


def cmd_eval(args):
    config, params = load_checkpoint(args.checkpoint)
    dataset = _load_split(args.data, args.split)
    if args.resample is not None:
        samples = [
            darcy.resample_mesh(s, args.resample, args.seed + i)
            for i, s in enumerate(dataset.samples)
        ]
        dataset = darcy.Dataset(samples, dataset.stats)
    report = metrics.evaluate(params, config, dataset, kl=args.kl)
    print(report.to_text())
    report.to_csv(args.out_csv)
    return 0


def cmd_ablate(args):
    model_cfg, train_cfg = load_run_config(args.config, args.set)
    out = _prepare_out_dir(args.out, args.force)
    train_ds = _load_split(args.data, "train")
    test_ds = _load_split(args.data, "test")
    grid = train_ds.samples[0].grid
    seeds = args.seeds

    settings = [("learned", m) for m in args.slices]
    if args.regular_squares:
        if grid is None:
            raise GeometryError("regular squares need grid-structured data")
        m_sq = regular_square_slices(grid, args.square_side).shape[1]
        settings.append(("squares", m_sq))

    rows = []
    for kind, m in settings:
        for seed in seeds:
            cfg = replace(
                model_cfg,
                slices=m,
                projector="squares" if kind == "squares" else model_cfg.projector,
                square_side=args.square_side,
            ).validate()
            run_cfg = replace(train_cfg, seed=seed)
            run_dir = os.path.join(out, f"{kind}_m{m}_seed{seed}")
            os.makedirs(run_dir, exist_ok=True)
            echo_config(os.path.join(run_dir, CONFIG_ECHO), cfg, run_cfg)
            params, history = training.train(
                cfg, run_cfg, train_ds, test_ds, out_dir=run_dir,
                log=print if args.verbose else None,
            )
            rows.append({
                "kind": kind,
                "slices": m,
                "seed": seed,
                "params": params.num_values(),
                "s_per_epoch": statistics.mean(r.seconds for r in history.records),
                "test_rel_l2": history.records[-1].test_rel_l2,
            })
            print(
                f"{kind} M={m} seed={seed}: rel L2 {rows[-1]['test_rel_l2']:.5f} "
                f"({rows[-1]['s_per_epoch']:.2f}s/epoch)"
            )

    with open(os.path.join(out, "ablation.csv"), "w") as fh:
        fh.write("kind,slices,seed,params,s_per_epoch,test_rel_l2\n")
        for r in rows:
            fh.write(
                f"{r['kind']},{r['slices']},{r['seed']},{r['params']},"
                f"{r['s_per_epoch']:.6f},{r['test_rel_l2']:.17g}\n"
            )

    print(f"\n{'setting':>16} {'params':>9} {'s/epoch':>8} {'median rel L2':>14}")
    for kind, m in settings:
        subset = [r for r in rows if (r["kind"], r["slices"]) == (kind, m)]
        med = statistics.median(r["test_rel_l2"] for r in subset)
        spe = statistics.median(r["s_per_epoch"] for r in subset)
        print(f"{kind + ' M=' + str(m):>16} {subset[0]['params']:>9} {spe:>8.2f} {med:>14.5f}")
    return 0


def run_scaling_benchmark(config: ModelConfig, sizes, repeats=3, seed=0, batch_size=1):
    """Forward+backward wall time and a tape-memory estimate per mesh size,
    on random unstructured inputs. Returns a list of result dicts."""
    config.validate()
    rng = np.random.default_rng(seed)
    results = []
    for n in sizes:
        coords = rng.uniform(0.0, 1.0, size=(batch_size, n, config.geom_dim))
        observed = None
        if config.observed_dim:
            observed = rng.standard_normal((batch_size, n, config.observed_dim))
        target = rng.standard_normal((batch_size, n, config.out_dim))
        params = init_params(config, seed)

        def run():
            params.zero_grads()
            g = Graph()
            pred = forward(g, coords, observed, params, config)
            g.backward(relative_l2_loss(g, pred, target))
            return g

        graph = run()  # warmup
        mem = graph.retained_bytes() + sum(
            t.data.nbytes + t.grad.nbytes for t in params.tensors()
        )
        best = min(_timed(run) for _ in range(repeats))
        results.append({"n_points": n, "seconds": best, "mem_bytes": mem})
    return results


def _timed(fn):
    start = time.perf_counter()
    fn()
    return time.perf_counter() - start


def cmd_bench(args):
    model_cfg, _ = load_run_config(args.config, args.set)
    results = run_scaling_benchmark(
        model_cfg, args.sizes, repeats=args.repeats, seed=args.seed
    )
    lines = ["n_points,seconds,mem_bytes"]
    for r in results:
        lines.append(f"{r['n_points']},{r['seconds']:.6f},{r['mem_bytes']}")
    body = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(body)
    print(body, end="")
    return 0


def _write_pgm(path, image):
    """8-bit ASCII PGM, rescaled so the largest weight maps to white."""
    peak = image.max()
    scaled = np.zeros_like(image) if peak <= 0 else image / peak
    pixels = np.rint(scaled * 255).astype(int)
    with open(path, "w") as fh:
        fh.write(f"P2\n{image.shape[1]} {image.shape[0]}\n255\n")
        for row in pixels:
            fh.write(" ".join(str(v) for v in row) + "\n")


def cmd_export_slices(args):
    config, params = load_checkpoint(args.checkpoint)
    dataset = _load_split(args.data, args.split)
    if not (0 <= args.sample < len(dataset.samples)):
        raise DataError(f"sample index {args.sample} out of range (have {len(dataset.samples)})")
    if not (0 <= args.layer < config.layers):
        raise ConfigError(f"layer {args.layer} out of range (model has {config.layers})")
    if not (0 <= args.head < config.heads):
        raise ConfigError(f"head {args.head} out of range (model has {config.heads})")
    sample = dataset.samples[args.sample]

    traces = []
    forward(Graph(), sample.coords, sample.observed, params, config,
            grid=sample.grid, traces=traces)
    weights = traces[args.layer].slice_weights
    if weights.ndim == 2:  # fixed squares: shared across heads
        w = weights
    else:
        w = weights[args.head]
    write_slice_weights_csv(args.out, sample.coords, w)
    written = [args.out]

    if sample.grid is not None:
        gh, gw = sample.grid
        stem = os.path.splitext(args.out)[0]
        for j in range(w.shape[1]):
            pgm = f"{stem}_slice{j:03d}.pgm"
            _write_pgm(pgm, w[:, j].reshape(gh, gw))
            written.append(pgm)
    print(f"wrote {len(written)} files ({written[0]} ...)")
    return 0


# -- parser ----------------------------------------------------------------------


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="physattn",
        description="slice-attention neural operator: data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--task", default="darcy")
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--kl", action="store_true", help="report attention KL per layer")
    p.add_argument("--resample", type=float, default=None, metavar="FRACTION")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-csv", default="eval_report.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="slice-count / fixed-squares ablation")
    p.add_argument("--slices", type=_int_list, default=[1, 8, 16], metavar="LIST")
    p.add_argument("--regular-squares", action="store_true")
    p.add_argument("--square-side", type=int, default=4)
    p.add_argument("--seeds", type=_int_list, default=[0], metavar="LIST")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="forward+backward scaling benchmark")
    p.add_argument("--sizes", type=_int_list, default=[1024, 2048, 4096, 8192])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-slices", help="dump slice weights for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_slices)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, GeometryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
