"""``hybridsan`` command line: train, eval, sweep, analyze, bench, gen-data, gradcheck.

Exit codes: 0 success, 2 usage or configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path


from . import config as config_mod
from .analysis import param_count, time_scaling_bench, write_matrix_csv, write_pgm
from .config import ConfigError, ExperimentConfig
from .model import ManifestMismatch, Model
from .serialization import FormatError, load_checkpoint, save_attention_dump, write_feature_dir
from .tensor import grad_check
from .training import DivergenceError, evaluate, gen_synthetic

log = logging.getLogger("hybridsan")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    """``--config`` file, else the toy preset; then overrides, ``--layers`` and ``--seed``."""
    from .experiments import toy_config
    overrides = args.override or []
    if args.config:
        return config_mod.load_config(args.config, overrides, args.layers, args.seed)
    return config_mod.resolve(config_mod.to_dict(toy_config()), overrides, args.layers, args.seed)


def _run_dir(args, cfg: ExperimentConfig, label: str) -> Path:
    """``--out`` is used as given; otherwise a fresh timestamped directory under cfg.out_dir."""
    if args.out:
        return Path(args.out)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(cfg.out_dir) / f"{label}-{stamp}"


def _dataset(cfg: ExperimentConfig, data_dir: str | None):
    from .experiments import validation_set
    from .serialization import read_feature_dir
    return read_feature_dir(data_dir) if data_dir else validation_set(cfg)


def _load_model(args) -> tuple[Model, ExperimentConfig]:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if args.config is None and (ckpt.parent / "config.json").exists():
        args.config = str(ckpt.parent / "config.json")
    cfg = _config(args)
    model = Model.init(cfg.model, cfg.train.seed)
    model.load_state(load_checkpoint(ckpt))
    return model, cfg


# ---------------------------------------------------------------- verbs

def cmd_train(args) -> int:
    from .experiments import run_training
    cfg = _config(args)
    run_dir = _run_dir(args, cfg, config_mod.format_layers(cfg.model.encoder.layer_kinds))
    summary = run_training(cfg, run_dir)
    print(json.dumps({"run_dir": str(run_dir), **summary}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = _load_model(args)
    utts = _dataset(cfg, args.data)
    if not utts:
        raise UsageError("evaluation dataset is empty")
    err, hyps = evaluate(model, utts, cfg.vocab())
    report = {"checkpoint": str(args.checkpoint), "utterances": len(utts), "token_error": err}
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiments import sweep
    cfg = _config(args)
    out = _run_dir(args, cfg, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config_mod.dumps(cfg) + "\n")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = sweep(cfg, args.splits.split(","), seeds, out, jobs=args.jobs)
    for r in rows:
        print(f"{r['split']},{r['seed']},{r['token_error']},{r['status']}")
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .experiments import analyze
    model, cfg = _load_model(args)
    utts = _dataset(cfg, args.data)
    if args.limit:
        utts = utts[:args.limit]
    if not utts:
        raise UsageError("analysis dataset is empty")
    try:
        res = analyze(model, utts, grid=args.grid)
    except ValueError as exc:
        if "no self-attention" in str(exc):
            raise UsageError(f"{exc}; analyze needs at least one SA layer") from None
        raise
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "analysis"
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    save_attention_dump(out / "attention.attn", res.dump)
    for li, layer_maps in enumerate(res.averaged):
        for hi, a in enumerate(layer_maps):
            stem = out / "heatmaps" / f"layer{li + 1:02d}_head{hi}"
            write_pgm(stem.with_suffix(".pgm"), a)
            write_matrix_csv(stem.with_suffix(".csv"), a)
    with open(out / "diagonality.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "head", "bandwidth", "score"])
        w.writerows(res.report.rows())
    with open(out / "offsets.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "head", "mean_offset"])
        w.writerows([(li + 1, hi, o) for li, layer in enumerate(res.report.offsets)
                     for hi, o in enumerate(layer)])
    with open(out / "residuals.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "mha_identity_residual"])
        w.writerows([(li + 1, r) for li, r in enumerate(res.residuals)])
    for li in range(len(res.report.scores)):
        print(f"layer {li + 1}: D1 {res.report.layer_mean(li, 1):.3f} "
              f"residual {res.residuals[li]:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    lengths = [int(n) for n in args.lengths.split(",")]
    reports = [time_scaling_bench(kind, lengths, args.repeats, args.d_att, args.d_ff, args.heads)
               for kind in ("SA", "FF")]
    cfg = _config(args) if args.config else None
    out = Path(args.out) if args.out else Path("bench.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["section", "kind", "n", "value"])
        for r in reports:
            w.writerows([("time", r.kind, n, t) for n, t in zip(r.lengths, r.times)])
        for r in reports:
            w.writerow(("slope", r.kind, "", r.slope))
        for r in reports:
            w.writerow(("params", r.kind, "", r.params))
        if cfg is not None:
            pc = param_count(cfg.model.encoder)
            w.writerow(("params", "frontend", "", pc.frontend))
            w.writerow(("params", "encoder_total", "", pc.total))
    for r in reports:
        print(f"{r.kind}: slope {r.slope:.3f} doubling {r.doubling_ratio():.2f} params {r.params} "
              f"(threads=1, exclusive)")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    spec = cfg.data.synthetic
    if spec is None:
        raise UsageError("gen-data needs a synthetic data section")
    out = Path(args.out) if args.out else Path("data")
    vocab = cfg.vocab()
    write_feature_dir(out / "train", gen_synthetic(spec, cfg.data.seed, vocab))
    valid = dataclasses.replace(spec, num_utterances=cfg.data.valid_utterances)
    write_feature_dir(out / "valid", gen_synthetic(valid, cfg.data.seed + 1, vocab))
    print(f"wrote {out / 'train'} and {out / 'valid'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    """Finite-difference check of every parameter of a tiny model."""
    from .experiments import tiny_gradcheck_problem

    model, batch, vocab = tiny_gradcheck_problem(args.seed or 0)
    report = grad_check(lambda: model.loss(batch, vocab, 0.3).total, model.named_parameters(),
                        tol=1e-4, n_coords=args.coords)
    for name, err in report.max_rel_error.items():
        print(f"{name}\t{err:.3e}")
    print(f"worst {report.worst:.3e} -> {'ok' if report.ok else 'FAILED'}")
    return EXIT_OK if report.ok else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--out", help="output directory (or file for bench/eval)")
    common.add_argument("--layers", help="encoder preset such as 11sa+1ff")
    common.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="dotted config override, value parsed as JSON; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hybridsan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[common], help="train one model").set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="token error of a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--data", help="feature directory (default: the config's validation set)")
    ev.set_defaults(fn=cmd_eval)

    sw = sub.add_parser("sweep", parents=[common], help="train every split x seed cell")
    sw.add_argument("--splits", default="4sa+0ff,3sa+1ff,2sa+2ff,1sa+3ff,0sa+4ff")
    sw.add_argument("--seeds", default="0,1,2")
    sw.add_argument("--jobs", type=int, default=1)
    sw.set_defaults(fn=cmd_sweep)

    an = sub.add_parser("analyze", parents=[common], help="attention maps and diagnostics")
    an.add_argument("checkpoint")
    an.add_argument("--data")
    an.add_argument("--grid", type=int, default=32)
    an.add_argument("--limit", type=int, default=0, help="use only the first N utterances")
    an.set_defaults(fn=cmd_analyze)

    be = sub.add_parser("bench", parents=[common], help="SA vs FF forward-time scaling")
    be.add_argument("--lengths", default="64,128,256,512,1024")
    be.add_argument("--repeats", type=int, default=7)
    be.add_argument("--d-att", type=int, default=256)
    be.add_argument("--d-ff", type=int, default=2048)
    be.add_argument("--heads", type=int, default=4)
    be.set_defaults(fn=cmd_bench)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic task to disk").set_defaults(
        fn=cmd_gen_data)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--coords", type=int, default=32)
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ManifestMismatch, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
