"""Command-line entry point: ``mtcdetect {gen-data,train,eval,bench}``.

Settings resolve as built-in defaults, then ``--config`` file, then flags.
Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric abort, 4 incompatible
pilot length.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from .covariance import detect_cd
from .errors import FormatError, MTCError, NumericError, ParameterError, StateError
from .evaluation import bench_time, operating_point, roc_sweep
from .io import (ExperimentConfig, read_checkpoint, read_dataset, write_checkpoint, write_curve,
                 write_dataset, write_trace)
from .signal import generate_batch
from .training import train
from .transformer import auto_chunk, predict

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 1, 2, 3, 4

logger = logging.getLogger("mtcdetect")


class UsageError(Exception):
    pass


class IncompatibleError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# config field -> flag type; the flag is the field name with dashes
_SCENARIO_FLAGS = {
    "n_devices": int, "pilot_len": int, "m_antennas": int, "cell_radius_km": float,
    "p_max_dbm": float, "noise_psd_dbm_hz": float, "bandwidth_hz": float, "activity_ratio": float,
}
_MODEL_FLAGS = {"layers": int, "d_model": int, "d_attn": int, "heads": int, "d_ff": int, "c_clip": float}
_TRAIN_FLAGS = {"epochs": int, "steps_per_epoch": int, "batch_size": int, "lr": float,
                "decay_factor": float, "scenario_mode": str, "seed": int}


def _add_flags(parser, table, section):
    group = parser.add_argument_group(section)
    for name, kind in table.items():
        group.add_argument("--" + name.replace("_", "-"), dest=f"{section}__{name}", type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtcdetect", description="Device activity detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="experiment config file (INI)")
        _add_flags(p, _SCENARIO_FLAGS, "scenario")

    p = sub.add_parser("gen-data", help="simulate a labelled dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None, help="samples (default: eval.test_samples)")
    p.add_argument("--seed", type=int, default=None, help="dataset seed (default: seeds.data_seed)")
    p.add_argument("--sample-mode", choices=("sample", "batch"), default="sample",
                   help="new deployment per sample or one for the whole file")
    p.add_argument("--keep-y", action="store_true", help="also store the received signals")

    p = sub.add_parser("train", help="train the transformer detector")
    common(p)
    _add_flags(p, _MODEL_FLAGS, "model")
    _add_flags(p, _TRAIN_FLAGS, "train")
    p.add_argument("--decay-epochs", default=None, help="comma-separated epochs, empty for none")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--trace", default=None, help="loss trace path (default: <out>.trace.tsv)")

    p = sub.add_parser("eval", help="threshold sweep and operating points")
    p.add_argument("--config")
    p.add_argument("--model", required=True, help="checkpoint path or 'covariance'")
    p.add_argument("--data", required=True)
    p.add_argument("--curve", default=None, help="write the curve as TSV")
    p.add_argument("--passes", type=int, default=None, help="coordinate-descent passes")

    p = sub.add_parser("bench", help="single-threaded timing of both detectors")
    p.add_argument("--config")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--chunk", type=int, default=None, help="transformer batch size (default: sized to cache)")
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for section in ("scenario", "model", "train"):
        updates = {key.split("__", 1)[1]: value for key, value in vars(args).items()
                   if key.startswith(section + "__") and value is not None}
        if section == "train" and getattr(args, "decay_epochs", None) is not None:
            try:
                updates["decay_epochs"] = [int(v) for v in args.decay_epochs.split(",") if v.strip()]
            except ValueError as exc:
                raise UsageError(f"--decay-epochs: {exc}") from exc
        elif section == "train" and "epochs" in updates:
            # a shortened run keeps only the configured decays that still fit
            kept = [e for e in cfg.train.decay_epochs if 1 <= e <= updates["epochs"]]
            if kept != cfg.train.decay_epochs:
                logger.warning("dropping decay epochs beyond --epochs %d: %s", updates["epochs"],
                               sorted(set(cfg.train.decay_epochs) - set(kept)))
                updates["decay_epochs"] = kept
        if updates:
            try:
                setattr(cfg, section, replace(getattr(cfg, section), **updates))
            except ParameterError as exc:
                raise UsageError(str(exc)) from exc
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    count = cfg.eval.test_samples if args.count is None else args.count
    if count < 0:
        raise UsageError("--count must be >= 0")
    seed = cfg.data_seed if args.seed is None else args.seed
    batch, ys = generate_batch(cfg.scenario, count, seed, scenario_mode=args.sample_mode, keep_y=args.keep_y)
    write_dataset(args.out, batch, ys if args.keep_y else None)
    rate = float(batch.labels.mean()) if count else 0.0
    print(f"wrote {count} samples (N={cfg.scenario.n_devices}, Lp={cfg.scenario.pilot_len}, "
          f"M={cfg.scenario.m_antennas}) to {args.out}; realised activity rate {rate:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    trace_path = args.trace or f"{args.out}.trace.tsv"

    def report(rec):
        logger.info("epoch %d  mean loss %.6f  lr %.3g", rec.epoch, rec.mean_loss, rec.lr)

    result = train(cfg.train, cfg.model, cfg.scenario, callback=report)
    write_checkpoint(args.out, result.params)
    write_trace(trace_path, result.trace)
    last = result.trace[-1]
    print(f"trained {len(result.trace)} epochs; final mean loss {last.mean_loss:.6f}; "
          f"checkpoint {args.out}; trace {trace_path}")
    return EXIT_OK


def _scores(args, cfg, batch):
    if args.model == "covariance":
        passes = args.passes or cfg.eval.cd_passes
        return np.stack([detect_cd(batch.C[i], batch.B[i], float(batch.noise_var[i]), passes=passes).a
                         for i in range(len(batch))]), "covariance"
    params = read_checkpoint(args.model)
    if params.pilot_len != batch.B.shape[1]:
        raise IncompatibleError(f"checkpoint pilot length {params.pilot_len} does not match "
                                f"dataset pilot length {batch.B.shape[1]}")
    return predict(batch.B, batch.C, params), "transformer"


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    batch, _ = read_dataset(args.data)
    if len(batch) == 0:
        raise UsageError("dataset has no samples")
    scores, name = _scores(args, cfg, batch)
    curve = roc_sweep(scores, batch.labels, cfg.eval.thresholds, detector=name)
    if args.curve:
        write_curve(args.curve, curve)
    print(f"detector {name}: {len(batch)} samples, N={batch.B.shape[2]}, M={batch.m_antennas}")
    print("mode\txi\tpm\tpf\tcrossing")
    for mode in ("pf-eq-pm", "pf-eq-2pm"):
        op = operating_point(curve, mode)
        print(f"{mode}\t{op.xi:.6g}\t{op.pm:.6g}\t{op.pf:.6g}\t{'yes' if op.crossing else 'no'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    batch, _ = read_dataset(args.data)
    if len(batch) == 0:
        raise UsageError("dataset has no samples")
    params = read_checkpoint(args.model)
    if params.pilot_len != batch.B.shape[1]:
        raise IncompatibleError(f"checkpoint pilot length {params.pilot_len} does not match "
                                f"dataset pilot length {batch.B.shape[1]}")
    reps = args.reps or cfg.eval.bench_reps
    warmup = cfg.eval.bench_warmup if args.warmup is None else args.warmup
    items = [batch.sample(i) for i in range(len(batch))]
    passes = []

    def run_cd(s):
        passes.append(detect_cd(s.C, s.B, s.noise_var, passes=cfg.eval.cd_passes).passes_run)

    cd = bench_time(run_cd, items, repetitions=reps, warmup=warmup, min_inferences=1)
    mean_passes = float(np.mean(passes))
    chunk = args.chunk or auto_chunk(batch.B.shape[2], params.config.heads)
    chunk = max(1, min(chunk, len(batch)))
    chunks = [(batch.B[i:i + chunk], batch.C[i:i + chunk]) for i in range(0, len(batch) - chunk + 1, chunk)]
    ht = bench_time(lambda bc: predict(bc[0], bc[1], params, chunk=chunk), chunks,
                    repetitions=reps, warmup=min(warmup, len(chunks)), items_per_call=chunk, min_inferences=1)
    print("detector\tmean_s\tmedian_s\tinferences")
    print(f"covariance\t{cd.mean:.6e}\t{cd.median:.6e}\t{cd.inferences}")
    print(f"covariance per pass\t{cd.mean / mean_passes:.6e}\t{cd.median / mean_passes:.6e}\t{mean_passes:.6g}")
    print(f"transformer\t{ht.mean:.6e}\t{ht.median:.6e}\t{ht.inferences}")
    print(f"speedup (median)\t{cd.median / ht.median:.2f}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mtcdetect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IncompatibleError as exc:
        print(f"mtcdetect: incompatible inputs: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (OSError, FormatError) as exc:
        print(f"mtcdetect: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"mtcdetect: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParameterError, StateError, MTCError) as exc:
        print(f"mtcdetect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
