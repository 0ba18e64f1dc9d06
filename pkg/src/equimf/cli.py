"""Command line: ``equimf {train|sample|eval|equicheck}``.

Exit codes: 0 success, 1 equivariance check failed, 2 configuration error,
3 numeric abort, 4 I/O or corrupt artifact.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .backbone import EquiMF
from .config import RunConfig, load_config
from .errors import (BadConfig, CorruptCheckpoint, NonFinite, TooLarge, UnknownState,
                     Unsatisfiable)
from .evalkit import equivariance_suite, stability_summary, tv_distance
from .graph import load_jsonl, save_jsonl
from .sampler import SampleConfig, sample
from .toydata import DatasetSpec, exact_space, generate, load_dataset, save_dataset
from .trainer import Trainer, load_checkpoint, metrics_line

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


class RunError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


@contextlib.contextmanager
def run_lock(directory: Path):
    """Exclusive ownership of a run directory for the lifetime of one command."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError(EXIT_IO, f"{directory} is locked by another run") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def _refuse_existing(*paths: Path):
    for p in paths:
        if p.exists():
            raise RunError(EXIT_IO, f"refusing to overwrite {p}")


def _threads():
    value = os.environ.get("EQUIMF_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            raise BadConfig(f"expected an integer, got {value!r}", key="EQUIMF_THREADS") from None
        if n < 1:
            raise BadConfig("must be positive", key="EQUIMF_THREADS")
        torch.set_num_threads(n)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, iterations=args.iterations))
    out = Path(args.out)
    ckpt_path = out / "checkpoint.pt"
    metrics_path = out / "metrics.jsonl"
    with run_lock(out):
        if args.resume:
            ckpt = load_checkpoint(ckpt_path)
            if ckpt.train_config != dataclasses.replace(cfg.train, iterations=ckpt.train_config.iterations):
                raise BadConfig("differs from the checkpoint being resumed", key="train")
            dataset, spec = load_dataset(out / "dataset")
        else:
            _refuse_existing(ckpt_path, metrics_path, out / "config.ini")
            ckpt = None
            if cfg.data_path:
                dataset, spec = load_dataset(cfg.data_path)
            else:
                spec = cfg.data
                dataset = generate(spec)
            save_dataset(dataset, spec, out / "dataset")
            (out / "config.ini").write_text(cfg.to_ini())
        trainer = Trainer(dataset, spec.b, spec.a, cfg.train, checkpoint=ckpt,
                          extra={"data": spec.to_dict()})
        with open(metrics_path, "a") as fh:
            def emit(m):
                fh.write(metrics_line(m) + "\n")
                fh.flush()
                if args.verbose:
                    print(metrics_line(m))
            try:
                history = trainer.run(cfg.train.iterations, emit, ckpt_path)
            except NonFinite:
                trainer.save(out / "checkpoint.aborted.pt")
                raise
        last = history[-1] if history else {"step": trainer.step}
        print(json.dumps({"checkpoint": str(ckpt_path), **last}))
    return EXIT_OK


# -- sample -------------------------------------------------------------------

def cmd_sample(args) -> int:
    cfg = _config(args)
    overrides = {}
    if args.nfe is not None:
        overrides["steps"] = args.nfe
    if args.distortion is not None:
        overrides["distortion"] = args.distortion
    if args.n_samples is not None:
        overrides["n_samples"] = args.n_samples
    if args.n is not None:
        overrides["n"] = args.n
    try:
        scfg = dataclasses.replace(cfg.sample, **overrides)
    except BadConfig as exc:
        raise BadConfig(str(exc).split(": ", 1)[-1], key=f"sample.{exc.key}") from None
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    out = Path(args.out)
    samples_path, sidecar = out / "samples.jsonl", out / "samples.json"
    with run_lock(out):
        _refuse_existing(samples_path, sidecar)
        graphs, _ = sample(model, scfg, ckpt.node_counts)
        save_jsonl(graphs, samples_path)
        meta = {"steps": scfg.steps, "distortion": scfg.distortion,
                "n_samples": scfg.n_samples, "seed": scfg.seed,
                "checkpoint_step": ckpt.step, "data": ckpt.extra.get("data")}
        sidecar.write_text(json.dumps(meta, indent=2) + "\n")
        (out / "config.ini").write_text(dataclasses.replace(cfg, sample=scfg).to_ini())
    print(json.dumps({"samples": str(samples_path), "n_samples": len(graphs)}))
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def _sidecar(path: Path) -> dict:
    side = path.with_suffix(".json")
    return json.loads(side.read_text()) if side.exists() else {}


def _spec_for(args, sidecars) -> DatasetSpec:
    if getattr(args, "config", None):
        return load_config(args.config).data
    for meta in sidecars:
        if meta.get("data"):
            return DatasetSpec(**meta["data"])
    return DatasetSpec()


def evaluate_file(path: Path, spec: DatasetSpec) -> dict:
    graphs = load_jsonl(path)
    if not graphs:
        raise RunError(EXIT_IO, f"no samples in {path}")
    chem = spec.chemistry()
    report = stability_summary(graphs, chem)
    if spec.name == "tiny-exact":
        report["tv_distance"] = tv_distance(graphs, exact_space(spec))
    return report


def cmd_eval(args) -> int:
    paths = [Path(p) for p in args.samples]
    sidecars = [_sidecar(p) for p in paths]
    spec = _spec_for(args, sidecars)
    runs = []
    for path, meta in zip(paths, sidecars):
        rep = evaluate_file(path, spec)
        runs.append({"file": str(path), "steps": meta.get("steps"), **rep})
    out = Path(args.out)
    with run_lock(out):
        report_path, curve_path = out / "report.json", out / "stability_vs_steps.csv"
        _refuse_existing(report_path, curve_path)
        report = {k: v for k, v in runs[0].items() if k not in ("file", "steps")}
        report["runs"] = runs
        report_path.write_text(json.dumps(report, indent=2, allow_nan=True) + "\n")
        if len(runs) > 1:
            if any(r["steps"] is None for r in runs):
                raise RunError(EXIT_IO, "stability curve needs a samples.json sidecar per file")
            with open(curve_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["steps", "mol_stability_frac", "atom_stability_mean", "valid", "file"])
                for r in sorted(runs, key=lambda r: r["steps"]):
                    w.writerow([r["steps"], r["mol_stability_frac"], r["atom_stability_mean"],
                                r["valid"], r["file"]])
    print(json.dumps(report))
    return EXIT_OK


# -- equicheck ----------------------------------------------------------------

def cmd_equicheck(args) -> int:
    if args.fresh:
        cfg = _config(args)
        model = EquiMF(cfg.train.model_config(cfg.data.b, cfg.data.a))
    else:
        if not args.checkpoint:
            raise BadConfig("needs --checkpoint or --fresh", key="checkpoint")
        model = load_checkpoint(args.checkpoint).build_model()
    seed = 0 if args.seed is None else args.seed
    report = equivariance_suite(model, args.tolerance, args.probes, np.random.default_rng(seed),
                                posterior_tolerance=args.posterior_tolerance)
    text = report.to_json()
    print(text)
    if args.out:
        out = Path(args.out)
        with run_lock(out):
            _refuse_existing(out / "equicheck.json")
            (out / "equicheck.json").write_text(text + "\n")
    return EXIT_OK if report.passed else EXIT_FAIL


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="equimf", description="Joint discrete-continuous MeanFlow for geometric graphs.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int, help="total steps, overriding the config")
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.pt")
    t.add_argument("--verbose", action="store_true", help="echo metrics to stdout")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate graphs from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--nfe", "--steps", dest="nfe", type=int)
    s.add_argument("--distortion", choices=("identity", "polydec"))
    s.add_argument("--n-samples", type=int)
    s.add_argument("--n", type=int, help="fixed node count")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score sample files")
    e.add_argument("--samples", nargs="+", required=True)
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("equicheck", help="run the equivariance probe suite")
    q.add_argument("--checkpoint")
    q.add_argument("--config")
    q.add_argument("--fresh", action="store_true", help="probe a freshly initialized model")
    q.add_argument("--tolerance", type=float, default=1e-4)
    q.add_argument("--posterior-tolerance", type=float, default=None)
    q.add_argument("--probes", type=int, default=50)
    q.add_argument("--seed", type=int)
    q.add_argument("--out")
    q.set_defaults(func=cmd_equicheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _threads()
        return args.func(args)
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (BadConfig, Unsatisfiable, TooLarge) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFinite as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptCheckpoint, UnknownState) as exc:
        print(f"corrupt or unknown input: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
