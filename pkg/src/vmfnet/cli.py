"""``vmfnet`` command line: gen-data, train, eval, ttt, ablate, probe, viz.

Exit codes: 0 success, 2 usage error, 3 invalid configuration, 4 missing or
unreadable files, 5 other runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import __version__
from .checkpoint import load_checkpoint
from .data import CLASS_NAMES, Dataset, generate, load, split
from .errors import ConfigError, VMFNetError
from .evaluation import HD_VARIANTS, REPRESENTATIONS, alignment_probe, evaluate, export_likelihood_maps
from .networks import ModelConfig
from .training import TrainConfig, load_config, run_ablation, train
from .ttt import TTTConfig, ttt_evaluate

log = logging.getLogger("vmfnet")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json_atomic(path: Path, obj) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True, default=str)
        f.write("\n")
    os.replace(tmp, path)


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, default=str) + "\n")


class Run:
    """Collects what a subcommand needs for its run manifest."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out)
        self.started = datetime.now(timezone.utc).isoformat()
        self.inputs: dict[str, str] = {}
        self.config: dict = {k: v for k, v in vars(args).items() if k != "func"}
        self.seed = args.seed if args.seed is not None else 0
        self.before = set()

    def prepare(self) -> None:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create output directory {self.out}: {e}") from e
        self.before = {p for p in self.out.rglob("*") if p.is_file()}

    def add_input(self, path: Path) -> None:
        self.inputs[str(path)] = _sha256(path)

    def finish(self) -> None:
        outputs = sorted(
            str(p.relative_to(self.out)) for p in self.out.rglob("*")
            if p.is_file() and p.name != "run_manifest.json"
        )
        manifest = {
            "subcommand": self.args.command,
            "config": self.config,
            "seed": self.seed,
            "code_version": __version__,
            "torch_version": torch.__version__,
            "inputs": self.inputs,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "outputs": outputs,
        }
        _write_json_atomic(self.out / "run_manifest.json", manifest)


def _load_dataset(run: Run, path: str) -> Dataset:
    ds = load(path)
    run.add_input(Path(path) / "manifest.json")
    return ds


def _load_state(run: Run, path: str):
    state = load_checkpoint(path)
    run.add_input(Path(path))
    return state


def _holdout(args, state, ds: Dataset) -> str:
    hold = args.holdout or state.meta.get("holdout_domain")
    if hold is None:
        raise ConfigError(f"--holdout is required; valid domains: {ds.domains}")
    if hold not in ds.domains:
        raise ConfigError(f"holdout domain {hold!r} not in dataset; valid domains: {ds.domains}")
    return hold


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {
        "learning_rate": args.learning_rate, "iterations": args.iterations,
        "batch_size": args.batch_size, "labeled_fraction": args.labeled_fraction,
        "seed": args.seed,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    model_overrides = {"num_kernels": args.num_kernels, "sigma": args.sigma}
    model_overrides = {k: v for k, v in model_overrides.items() if v is not None}
    if model_overrides:
        cfg = replace(cfg, model=ModelConfig(**{**cfg.model.to_dict(), **model_overrides}))
    return cfg


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, run: Run) -> None:
    generate(run.out, args.num_domains, args.subjects_per_domain, args.slices_per_subject,
             run.seed, args.size)
    print(f"wrote dataset to {run.out}")


def cmd_train(args, run: Run) -> None:
    ds = _load_dataset(run, args.data)
    cfg = _train_config(args)
    if args.holdout not in ds.domains:
        raise ConfigError(f"holdout domain {args.holdout!r} not in dataset; valid domains: {ds.domains}")
    run.config["resolved"] = cfg.to_dict()
    run.seed = cfg.seed
    result = train(cfg, ds, args.holdout, out_dir=run.out)
    last = result.log[-1] if result.log else {}
    print(f"trained {cfg.iterations} iterations; final total loss {last.get('total')}")
    print(f"checkpoint: {run.out / 'checkpoints' / 'final.ckpt'}")


def cmd_eval(args, run: Run) -> None:
    state = _load_state(run, args.checkpoint)
    ds = _load_dataset(run, args.data)
    hold = _holdout(args, state, ds)
    report = evaluate(state.model, ds.by_domain(hold), hd_variant=args.hd_variant)
    table = report.table(CLASS_NAMES)
    (run.out / "metrics.txt").write_text(table + "\n")
    _write_jsonl(run.out / "metrics.jsonl", report.records())
    print(f"held-out domain {hold} (HD variant: {args.hd_variant})")
    print(table)


def cmd_ttt(args, run: Run) -> None:
    state = _load_state(run, args.checkpoint)
    ds = _load_dataset(run, args.data)
    hold = _holdout(args, state, ds)
    cfg = TTTConfig(args.iterations, args.learning_rate, not args.exclude_initial)
    run.config["resolved"] = vars(cfg)
    report = ttt_evaluate(state.model, ds.by_domain(hold), cfg, hd_variant=args.hd_variant)
    (run.out / "ttt.txt").write_text(report.table() + "\n")
    _write_jsonl(run.out / "ttt.jsonl", report.rows)
    _write_jsonl(run.out / "selection_trace.jsonl", report.traces)
    print(report.table())


def cmd_ablate(args, run: Run) -> None:
    ds = _load_dataset(run, args.data)
    cfg = _train_config(args)
    if args.holdout not in ds.domains:
        raise ConfigError(f"holdout domain {args.holdout!r} not in dataset; valid domains: {ds.domains}")
    run.config["resolved"] = cfg.to_dict()
    run.seed = cfg.seed
    rows = run_ablation(cfg, ds, args.holdout, hd_variant=args.hd_variant)
    _write_jsonl(run.out / "ablation.jsonl", rows)
    lines = ["variant\tdice\thd"] + [f"{r['variant']}\t{r['dice']:.2f}\t{r['hd']:.2f}" for r in rows]
    (run.out / "ablation.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_probe(args, run: Run) -> None:
    state = _load_state(run, args.checkpoint)
    ds = _load_dataset(run, args.data)
    hold = _holdout(args, state, ds)
    source, _ = split(ds, hold, 1.0, 0)
    reps = REPRESENTATIONS if args.representation == "all" else (args.representation,)
    rows = []
    for rep in reps:
        ce = alignment_probe(state.model, source, rep, seed=run.seed, shuffle_labels=args.shuffle_labels)
        rows.append({"representation": rep, "cross_entropy": ce, "shuffled": args.shuffle_labels})
        print(f"{rep}\t{ce:.4f}")
    _write_jsonl(run.out / "probe.jsonl", rows)


def cmd_viz(args, run: Run) -> None:
    state = _load_state(run, args.checkpoint)
    ds = _load_dataset(run, args.data)
    subject = args.subject or ds.subjects()[0]
    samples = [s for s in ds.subject_samples(subject) if s.slice_index == args.slice]
    if not samples:
        raise ConfigError(f"no slice {args.slice} for subject {subject!r}")
    paths = export_likelihood_maps(state.model, samples[0].image, run.out, top_k=args.top_k)
    for p in paths:
        print(p)


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global random seed (default: config value or 0)")
    common.add_argument("--threads", type=int, default=None, help="cap on torch intra-op threads")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--out", required=True, help="output directory (receives run_manifest.json)")

    p = argparse.ArgumentParser(prog="vmfnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"vmfnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen-data", parents=[common], formatter_class=fmt, help="generate the synthetic dataset")
    g.add_argument("--num-domains", type=int, default=4)
    g.add_argument("--subjects-per-domain", type=int, default=10)
    g.add_argument("--slices-per-subject", type=int, default=8)
    g.add_argument("--size", type=int, default=64, help="image side length in pixels")
    g.set_defaults(func=cmd_gen_data)

    def train_flags(q):
        q.add_argument("--config", help="YAML file mirroring TrainConfig; flags override it")
        q.add_argument("--data", required=True, help="dataset directory")
        q.add_argument("--holdout", required=True, help="domain id held out as the unseen target")
        q.add_argument("--labeled-fraction", type=float, default=None, help="fraction of labeled subjects per source domain")
        q.add_argument("--iterations", type=int, default=None)
        q.add_argument("--learning-rate", type=float, default=None)
        q.add_argument("--batch-size", type=int, default=None)
        q.add_argument("--num-kernels", type=int, default=None)
        q.add_argument("--sigma", type=float, default=None, help="vMF concentration")

    t = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train on all domains but the holdout")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", parents=[common], formatter_class=fmt, help="train the four loss-ablation variants")
    train_flags(a)
    a.add_argument("--hd-variant", choices=HD_VARIANTS, default="modified")
    a.set_defaults(func=cmd_ablate)

    def model_flags(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--holdout", default=None, help="default: the domain recorded in the checkpoint")

    e = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="Dice/HD on the held-out domain")
    model_flags(e)
    e.add_argument("--hd-variant", choices=HD_VARIANTS, default="modified")
    e.set_defaults(func=cmd_eval)

    tt = sub.add_parser("ttt", parents=[common], formatter_class=fmt, help="test-time training on the held-out domain")
    model_flags(tt)
    tt.add_argument("--iterations", type=int, default=15)
    tt.add_argument("--learning-rate", type=float, default=1e-6)
    tt.add_argument("--exclude-initial", action="store_true", help="do not keep the unadapted model as a candidate")
    tt.add_argument("--hd-variant", choices=HD_VARIANTS, default="modified")
    tt.set_defaults(func=cmd_ttt)

    pr = sub.add_parser("probe", parents=[common], formatter_class=fmt, help="domain-alignment probe on source domains")
    model_flags(pr)
    pr.add_argument("--representation", choices=(*REPRESENTATIONS, "all"), default="all")
    pr.add_argument("--shuffle-labels", action="store_true", help="chance-level control")
    pr.set_defaults(func=cmd_probe)

    v = sub.add_parser("viz", parents=[common], formatter_class=fmt, help="export likelihood channel images")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--subject", default=None, help="default: first subject")
    v.add_argument("--slice", type=int, default=0)
    v.add_argument("--top-k", type=int, default=8)
    v.set_defaults(func=cmd_viz)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    run = Run(args)
    try:
        run.prepare()
        t0 = time.perf_counter()
        args.func(args, run)
        run.finish()
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    except VMFNetError as e:
        kind = {3: "config", 4: "io"}.get(e.exit_code, "runtime")
        print(f"vmfnet {args.command}: {kind} error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"vmfnet {args.command}: io error: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
