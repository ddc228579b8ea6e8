"""crossmatch command line: generate, train, eval, gradcheck.

Exit codes: 0 success, 1 I/O failure, 2 config/contract error,
3 numerical failure, 4 verification failure.
"""
import argparse
import dataclasses
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import data as datamod
from . import kernels, trainer, verify
from .errors import ContractError, CrossMatchError, DimensionError
from .retrieval import evaluate, write_reports

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4

# flag name -> SyntheticSpec field
SPEC_FLAGS = {
    "identities": "num_identities",
    "per_id": "per_identity",
    "latent_dim": "latent_dim",
    "visual_dim": "visual_dim",
    "vocab_size": "vocab_size",
    "filler_vocab": "filler_vocab",
    "phrase_len": "phrase_len",
    "len_min": "sentence_len_min",
    "len_max": "sentence_len_max",
    "visual_noise": "visual_noise",
    "text_noise": "text_noise",
    "val_per_id": "val_per_identity",
    "test_per_id": "test_per_identity",
}
ADVERSARIAL_FLAG = {"on": "alternating", "alternating": "alternating", "grl": "gradient_reversal",
                    "gradient_reversal": "gradient_reversal", "off": "off"}


@dataclasses.dataclass
class RunManifest:
    command: str
    tool_version: str
    backend: str
    seed: int
    inputs: dict
    outputs: dict
    budget_seconds: float = None
    train_config: trainer.TrainConfig = None
    data_spec: datamod.SyntheticSpec = None

    def dumps(self):
        lines = [f"command = {self.command}", f"tool_version = {self.tool_version}",
                 f"backend = {self.backend}", f"seed = {self.seed}",
                 f"budget_seconds = {'none' if self.budget_seconds is None else repr(self.budget_seconds)}"]
        lines += [f"input.{k} = {v}" for k, v in sorted(self.inputs.items())]
        lines += [f"output.{k} = {v}" for k, v in sorted(self.outputs.items())]
        if self.data_spec is not None:
            lines += ["[data]", cfgmod.dumps(self.data_spec).rstrip("\n")]
        if self.train_config is not None:
            lines += ["[train]", self.train_config.dumps().rstrip("\n")]
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_kv_file(path):
    return cfgmod.parse_kv(Path(path).read_text(encoding="utf-8")) if path else {}


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ContractError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    values = _read_kv_file(args.spec)
    for flag, name in SPEC_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[name] = str(v)
    if args.pair_only:
        values["pair_only"] = "true"
    if args.seed is not None:
        values["seed"] = str(args.seed)
    spec = cfgmod.build(datamod.SyntheticSpec, values).validate()
    ds = datamod.generate(spec)
    if spec.pair_only:
        ds = datamod.assign_unique_ids(ds)
    datamod.save(ds, args.out)
    counts = {s: len(ds.indices(s)) for s in datamod.SPLITS}
    print(f"wrote {args.out}: {len(ds)} visual and {len(ds)} textual samples, "
          f"{ds.num_classes} identities (train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return EXIT_OK


def cmd_train(args):
    values = _read_kv_file(args.config)
    values.update(_overrides(args.set))
    if args.adversarial is not None:
        values["adversarial"] = ADVERSARIAL_FLAG[args.adversarial]
    if args.seed is not None:
        values["seed"] = str(args.seed)
    for name in ("stage1_epochs", "stage2_epochs"):
        if getattr(args, name) is not None:
            values[name] = str(getattr(args, name))
    cfg = cfgmod.build(trainer.TrainConfig, values).validate()
    ds = datamod.load(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="train", tool_version=__version__, backend=kernels.backend(), seed=cfg.seed,
        inputs={"data": args.data, "data_sha256": file_sha256(args.data)},
        outputs={"dir": str(out), "best": "best.ckpt", "final": "final.ckpt",
                 "log": "train_log.csv", "val_log": "val_log.csv"},
        budget_seconds=args.budget, train_config=cfg, data_spec=ds.spec,
    )
    manifest.write(out / "manifest.txt")
    t0 = time.perf_counter()
    res = trainer.run_training(ds, cfg, out_dir=out)
    elapsed = time.perf_counter() - t0
    print(f"trained {len(res.log.rows)} iterations in {elapsed:.1f}s; best val rank-1 {res.best_val_rank1:.4f} "
          f"(epoch {res.best_epoch}), final {res.final_val_rank1:.4f}")
    if args.budget is not None and elapsed > args.budget:
        print(f"warning: run took {elapsed:.1f}s, over the {args.budget:g}s budget", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args):
    model, _, _ = trainer.load_model(args.checkpoint)
    ds = datamod.load(args.data)
    if ds.spec.visual_dim != model.dims.visual_dim or ds.spec.vocab_size > model.dims.vocab_size:
        raise DimensionError(f"checkpoint expects visual_dim {model.dims.visual_dim} / vocab {model.dims.vocab_size}, "
                             f"data has {ds.spec.visual_dim} / {ds.spec.vocab_size}")
    if len(ds.indices(args.split)) == 0:
        raise ContractError(f"dataset has an empty {args.split!r} split")
    cfg = trainer.TrainConfig(batch_size=2)
    phi, tau, labels = trainer.Trainer(model, cfg).embed(ds, args.split)
    directions = ["t2i", "i2t"] if args.direction == "both" else [args.direction]
    reports = []
    for d in directions:
        probe, gallery = (tau, phi) if d == "t2i" else (phi, tau)
        reports.append(evaluate(probe, gallery, labels, labels, d, keep_ranked=args.dump_ranked))
    written = write_reports(reports, args.out, dump_ranked=args.dump_ranked)
    for r in reports:
        print(f"{r.direction}: rank1 {r.rank[1]:.4f} rank5 {r.rank.get(5, float('nan')):.4f} "
              f"rank10 {r.rank.get(10, float('nan')):.4f} ap50 {r.ap50:.4f}")
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_gradcheck(args):
    corrupt = tuple(args.corrupt or ())
    unknown = [c for c in corrupt if c not in verify.COMPONENTS]
    if unknown:
        raise ContractError(f"unknown component(s): {', '.join(unknown)}")
    results, elapsed = verify.run_all(args.seed, args.instances, args.tol, corrupt)
    print(verify.format_report(results, elapsed, args.tol))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="crossmatch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic paired dataset")
    g.add_argument("--spec", help="key = value file with SyntheticSpec fields")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    for flag, name in SPEC_FLAGS.items():
        typ = float if "noise" in flag else int
        g.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, help=name)
    g.add_argument("--pair-only", action="store_true", help="give every pair its own identity")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="two-stage training with best/final checkpoints")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value file with TrainConfig fields")
    t.add_argument("--out", required=True)
    t.add_argument("--adversarial", choices=sorted(ADVERSARIAL_FLAG))
    t.add_argument("--seed", type=int)
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--stage2-epochs", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one TrainConfig field")
    t.add_argument("--budget", type=float, help="wall-clock budget in seconds (recorded, warned on overrun)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--direction", choices=("t2i", "i2t", "both"), default="both")
    e.add_argument("--split", choices=datamod.SPLITS, default="test")
    e.add_argument("--out", required=True, help="metrics CSV; CMC curves are written next to it")
    e.add_argument("--dump-ranked", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss and encoder")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=3, help="random instances per component")
    c.add_argument("--tol", type=float, default=verify.TOL)
    c.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)  # negative-control hook
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):  # non-finite values raise NumericalError instead
            return args.func(args)
    except CrossMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
