"""Command-line entry point.

Subcommands: gen-data, train, eval, sample, roundtrip, inspect,
selftest.  Failures surface as one JSON object on stderr and a nonzero
exit code; argparse usage errors exit with 2.  The environment variable
DPLX_SEED serves as a seed fallback wherever no explicit seed is given.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, parse_overrides, write_resolved
from .data import (DIFFICULTIES, generate_corpus, load_jsonl, save_jsonl,
                   split_corpus)
from .decoding import evaluate_translation, roundtrip_eval
from .diffusion import ancestral_sample, nearest_units, schedule_from_spec
from .errors import ConfigError, DataError, DplxError
from .model import build_model, parameter_count_formula
from .blocks import palindrome_trace
from .rng import RngHub
from .selftest import run_selftest
from .training import load_checkpoint, train


def _env_seed() -> int | None:
    raw = os.environ.get("DPLX_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"DPLX_SEED must be an integer, got {raw!r}") from exc


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dplx",
                                description="duplex unit-translation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic parallel corpus")
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--vocab", type=int, default=12)
    g.add_argument("--max-len", type=int, default=24)
    g.add_argument("--difficulty", choices=DIFFICULTIES, default="copy")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run the three-stage training procedure")
    t.add_argument("--config", default=None)
    t.add_argument("--data", default=None)
    t.add_argument("--out-dir", default=None)
    t.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config value")

    for name, extra in (("eval", ("--direction", "--beam")),
                        ("roundtrip", ("--order", "--beam")),
                        ("sample", ("--direction", "--n"))):
        s = sub.add_parser(name)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--config", default=None)
        s.add_argument("--data", required=True)
        s.add_argument("--report", default=None)
        s.add_argument("--split", choices=("train", "dev", "test", "all"), default="test")
        if "--direction" in extra:
            s.add_argument("--direction", choices=("fwd", "rev", "both"), default="both")
        if "--order" in extra:
            s.add_argument("--order", choices=("xyx", "yxy"), default="xyx")
        if "--beam" in extra:
            s.add_argument("--beam", type=int, default=10)
        if "--n" in extra:
            s.add_argument("--n", type=int, default=8)
            s.add_argument("--seed", type=int, default=None)
            s.add_argument("--out", default=None)

    i = sub.add_parser("inspect", help="print model structure facts")
    i.add_argument("--config", default=None)
    i.add_argument("--chain", action="store_true",
                   help="print the per-direction sub-module traces")

    sub.add_parser("selftest", help="run built-in verification suites")
    return p


def _file_sets_seed(config_path) -> bool:
    if config_path is None:
        return False
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(Path(config_path).read_text())
    return parser.has_option("train", "seed")


def _train_config(args) -> RunConfig:
    overrides = parse_overrides(args.set or [])
    if args.data is not None:
        overrides.setdefault("data", {})["corpus"] = args.data
    if args.out_dir is not None:
        overrides.setdefault("data", {})["out_dir"] = args.out_dir
    if args.seed is not None:
        overrides.setdefault("train", {})["seed"] = str(args.seed)
    elif "seed" not in overrides.get("train", {}) and not _file_sets_seed(args.config):
        env = _env_seed()
        if env is not None:
            overrides.setdefault("train", {})["seed"] = str(env)
    return load_config(args.config, overrides)


def _cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    pairs = generate_corpus(args.pairs, args.vocab, args.max_len,
                            args.difficulty, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(out, pairs)
    splits = split_corpus(pairs)
    print(json.dumps({"written": str(out), "pairs": len(pairs),
                      "difficulty": args.difficulty, "seed": seed,
                      "split_sizes": {k: len(v) for k, v in splits.items()}}))
    return 0


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    if not cfg.data.corpus:
        raise ConfigError("no corpus given (use --data or [data] corpus=...)")
    pairs = load_jsonl(cfg.data.corpus)
    if not pairs:
        raise DataError(f"empty corpus: {cfg.data.corpus}")
    train_pairs = split_corpus(pairs)["train"]
    if not train_pairs:
        raise DataError("corpus has no training-split pairs")
    out_dir = Path(cfg.data.out_dir)
    write_resolved(cfg, out_dir)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    train(cfg.model, cfg.train, train_pairs, out_dir, stages=stages,
          resume=args.resume)
    print(json.dumps({"out_dir": str(out_dir), "stages": list(stages),
                      "fingerprint": cfg.fingerprint()}))
    return 0


def _load_eval_model(args):
    ckpt = Path(args.checkpoint)
    config_path = args.config
    if config_path is None:
        candidate = ckpt.parent / "config.resolved.ini"
        if not candidate.exists():
            raise ConfigError(
                "no --config given and no config.resolved.ini next to the checkpoint")
        config_path = candidate
    cfg = load_config(config_path)
    hub = RngHub(cfg.train.seed)
    model = build_model(cfg.model, hub)
    load_checkpoint(ckpt, model, None, hub, cfg.fingerprint())
    return cfg, model


def _eval_pairs(args):
    pairs = load_jsonl(args.data)
    if args.split != "all":
        pairs = split_corpus(pairs)[args.split]
    if not pairs:
        raise DataError(f"no pairs in split {args.split!r} of {args.data}")
    return pairs


def _emit_report(report: dict, path) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def _cmd_eval(args) -> int:
    cfg, model = _load_eval_model(args)
    pairs = _eval_pairs(args)
    directions = ("fwd", "rev") if args.direction == "both" else (args.direction,)
    report = {"checkpoint": str(args.checkpoint), "beam": args.beam,
              "split": args.split, "count": len(pairs)}
    for d in directions:
        report[d] = evaluate_translation(model, pairs, d, beam_size=args.beam).as_dict()
    report["roundtrip"] = roundtrip_eval(
        model, [p.src for p in pairs], "xyx", beam_size=args.beam)
    _emit_report(report, args.report)
    return 0


def _cmd_roundtrip(args) -> int:
    _, model = _load_eval_model(args)
    pairs = _eval_pairs(args)
    sources = [p.src if args.order == "xyx" else p.tgt for p in pairs]
    report = roundtrip_eval(model, sources, args.order, beam_size=args.beam)
    report.update({"order": args.order, "split": args.split})
    _emit_report(report, args.report)
    return 0


def _cmd_sample(args) -> int:
    from . import tensor as T
    from .model import encode_units

    cfg, model = _load_eval_model(args)
    pairs = _eval_pairs(args)[: args.n]
    sched = schedule_from_spec(cfg.train.schedule)
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    rng = np.random.default_rng(seed)
    direction = args.direction if args.direction != "both" else "fwd"
    rows = []
    for p in pairs:
        src = p.src if direction == "fwd" else p.tgt
        ref = p.tgt if direction == "fwd" else p.src
        ids = np.asarray([src], dtype=np.int64)
        with T.no_grad():
            memory = encode_units(model, ids, None,
                                  "x" if direction == "fwd" else "y")
        rep = ancestral_sample(memory, len(src), model, sched, rng, direction)
        table = (model.enc_y if direction == "fwd" else model.enc_x).table.data
        rows.append({"src": list(src), "ref": list(ref),
                     "sample": nearest_units(rep, table)})
    report = {"direction": direction, "steps": sched.steps, "seed": seed,
              "samples": rows}
    _emit_report(report, args.report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    return 0


def _cmd_inspect(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    layers = cfg.model.layers
    info = {
        "layers": layers,
        "width": cfg.model.width,
        "vocab": cfg.model.vocab,
        "parameters": parameter_count_formula(cfg.model),
        "trace": palindrome_trace(layers),
        "palindrome": palindrome_trace(layers) == palindrome_trace(layers)[::-1],
    }
    if args.chain:
        per_layer = [palindrome_trace(layers)[4 * i: 4 * i + 4] for i in range(layers)]
        info["chain"] = " ".join(per_layer)
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "roundtrip": _cmd_roundtrip,
        "sample": _cmd_sample,
        "inspect": _cmd_inspect,
        "selftest": lambda a: 0 if run_selftest() else 1,
    }
    try:
        return handlers[args.command](args)
    except DplxError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
