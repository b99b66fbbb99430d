"""Command-line driver: preprocess, train, canary-eval, budget.

Exit codes: 0 success, 1 internal invariant violation, 2 input error,
3 privacy-accounting refusal. ``SPARSEDP_NUM_THREADS`` caps the BLAS
thread pools.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import accountant
from .config import ExperimentConfig, apply_overrides, load_config, serialize_config
from .embedding import (
    STOP_WORDS,
    CbowOracle,
    EmbeddingTable,
    load_stop_words,
    preprocess,
    read_samples,
    read_vocabulary,
    write_samples,
    write_vocabulary,
)
from .errors import AssumptionViolatedError, InvalidParameterError, InvariantViolation
from .mechanisms import NoiseSource
from .memorization import Canary, draw_canaries, evaluate_canaries, generate_and_insert, write_report
from .trainer import MODES, budget_report, train

log = logging.getLogger("sparsedp")

EXIT_OK, EXIT_INVARIANT, EXIT_INPUT, EXIT_ACCOUNTING = 0, 1, 2, 3
THREADS_ENV = "SPARSEDP_NUM_THREADS"

# seed-stream keys, so that each stage draws from its own stream
_PREPROCESS, _INIT, _CANARIES, _CONTROLS, _RANKS = 0, 1, 2, 3, 4


class InputError(Exception):
    """A missing or unreadable input file."""


def _require(path: Path) -> Path:
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    return path


def _stop_words(spec: str):
    if spec == "builtin":
        return STOP_WORDS
    if spec == "none":
        return frozenset()
    return load_stop_words(_require(Path(spec)))


def _data_paths(cfg: ExperimentConfig) -> dict[str, Path]:
    d = Path(cfg.data_dir)
    return {name: d / f"{name}.txt" for name in ("vocab", "train", "val", "test")}


def _out_paths(cfg: ExperimentConfig, mode: str) -> dict[str, Path]:
    d = Path(cfg.out_dir)
    return {"checkpoint": d / f"{mode}.checkpoint.txt", "metrics": d / f"{mode}.metrics.jsonl",
            "canaries": d / "canaries.txt", "report": d / f"{mode}.canary_report.jsonl"}


def write_checkpoint(params: np.ndarray, rows: int, path) -> None:
    """Text checkpoint: a header with the dimension, then one value per line."""
    params = np.asarray(params, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# dimension={params.size} rows={rows} cols={params.size // rows}\n")
        np.savetxt(fh, params, fmt="%.17g")


def read_checkpoint(path) -> tuple[np.ndarray, int]:
    with open(_require(Path(path)), encoding="utf-8") as fh:
        header = fh.readline().lstrip("#").split()
        meta = dict(kv.split("=", 1) for kv in header if "=" in kv)
        if "dimension" not in meta or "rows" not in meta:
            raise InvalidParameterError(f"{path}: missing checkpoint header")
        params = np.loadtxt(fh, dtype=np.float64, ndmin=1)
    if params.size != int(meta["dimension"]):
        raise InvalidParameterError(f"{path}: header says {meta['dimension']} values, found {params.size}")
    return params, int(meta["rows"])


def write_canaries(canaries, n_c: int, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n_c={n_c}\n")
        for c in canaries:
            fh.write(f"{c.c0} {c.c1} {c.c2}\n")


def read_canaries(path) -> tuple[list[Canary], int]:
    lines = _require(Path(path)).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# n_c="):
        raise InvalidParameterError(f"{path}: missing canary header")
    n_c = int(lines[0].split("=", 1)[1])
    return [Canary(*map(int, ln.split())) for ln in lines[1:] if ln.strip()], n_c


# -- commands --------------------------------------------------------------------

def cmd_preprocess(cfg: ExperimentConfig, args) -> int:
    corpus = args.corpus or cfg.corpus
    if not corpus:
        raise InputError("no corpus given (use --corpus or set corpus in the config)")
    text = _require(Path(corpus)).read_text(encoding="utf-8")
    pre = preprocess(text, cfg.vocab_size, cfg.window, cfg.negatives,
                     (cfg.train_size, cfg.val_size, cfg.test_size),
                     NoiseSource(cfg.seed).spawn(_PREPROCESS), stop_words=_stop_words(cfg.stop_words))
    paths = _data_paths(cfg)
    paths["vocab"].parent.mkdir(parents=True, exist_ok=True)
    write_vocabulary(pre.vocab, paths["vocab"])
    for split in ("train", "val", "test"):
        write_samples(getattr(pre, split), paths[split])
    print(json.dumps({"vocab_size": len(pre.vocab), "train": len(pre.train),
                      "val": len(pre.val), "test": len(pre.test), "data_dir": cfg.data_dir}))
    return EXIT_OK


def _load_training_data(cfg: ExperimentConfig):
    paths = _data_paths(cfg)
    vocab = read_vocabulary(_require(paths["vocab"]))
    train_samples = read_samples(_require(paths["train"]))
    held = paths["test"] if paths["test"].is_file() else paths["val"]
    held_samples = read_samples(held) if held.is_file() else None
    return vocab, train_samples, held_samples


def cmd_train(cfg: ExperimentConfig, args) -> int:
    mode = args.mode or cfg.mode
    vocab, samples, held = _load_training_data(cfg)
    V, dim = len(vocab), cfg.embedding_dim
    root = NoiseSource(cfg.seed)
    canaries = None
    if cfg.canary_nc > 0:
        samples, canaries = generate_and_insert(samples, V, cfg.canary_count, cfg.canary_nc,
                                                root.spawn(_CANARIES), window=cfg.window)
    tcfg = cfg.train_config(n=len(samples), mode=mode)
    # refuse before any training work if the accounting hypotheses fail
    budget = budget_report(tcfg, mode, len(samples))

    out = _out_paths(cfg, mode)
    out["metrics"].parent.mkdir(parents=True, exist_ok=True)
    if canaries is not None:
        write_canaries(canaries, cfg.canary_nc, out["canaries"])
    oracle = CbowOracle(samples, V, dim)
    eval_oracle = CbowOracle(held, V, dim) if held is not None and len(held) else None
    init = EmbeddingTable.random(V, dim, root.spawn(_INIT), scale=cfg.init_scale).flat()

    header = {"mode": mode, "n": len(samples), "dimension": V * dim,
              "eps_total": None if budget is None else budget.epsilon,
              "delta_total": None if budget is None else budget.delta,
              "noise_multiplier": None if mode == "non_private" else tcfg.noise_multiplier,
              "selection_epsilon": tcfg.selection.epsilon if mode.startswith("sparse") else 0.0,
              "delta_prime": tcfg.delta_prime,
              "steps": tcfg.epochs * (len(samples) // tcfg.batch_size)}
    with open(out["metrics"], "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": header}) + "\n")

        def on_epoch(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

        result = train(oracle, init, tcfg, mode, eval_oracle=eval_oracle, on_epoch=on_epoch)
    write_checkpoint(result.params, V, out["checkpoint"])
    print(json.dumps({"mode": mode, "final_train_loss": result.history[-1]["train_loss"],
                      "eps_total": header["eps_total"], "delta_total": header["delta_total"],
                      "checkpoint": str(out["checkpoint"]), "metrics": str(out["metrics"])}))
    return EXIT_OK


def cmd_canary_eval(cfg: ExperimentConfig, args) -> int:
    mode = args.mode or cfg.mode
    out = _out_paths(cfg, mode)
    params, rows = read_checkpoint(args.checkpoint or out["checkpoint"])
    table = EmbeddingTable.from_flat(params, rows)
    canaries, n_c = read_canaries(args.canaries or out["canaries"])
    if args.nc is not None and args.nc != n_c:
        raise InvalidParameterError(f"canary file was inserted with n_c={n_c}, not {args.nc}")
    root = NoiseSource(cfg.seed)
    ranks_seed = int(root.spawn(_RANKS).rng.integers(2**63))
    controls = draw_canaries(cfg.control_count, table.vocab_size, root.spawn(_CONTROLS))
    reports = [evaluate_canaries(table, canaries, n_c, cfg.canary_sample_size, ranks_seed,
                                 cfg.canary_bins, label="canary")]
    if controls:
        reports.append(evaluate_canaries(table, controls, 0, cfg.canary_sample_size, ranks_seed + 1,
                                         cfg.canary_bins, label="control"))
    path = Path(args.output) if args.output else out["report"]
    path.parent.mkdir(parents=True, exist_ok=True)
    write_report(reports, path)
    for rep in reports:
        print(json.dumps(rep.summary()))
    return EXIT_OK


def cmd_budget(cfg: ExperimentConfig, args) -> int:
    n = args.n or cfg.train_size
    modes = [args.mode] if args.mode else [m for m in MODES if m != "non_private"]
    status = EXIT_OK
    for mode in modes:
        record = {"mode": mode, "n": n}
        try:
            tcfg = cfg.train_config(n=n, mode=mode)
            T = tcfg.epochs * (n // tcfg.batch_size)
            eps_sel = tcfg.selection.epsilon if mode != "dp_sgd" else 0.0
            record.update(steps=T, noise_multiplier=tcfg.noise_multiplier,
                          selection_epsilon=eps_sel, delta_prime=tcfg.delta_prime)
            record["assumption_lhs"] = accountant.sparse_sgd_assumption_lhs(
                eps_sel, tcfg.delta_prime, tcfg.noise_multiplier, tcfg.batch_size, n)
            record["assumption_rhs"] = 1 / max(T, 1) ** 0.5
            total = budget_report(tcfg, mode, n)
            record.update(eps_total=total.epsilon, delta_total=total.delta)
        except AssumptionViolatedError as exc:
            record["refused"] = str(exc)
            status = EXIT_ACCOUNTING
        print(json.dumps(record))
    return status


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsedp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file (defaults apply otherwise)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key; repeatable")

    p = sub.add_parser("preprocess", help="corpus text to vocabulary and sample files")
    common(p)
    p.add_argument("--corpus", help="UTF-8 plain-text corpus, one sentence per line")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train embeddings, write checkpoint and metrics")
    common(p)
    p.add_argument("--mode", choices=MODES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("canary-eval", help="rank inserted canaries and control phrases")
    common(p)
    p.add_argument("--mode", choices=MODES, help="selects the default checkpoint path")
    p.add_argument("--checkpoint")
    p.add_argument("--canaries")
    p.add_argument("--nc", type=int, help="expected insertion count (checked against the canary file)")
    p.add_argument("--output")
    p.set_defaults(func=cmd_canary_eval)

    p = sub.add_parser("budget", help="print the accountant's budget for a config")
    common(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--n", type=int, help="training-set size (default: train_size)")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("show-config", help="print the effective config")
    common(p)
    p.set_defaults(func=lambda cfg, args: print(serialize_config(cfg), end="") or EXIT_OK)
    return parser


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(_require(Path(args.config))) if args.config else ExperimentConfig()
        cfg = apply_overrides(cfg, args.overrides)
        with _thread_limit():
            return args.func(cfg, args)
    except AssumptionViolatedError as exc:
        print(f"sparsedp: privacy accounting refused: {exc}", file=sys.stderr)
        return EXIT_ACCOUNTING
    except InvariantViolation as exc:
        print(f"sparsedp: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (InputError, InvalidParameterError, OSError, ValueError) as exc:
        print(f"sparsedp: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
