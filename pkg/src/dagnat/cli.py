"""Command-line entry point: ``dagnat <command> [options]``.

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path as FsPath
from typing import Optional, Sequence

import numpy as np

from .config import apply_overrides, read_config, render_config
from .data import TaskSpec, frame, load_corpus, write_dataset
from .decoding import DecodeConfig, batch_sample, lookahead_decode
from .dp import viterbi_align
from .errors import ConfigError, DagnatError, VocabError
from .lattice import Hypothesis, Vocabulary
from .metrics import oracle_bleu_curve
from .objectives import strip_special
from .trainer import OBJECTIVES, TrainConfig, evaluate, lattices_for, load_model, sample_outputs, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--workdir", default=".", help="root for every relative path")
    common.add_argument("--config", help="key = value file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    decoding = _Parser(add_help=False)
    decoding.add_argument("--checkpoint", required=True)
    decoding.add_argument("--input", help="one source per line (first tab field)")
    decoding.add_argument("--k", type=int)
    decoding.add_argument("--tau", type=float)
    decoding.add_argument("--top-p", type=float)
    decoding.add_argument("--beta", type=float)
    decoding.add_argument("--dump-paths", action="store_true",
                          help="append the index path and both score components")

    parser = _Parser(prog="dagnat", description="Lattice-decoder training and decoding on synthetic corpora.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write train/valid/test corpora and a vocabulary")
    p = sub.add_parser("train", parents=[common], help="two-stage training")
    p.add_argument("--data", default="data", help="directory written by gen-data")
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--init", help="stage-1 checkpoint; runs stage 2 only")
    sub.add_parser("decode", parents=[common, decoding], help="lookahead decoding")
    sub.add_parser("sample", parents=[common, decoding], help="sampling with beta rescoring")
    p = sub.add_parser("eval", parents=[common, decoding], help="evaluation report as one JSON object")
    p.add_argument("--data", required=True, help="multi-reference corpus file")
    p = sub.add_parser("analyze", parents=[common, decoding], help="per-input oracle BLEU as K grows")
    p.add_argument("--data", required=True, help="multi-reference corpus file")
    return parser


def _resolve(root: FsPath, path: Optional[str]) -> Optional[FsPath]:
    if path is None:
        return None
    p = FsPath(path)
    return p if p.is_absolute() else root / p


def _config_overrides(args, root: FsPath) -> dict[str, str]:
    return read_config(_resolve(root, args.config)) if args.config else {}


def _decode_config(args, loaded) -> DecodeConfig:
    base = DecodeConfig(beta=float(loaded.meta.get("beta", 0.5)))
    kw = {"sample_count": args.k, "temperature": args.tau, "top_p": args.top_p, "beta": args.beta,
          "seed": args.seed}
    return dataclasses.replace(base, **{k: v for k, v in kw.items() if v is not None})


def _read_sources(path: FsPath, vocab: Vocabulary) -> list[tuple[int, ...]]:
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        words = line.split("\t", 1)[0].split()
        if not words:
            raise DagnatError(f"{path}:{lineno}: empty source")
        out.append(frame(vocab.encode(words)))
    return out


def _write_lines(path: Optional[FsPath], lines: Sequence[str]) -> None:
    text = "".join(line + "\n" for line in lines)
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _check_sibling_vocab(data: FsPath, vocab: Vocabulary) -> None:
    sibling = data.parent / "vocab.txt"
    if sibling.exists() and Vocabulary.load(sibling) != vocab:
        raise VocabError(f"{sibling} does not match the checkpoint vocabulary")


def cmd_gen_data(args, root: FsPath) -> None:
    spec = apply_overrides(TaskSpec(), _config_overrides(args, root))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = _resolve(root, args.out or "data")
    write_dataset(out, spec)
    (out / "spec.txt").write_text(render_config(spec), encoding="utf-8")


def cmd_train(args, root: FsPath) -> None:
    cfg = apply_overrides(TrainConfig(), _config_overrides(args, root))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.objective:
        cfg = cfg.with_objective(args.objective)
    data = _resolve(root, args.data)
    vocab = Vocabulary.load(data / "vocab.txt")
    train_corpus = load_corpus(data / "train.tsv", vocab)
    valid = load_corpus(data / "valid.tsv", vocab, multi_ref=True)
    result = train(cfg, train_corpus, valid, vocab, _resolve(root, args.out or "run"),
                   resume=args.resume, stage1_init=_resolve(root, args.init))
    print(json.dumps({"final": str(result.final_path), "alpha": result.alpha}))


def _output_line(h: Hypothesis, vocab: Vocabulary, dump_paths: bool) -> str:
    line = " ".join(vocab.decode(h.tokens))
    if dump_paths:
        line += f"\t{' '.join(map(str, h.path.indices))}\t{h.log_transition!r}\t{h.log_emission!r}"
    return line


def cmd_decode(args, root: FsPath) -> None:
    loaded = load_model(_resolve(root, args.checkpoint))
    sources = _read_sources(_resolve(root, args.input), loaded.vocab)
    outs = [lookahead_decode(lat) for lat in lattices_for(loaded.params, loaded.config, sources, loaded.constraint)]
    _write_lines(_resolve(root, args.out), [_output_line(h, loaded.vocab, args.dump_paths) for h in outs])


def cmd_sample(args, root: FsPath) -> None:
    loaded = load_model(_resolve(root, args.checkpoint))
    decode = _decode_config(args, loaded)
    sources = _read_sources(_resolve(root, args.input), loaded.vocab)
    rng = np.random.default_rng(decode.seed)
    outs = [sample_outputs(lat, decode, rng)[0]
            for lat in lattices_for(loaded.params, loaded.config, sources, loaded.constraint)]
    _write_lines(_resolve(root, args.out), [_output_line(h, loaded.vocab, args.dump_paths) for h in outs])


def cmd_eval(args, root: FsPath) -> None:
    loaded = load_model(_resolve(root, args.checkpoint))
    data = _resolve(root, args.data)
    _check_sibling_vocab(data, loaded.vocab)
    corpus = load_corpus(data, loaded.vocab, multi_ref=True)
    report = evaluate(loaded.params, loaded.config, corpus, _decode_config(args, loaded), loaded.constraint)
    _write_lines(_resolve(root, args.out), [json.dumps(report.to_dict(), sort_keys=True)])


def cmd_analyze(args, root: FsPath) -> None:
    loaded = load_model(_resolve(root, args.checkpoint))
    data = _resolve(root, args.data)
    _check_sibling_vocab(data, loaded.vocab)
    corpus = load_corpus(data, loaded.vocab, multi_ref=True)
    decode = _decode_config(args, loaded)
    rng = np.random.default_rng(decode.seed)
    lines = []
    lats = lattices_for(loaded.params, loaded.config, [ex.source for ex in corpus], loaded.constraint)
    for i, (ex, lat) in enumerate(zip(corpus, lats)):
        samples = [strip_special(h.tokens) for h in batch_sample(lat, decode, rng)]
        record = {"index": i, "oracle_bleu": oracle_bleu_curve(samples, strip_special(ex.sampled_target))}
        if args.dump_paths:
            record["paths"] = [list(viterbi_align(lat, t).indices) if len(t) <= lat.L else None
                               for t in ex.valid_targets]
        lines.append(json.dumps(record))
    _write_lines(_resolve(root, args.out), lines)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "decode": cmd_decode, "sample": cmd_sample,
            "eval": cmd_eval, "analyze": cmd_analyze}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command in ("decode", "sample") and not args.input:
            raise UsageError(f"dagnat {args.command}: --input is required")
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip() + "\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    root = FsPath(args.workdir)
    try:
        COMMANDS[args.command](args, root)
    except ConfigError as exc:
        sys.stderr.write(f"dagnat {args.command}: {exc}\n")
        return 1
    except (DagnatError, OSError, ValueError) as exc:
        sys.stderr.write(f"dagnat {args.command}: error: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
