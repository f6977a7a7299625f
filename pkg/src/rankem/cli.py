"""``rankem`` command line: corpus generation, training, evaluation, geometry
audits, pair classification and the gradient suite.

Exit status: 0 on success, 1 on usage errors, 2 on data or validation errors.
``RANKEM_THREADS`` caps BLAS worker threads (default 1).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import contrast, data, encoder as enc, evaluation, geometry, gmm as gm, trainer
from .gradsuite import gradient_suite

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers


def _read_json(path: str, what: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise data.DataError(f"{path}: invalid JSON in {what} ({exc})") from exc


def _write_json(path: Optional[str], doc) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    sys.stdout.write(text)


def _parse_override(item: str):
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _build_config(args, corpus: data.SyntheticCorpus) -> trainer.TrainConfig:
    """Preset, then the config file, then --seed / --set flags."""
    base = trainer.TrainConfig.desk() if args.preset == "desk" else trainer.TrainConfig()
    doc = dataclasses.asdict(base)
    doc.update(vocab_size=corpus.spec.vocab_size, num_languages=corpus.spec.num_languages)
    if args.config:
        file_doc = _read_json(args.config, "config")
        if not isinstance(file_doc, dict):
            raise data.DataError(f"{args.config}: config must be a JSON object")
        doc.update(file_doc)
    for item in args.set or []:
        key, value = _parse_override(item)
        doc[key] = value
    if args.seed is not None:
        doc["seed"] = args.seed
    return trainer.TrainConfig.from_dict(doc)


def _apply_overrides(config: trainer.TrainConfig, args) -> trainer.TrainConfig:
    doc = dataclasses.asdict(config)
    for item in args.set or []:
        key, value = _parse_override(item)
        if key not in doc:
            raise ValueError(f"unknown config fields: [{key!r}]")
        doc[key] = value
    return trainer.TrainConfig.from_dict(doc)


def _metrics_sink(path: Optional[str]):
    if not path:
        return None, None
    fh = open(path, "w", encoding="utf-8", newline="\n")

    def write(metrics: dict) -> None:
        fh.write(json.dumps(metrics, sort_keys=True) + "\n")

    return fh, write


def _run_training(state, corpus, args, stop_after=None):
    parallel, mono = data.training_streams(corpus)
    fh, sink = _metrics_sink(args.metrics)
    try:
        state = trainer.train(state.config, parallel, mono, state=state, on_metrics=sink,
                              diagnostic_path=f"{args.out}.diagnostic.json", stop_after=stop_after)
    finally:
        if fh:
            fh.close()
    trainer.save_checkpoint(state, args.out)
    return state


def _parse_tokens(text: str) -> tuple:
    parts = text.replace(",", " ").split()
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"token list must be integers, got {text!r}") from exc


def _heldout_embeddings(ckpt: str, data_dir: str):
    state = trainer.load_checkpoint(ckpt)
    corpus = data.load_corpus(data_dir)
    records = corpus.heldout
    if not records:
        raise data.DataError(f"{data_dir}: no held-out records")
    emb = enc.encode_batch(state.encoder, [r.sentence for r in records])
    items = [r.group if r.group is not None else i for i, r in enumerate(records)]
    return emb, [r.language for r in records], items


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    spec = data.SyntheticCorpusSpec()
    if args.spec:
        doc = _read_json(args.spec, "corpus spec")
        if not isinstance(doc, dict):
            raise data.DataError(f"{args.spec}: spec must be a JSON object")
        spec = data.SyntheticCorpusSpec.from_json(doc)
    corpus = data.generate(spec, args.seed)
    data.save_corpus(corpus, args.out)
    counts = {"monolingual": sum(len(v) for v in corpus.monolingual.values()),
              "parallel": len(corpus.parallel), "heldout": len(corpus.heldout)}
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_warmup(args) -> int:
    corpus = data.load_corpus(args.data)
    config = _build_config(args, corpus)
    state = trainer.init_state(config)
    _run_training(state, corpus, args, stop_after=config.phase1_steps)
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = data.load_corpus(args.data)
    if args.resume:
        if args.config or args.seed is not None or args.preset != "desk":
            raise UsageError("--resume takes its config from the checkpoint; only --set may adjust it")
        state = trainer.load_checkpoint(args.resume)
        state.config = _apply_overrides(state.config, args)
    else:
        state = trainer.init_state(_build_config(args, corpus))
    _run_training(state, corpus, args)
    return EXIT_OK


def cmd_eval_retrieval(args) -> int:
    state = trainer.load_checkpoint(args.ckpt)
    corpus = data.load_corpus(args.data)
    acc = evaluation.crosslingual_retrieval(state.encoder, corpus.heldout, pivot=args.pivot)
    spec = corpus.spec
    tail = [l for l in spec.long_tail_languages if l in acc]
    head = [l for l in spec.head_languages if l in acc]
    report = {"pivot": args.pivot, "accuracy": {str(k): v for k, v in sorted(acc.items())},
              "head_mean": float(np.mean([acc[l] for l in head])) if head else None,
              "long_tail_mean": float(np.mean([acc[l] for l in tail])) if tail else None}
    _write_json(args.report, report)
    return EXIT_OK


def cmd_eval_geometry(args) -> int:
    if args.embeddings and (args.ckpt or args.data):
        raise UsageError("give either --embeddings or --ckpt with --data, not both")
    if args.embeddings:
        emb, langs, items = geometry.read_embedding_dump(args.embeddings)
    elif args.ckpt and args.data:
        emb, langs, items = _heldout_embeddings(args.ckpt, args.data)
    else:
        raise UsageError("eval-geometry needs --embeddings or both --ckpt and --data")
    report = geometry.geometry_report(emb, langs, items, ridge=args.ridge)
    _write_json(args.report, report.to_json())
    return EXIT_OK


def cmd_classify_pair(args) -> int:
    state = trainer.load_checkpoint(args.ckpt)
    a = enc.encode(state.encoder, enc.Sentence(_parse_tokens(args.a), args.lang_a))
    b = enc.encode(state.encoder, enc.Sentence(_parse_tokens(args.b), args.lang_b))
    sim = float(np.clip(a @ b, -1.0, 1.0))
    out = {"c_G": gm.predict_rank(state.gmm, a, b),
           "c_M": contrast.predict_rank_encoder(state.anchors, sim),
           "sim": sim}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    emb, langs, items = _heldout_embeddings(args.ckpt, args.data)
    geometry.write_embedding_dump(args.out, emb, langs, items)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kwargs = {}
    if args.config:
        doc = _read_json(args.config, "config")
        cfg = trainer.TrainConfig.from_dict(doc) if isinstance(doc, dict) else None
        if cfg is None:
            raise data.DataError(f"{args.config}: config must be a JSON object")
        kwargs = dict(num_ranks=cfg.num_ranks, tau_base=cfg.tau_base, tau_growth=cfg.tau_growth,
                      num_layers=cfg.num_layers)
    cases = gradient_suite(range(args.seeds), h=args.h, tol=args.tol, **kwargs)
    for c in cases:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.loss:<16} seed={c.seed} coords={c.coordinates} "
              f"max_rel_error={c.max_rel_error:.3e}")
    return EXIT_OK if all(c.passed for c in cases) else EXIT_DATA


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p) -> None:
    p.add_argument("--config", help="TrainConfig JSON; fields override the preset")
    p.add_argument("--preset", choices=["desk", "paper"], default="desk",
                   help="starting config before --config and flags (default: desk)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config field (JSON value), repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write a synthetic corpus directory")
    p.add_argument("--spec", help="SyntheticCorpusSpec JSON (default spec if omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("warmup", help="run phase 1 only")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="JSONL metrics log")
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("train", help="run (or resume) both phases")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="JSONL metrics log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-retrieval", help="held-out retrieval into the pivot language")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pivot", type=int, default=0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-geometry", help="invariance, canonical form and isotropy")
    p.add_argument("--embeddings", help="TSV embedding dump")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--ridge", type=float, default=1e-4)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval_geometry)

    p = sub.add_parser("classify-pair", help="GMM rank, anchor rank and cosine of two sentences")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--a", required=True, help="token ids, space or comma separated")
    p.add_argument("--b", required=True)
    p.add_argument("--lang-a", type=int, default=0)
    p.add_argument("--lang-b", type=int, default=0)
    p.set_defaults(func=cmd_classify_pair)

    p = sub.add_parser("export-embeddings", help="dump held-out embeddings as TSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--config", help="TrainConfig JSON supplying ranks and temperatures")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _limit_threads() -> None:
    raw = os.environ.get("RANKEM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RANKEM_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"RANKEM_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    threadpool_limits(limits=n)


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _limit_threads()
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError, OSError, KeyError, RuntimeError) as exc:
        # DataError, CheckpointError, GeometryError, ... all derive from these
        print(f"rankem: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
