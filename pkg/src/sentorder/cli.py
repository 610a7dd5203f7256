"""Command-line entry point: ``sentorder <command> ...``.

Settings are resolved in this order, later wins: built-in defaults, the YAML
config file (sections ``model``, ``train``, ``data``, ``decode``, ``run``),
``--set section.key=value`` overrides, then dedicated flags such as
``--seed``. The resolved configuration is written to the run directory
before training starts.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import analysis as A
from . import data as D
from . import decode as DE
from . import model as M
from . import training as TR
from .errors import (ConfigError, CorruptionError, DomainError, FormatError, NumericError,
                     VocabularyError)

log = logging.getLogger("sentorder")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUNS_ENV = "SENTORDER_RUNS"
SECTIONS = ("model", "train", "data", "decode", "run")

DATA_DEFAULTS = {"train": None, "validation": None, "test": None, "min_freq": 1,
                 "max_vocab": None, "max_sentences": D.MAX_SENTENCES, "embeddings": None}
DECODE_DEFAULTS = {"beam_width": DE.DEFAULT_BEAM, "permutations": 20}
RUN_DEFAULTS = {"seed": 0, "workers": 1, "run_dir": None}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- configuration

@dataclasses.dataclass
class RunConfig:
    model: dict
    train: dict
    data: dict
    decode: dict
    run: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps({k: v for k, v in self.to_dict().items() if k != "run"} | {
            "seed": self.run["seed"]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def model_config(self, vocab_size: int) -> M.ModelConfig:
        return M.ModelConfig.from_dict({**self.model, "vocab_size": vocab_size})

    def train_config(self) -> TR.TrainConfig:
        return TR.TrainConfig.from_dict({**self.train, "seed": self.run["seed"]})


def _defaults() -> dict:
    model = {f.name: f.default for f in dataclasses.fields(M.ModelConfig) if f.name != "vocab_size"}
    train = {f.name: f.default for f in dataclasses.fields(TR.TrainConfig) if f.name != "seed"}
    return {"model": model, "train": train, "data": dict(DATA_DEFAULTS),
            "decode": dict(DECODE_DEFAULTS), "run": dict(RUN_DEFAULTS)}


def _merge(base: dict, override: dict, where: str) -> None:
    for section, values in override.items():
        if section not in SECTIONS:
            raise ConfigError(f"{where}: unknown section {section!r} (expected {', '.join(SECTIONS)})")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"{where}: section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in base[section]:
                raise ConfigError(f"{where}: unknown key {section}.{key}")
            base[section][key] = value


def _parse_set(items) -> dict:
    out: dict = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = yaml.safe_load(raw) if raw else None
    return out


def resolve_config(config_path=None, sets=(), **flags) -> RunConfig:
    """Merge defaults, config file, ``--set`` overrides and explicit flags."""
    cfg = _defaults()
    if config_path is not None:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{config_path}: invalid YAML ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
        _merge(cfg, loaded, str(config_path))
    _merge(cfg, _parse_set(sets), "--set")
    explicit: dict = {}
    for key, value in flags.items():
        if value is None:
            continue
        section, _, name = key.partition("__")
        explicit.setdefault(section, {})[name] = value
    _merge(cfg, explicit, "flags")
    rc = RunConfig(**cfg)
    # validate eagerly so bad settings fail before any work
    M.ModelConfig.from_dict({**rc.model, "vocab_size": 2})
    rc.train_config()
    if int(rc.decode["beam_width"]) < 1:
        raise ConfigError("decode.beam_width must be >= 1")
    if int(rc.run["workers"]) < 1:
        raise ConfigError("run.workers must be >= 1")
    return rc


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def resolve_run_dir(rc: RunConfig) -> Path:
    if rc.run["run_dir"]:
        return Path(rc.run["run_dir"])
    return runs_root() / f"run-{rc.digest()}"


def write_run_config(rc: RunConfig, run_dir: Path) -> Path:
    path = run_dir / "run_config.yaml"
    path.write_text(yaml.safe_dump(rc.to_dict(), sort_keys=True), encoding="utf-8")
    return path


# ---------------------------------------------------------------- helpers

def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_checkpoint(path) -> tuple[TR.Checkpoint, M.ModelConfig, D.Vocab | None]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    ck = TR.load_checkpoint(p)
    vocab = D.Vocab(ck.vocab) if ck.vocab else None
    return ck, ck.model_config, vocab


def _read_docs(path, vocab: D.Vocab | None, max_sentences: int = D.MAX_SENTENCES) -> list[D.Document]:
    raw = D.read_corpus(_require_file(path, "input corpus"))
    if vocab is None:
        raise VocabularyError("checkpoint carries no vocabulary; cannot encode raw text")
    return D.encode_raw(raw, vocab, max_sentences)


def _output_path(args, checkpoint, name: str) -> Path:
    if args.out:
        return Path(args.out)
    base = Path(checkpoint).resolve()
    run_dir = base.parent if base.name in ("best", "latest") else base
    return run_dir / name


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    values = {}
    if args.config:
        try:
            values = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"synthetic spec not found: {args.config}") from None
        values = values.get("synthetic", values)
    for key in ("kind", "seed", "n_train", "n_validation", "n_test"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    spec = D.SyntheticSpec.from_dict(values)
    corpus = D.generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {split: D.write_corpus(docs, out / f"{split}.jsonl")
              for split, docs in corpus.splits().items()}
    (out / "synthetic_spec.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))
    _emit({"out": str(out), "documents": counts})
    return EXIT_OK


def cmd_train(args) -> int:
    rc = resolve_config(args.config, args.set, run__seed=args.seed, run__workers=args.workers,
                        run__run_dir=args.run_dir, data__train=args.train,
                        data__validation=args.validation, data__test=args.test,
                        train__lr=args.lr, train__max_epochs=args.epochs,
                        train__precision=args.precision, decode__beam_width=args.beam)
    paths = {k: _require_file(rc.data[k], f"{k} corpus") for k in ("train", "validation")}
    test_path = _require_file(rc.data["test"], "test corpus") if rc.data["test"] else None
    corpus = D.load_corpus(paths["train"], paths["validation"], test_path,
                           min_freq=rc.data["min_freq"], max_size=rc.data["max_vocab"],
                           max_sentences=rc.data["max_sentences"])
    model_cfg = rc.model_config(len(corpus.vocab))
    train_cfg = rc.train_config()
    init = None
    if rc.data["embeddings"]:
        table = D.load_pretrained_embeddings(_require_file(rc.data["embeddings"], "embeddings"),
                                             corpus.vocab, model_cfg.d_word, train_cfg.seed,
                                             model_cfg.train_embeddings)
        init = M.init_params(model_cfg, train_cfg.seed, train_cfg.precision)
        init["embedding"] = table.matrix
        log.info("pretrained embeddings cover %.1f%% of the vocabulary", 100 * table.coverage)

    run_dir = resolve_run_dir(rc)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_run_config(rc, run_dir)
    result = TR.train(corpus.train, corpus.validation, model_cfg, train_cfg, run_dir=run_dir,
                      vocab=corpus.vocab.itos, init=init, resume=args.resume)
    summary = {"run_dir": str(run_dir), "best_epoch": result.best_epoch,
               "best_val_nll": result.best_val_nll, "stopped_early": result.stopped_early}
    if corpus.test:
        report = DE.evaluate(result.params, corpus.test, model_cfg,
                             beam_width=int(rc.decode["beam_width"]), seed=rc.run["seed"],
                             workers=int(rc.run["workers"]))
        report.write(run_dir / "metrics.json")
        summary.update(accuracy=report.accuracy, mean_tau=report.mean_tau)
    _emit(summary)
    return EXIT_OK


def cmd_order(args) -> int:
    ck, cfg, vocab = _load_checkpoint(args.checkpoint)
    docs = _read_docs(args.input, vocab)
    lines = []
    for doc in docs:
        res = DE.beam_order(ck.params, doc.sentences, args.beam, cfg)
        lines.append({"id": doc.id, "order": res.order, "score": res.score, "beam_width": args.beam})
    if args.out:
        with open(args.out, "w") as fh:
            fh.writelines(json.dumps(r, sort_keys=True) + "\n" for r in lines)
    for r in lines:
        _emit(r)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.predictor == "model":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required for the model predictor")
        ck, cfg, vocab = _load_checkpoint(args.checkpoint)
        docs = _read_docs(args.input, vocab)
        predictor = DE.model_predictor(ck.params, cfg, args.beam)
    else:
        raw = D.read_corpus(_require_file(args.input, "input corpus"))
        tok = D.tokenize_documents(raw)
        vocab = D.Vocab.build(s for _, sents, _ in tok for s in sents)
        docs = D.encode_documents(tok, vocab)
        predictor = DE.oracle_predictor if args.predictor == "oracle" else DE.random_predictor
        ck = cfg = None
    report = DE.evaluate(None, docs, cfg, seed=args.seed, predictor=predictor, workers=args.workers)
    if args.permutations and ck is not None:
        report.discrimination = DE.discrimination_accuracy(
            ck.params, docs, args.permutations, args.seed, cfg).to_dict()
    if args.out or args.checkpoint:
        report.write(_output_path(args, args.checkpoint, "metrics.json"))
    _emit(report.to_dict(records=False))
    return EXIT_OK


def cmd_discriminate(args) -> int:
    ck, cfg, vocab = _load_checkpoint(args.checkpoint)
    docs = _read_docs(args.input, vocab)
    if args.against:
        others = _read_docs(args.against, vocab)
        if len(others) != len(docs):
            raise FormatError(f"{args.input} and {args.against} hold different document counts")
        results = []
        for a, b in zip(docs, others):
            d = DE.discriminate(ck.params, a, b, cfg)
            results.append({"id": a.id, "against": b.id, **dataclasses.asdict(d)})
        for r in results:
            _emit(r)
        out = {"pairs": results}
    else:
        out = DE.discrimination_accuracy(ck.params, docs, args.permutations, args.seed, cfg).to_dict()
        _emit(out)
    path = _output_path(args, args.checkpoint, "discrimination.json")
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_salience(args) -> int:
    ck, cfg, vocab = _load_checkpoint(args.checkpoint)
    docs = _read_docs(args.input, vocab)
    maps = [A.word_salience(ck.params, doc, cfg, vocab) for doc in docs]
    if args.format == "json":
        text = "".join(json.dumps(m.to_dict(), sort_keys=True) + "\n" for m in maps if m.sentences)
    elif args.format == "html":
        text = "".join(A.render_html(m) for m in maps if m.sentences)
    else:
        text = "".join(A.render_ansi(m) + "\n" for m in maps if m.sentences)
    suffix = {"json": "jsonl", "html": "html", "ansi": "txt"}[args.format]
    path = _output_path(args, args.checkpoint, f"salience.{suffix}")
    path.write_text(text, encoding="utf-8")
    if args.format == "ansi":
        sys.stdout.write(text)
    else:
        _emit({"out": str(path), "documents": sum(1 for m in maps if m.sentences)})
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    ck, cfg, vocab = _load_checkpoint(args.checkpoint)
    docs = _read_docs(args.input, vocab)
    path = _output_path(args, args.checkpoint, "sentence_embeddings.jsonl")
    count = A.export_sentence_embeddings(ck.params, docs, path, cfg)
    _emit({"out": str(path), "records": count})
    return EXIT_OK


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sentorder", description="Set-to-sequence sentence ordering.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", required=True, help="output directory for {train,validation,test}.jsonl")
    s.add_argument("--config", help="YAML synthetic spec (optionally under a 'synthetic' key)")
    s.add_argument("--kind", choices=["ordinal", "topic-chain"])
    s.add_argument("--seed", type=int)
    s.add_argument("--n-train", dest="n_train", type=int)
    s.add_argument("--n-validation", dest="n_validation", type=int)
    s.add_argument("--n-test", dest="n_test", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model; writes checkpoints and logs to a run directory")
    t.add_argument("--config", help="YAML run config")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    t.add_argument("--train")
    t.add_argument("--validation")
    t.add_argument("--test", help="optional test split, evaluated with the best checkpoint")
    t.add_argument("--run-dir", dest="run_dir", help=f"defaults to ${RUNS_ENV}/run-<config digest>")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--precision", choices=["float32", "float64"])
    t.add_argument("--beam", type=int)
    t.add_argument("--resume", action="store_true", help="continue from <run-dir>/latest")
    t.set_defaults(func=cmd_train)

    def with_checkpoint(sp, required=True):
        sp.add_argument("--checkpoint", required=required, help="checkpoint directory (e.g. <run>/best)")
        sp.add_argument("--input", required=True, help="corpus file, one JSON document per line")
        sp.add_argument("--out", help="output file (defaults into the run directory)")

    o = sub.add_parser("order", help="order the sentences of each input document")
    with_checkpoint(o)
    o.add_argument("--beam", type=int, default=DE.DEFAULT_BEAM)
    o.set_defaults(func=cmd_order)

    e = sub.add_parser("eval", help="ordering metrics on a corpus")
    with_checkpoint(e, required=False)
    e.add_argument("--beam", type=int, default=DE.DEFAULT_BEAM)
    e.add_argument("--predictor", choices=["model", "oracle", "random"], default="model")
    e.add_argument("--permutations", type=int, default=0,
                   help="also report discrimination with this many permutations per document")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("discriminate", help="original-vs-permuted discrimination")
    with_checkpoint(d)
    d.add_argument("--against", help="second corpus; documents are compared line by line")
    d.add_argument("--permutations", type=int, default=20)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_discriminate)

    a = sub.add_parser("salience", help="gradient-norm word salience")
    with_checkpoint(a)
    a.add_argument("--format", choices=["json", "html", "ansi"], default="json")
    a.set_defaults(func=cmd_salience)

    x = sub.add_parser("export-embeddings", help="write sentence embeddings as JSON lines")
    with_checkpoint(x)
    x.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "beam", None) is not None and args.beam < 1:
            parser.error("--beam must be >= 1")
    except SystemExit as exc:     # argparse exits on --help and on usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, FormatError, VocabularyError,
            CorruptionError, DomainError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
