"""Command-line entry points: prepare, train, predict, eval, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, RunConfig, load_config
from .corpus import (TOKENIZERS, DataError, Example, RelationVocab, SpanTriple, example_to_record,
                     examples_from_records, prepare, prepared_labels, read_prepared, tokenize_align, RawExample)
from .decode import Prediction, predict_corpus
from .metrics import report, render_table

logger = logging.getLogger("bidirte")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _is_prepared(path: Path) -> bool:
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("["):
                return False
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                return False
            if "meta" in rec:
                continue
            return "tokens" in rec
    return False


def _load_records(path, config: RunConfig) -> list[dict]:
    """Prepared records from a prepared corpus or a raw benchmark file."""
    path = Path(path)
    if not path.is_file():
        raise CliError(f"cannot read {path}", EXIT_DATA)
    try:
        if _is_prepared(path):
            return read_prepared(path)
        examples, vocab, _ = prepare(path, TOKENIZERS[config.tokenizer], config.max_len, config.match_standard)
        return [example_to_record(ex, vocab) for ex in examples]
    except DataError as e:
        raise CliError(str(e), EXIT_DATA) from e


def _parse_sets(items) -> dict:
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}", EXIT_CONFIG)
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return overrides


def _config_from_args(args) -> RunConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    direction = getattr(args, "direction", None)
    if direction == "s2o":
        overrides.update({"model.s2o": True, "model.o2s": False})
    elif direction == "o2s":
        overrides.update({"model.s2o": False, "model.o2s": True})
    elif direction == "none":
        overrides.update({"model.s2o": False, "model.o2s": False})
    if getattr(args, "no_contrastive", False):
        overrides["contrastive.enabled"] = False
    if getattr(args, "no_relation_prediction", False):
        overrides["model.relation_prediction"] = False
    for flag, key in (("epochs", "train.max_epochs"), ("batch_size", "train.batch_size"), ("lr", "train.lr"),
                      ("seed", "seed"), ("patience", "train.patience"), ("standard", "match_standard")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    try:
        return load_config(getattr(args, "config", None), overrides)
    except ConfigError as e:
        raise CliError(str(e), EXIT_CONFIG) from e


def _prediction_record(ex: Example, pred: Prediction, vocab: RelationVocab) -> dict:
    triples = []
    for t in sorted(pred.triples):
        triples.append({
            "subject": ex.span_text(t.subject), "subject_span": list(t.subject),
            "relation": vocab.label(t.relation),
            "object": ex.span_text(t.object), "object_span": list(t.object),
            "provenance": pred.provenance[t],
        })
    return {"id": ex.uid, "text": ex.text, "tokens": ex.tokens, "triples": triples}


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    config = _config_from_args(args)
    path = Path(args.dataset)
    if not path.is_file():
        raise CliError(f"cannot read dataset {path}", EXIT_DATA)
    try:
        examples, vocab, stats = prepare(path, TOKENIZERS[config.tokenizer], config.max_len,
                                         config.match_standard, strict=args.strict)
    except DataError as e:
        raise CliError(str(e), EXIT_DATA) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or path.stem
    meta = {"source": str(path), "run_config": config.to_flat(), "seed": config.seed}
    with open(out / f"{name}.jsonl", "w", encoding="utf-8") as f:
        f.write(json.dumps({"meta": meta}) + "\n")
        for ex in examples:
            f.write(json.dumps(example_to_record(ex, vocab)) + "\n")
    stats["relations"] = len(vocab)
    stats["meta"] = meta
    _write_json(out / f"{name}.stats.json", stats)
    print(json.dumps({k: v for k, v in stats.items() if k != "meta"}, indent=2))
    return EXIT_OK


def _train_one(config: RunConfig, train_records, valid_records, out_dir: Path):
    from .train import TrainingDiverged, train_loop

    vocab = RelationVocab(prepared_labels(train_records) | prepared_labels(valid_records))
    train = examples_from_records(train_records, vocab)
    valid = examples_from_records(valid_records, vocab)
    try:
        result = train_loop(train, valid, vocab, config, out_dir=out_dir)
    except TrainingDiverged as e:
        raise CliError(f"{e}; offending batch written to {out_dir / 'diverged_batch.json'}", EXIT_RUNTIME) from e
    (out_dir / "run_config.yaml").write_text(yaml.safe_dump(config.to_flat(), sort_keys=True))
    return result, vocab


def cmd_train(args) -> int:
    config = _config_from_args(args)
    train_records = _load_records(args.train, config)
    valid_records = _load_records(args.valid, config) if args.valid else train_records
    out = Path(args.out)
    result, _ = _train_one(config, train_records, valid_records, out)
    print(json.dumps({"best_valid_f1": result.best_f1, "best_epoch": result.best_epoch,
                      "epochs_run": result.epochs_run, "checkpoint": str(result.checkpoint)}, indent=2))
    return EXIT_OK


def _predict(model, vocab: RelationVocab, config: RunConfig, records, directions=None):
    for rec in records:
        unknown = {t[2] for t in rec.get("triples", [])} - set(vocab.labels)
        if unknown:
            raise CliError(f"record {rec.get('id')}: relations {sorted(unknown)} are not in the checkpoint "
                           f"vocabulary", EXIT_DATA)
    examples = examples_from_records(records, vocab)
    return examples, predict_corpus(examples, model, config.decode, directions=directions)


def cmd_predict(args) -> int:
    from .train import load_checkpoint

    try:
        model, vocab, ckpt_config = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {e}", EXIT_DATA) from e
    try:
        config = ckpt_config.replace(**_parse_sets(args.set))
    except ConfigError as e:
        raise CliError(str(e), EXIT_CONFIG) from e
    if args.text:
        raw = RawExample(args.text, ())
        records = [example_to_record(tokenize_align(raw, TOKENIZERS[config.tokenizer], config.max_len, vocab), vocab)]
    else:
        records = _load_records(args.input, config)
    directions = None if args.direction in (None, "both") else (args.direction,)
    examples, preds = _predict(model, vocab, config, records, directions)
    lines = [json.dumps({"meta": {"checkpoint": str(args.checkpoint), "run_config": config.to_flat(),
                                  "seed": config.seed}})]
    lines += [json.dumps(_prediction_record(ex, p, vocab)) for ex, p in zip(examples, preds)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _read_predictions(path) -> tuple[dict, list[dict]]:
    meta, rows = {}, []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CliError(f"{path}:{lineno}: malformed prediction line", EXIT_DATA) from e
            if "meta" in rec:
                meta = rec["meta"]
            else:
                rows.append(rec)
    return meta, rows


def evaluate_files(pred_path, corpus_path, standard: str, config: RunConfig):
    meta, rows = _read_predictions(pred_path)
    records = _load_records(corpus_path, config)
    gold_ids = [r["id"] for r in records]
    pred_by_id = {r["id"]: r for r in rows}
    missing = [i for i in gold_ids if i not in pred_by_id]
    extra = sorted(set(pred_by_id) - set(gold_ids))
    if missing or extra:
        raise CliError(f"sentence id mismatch: missing predictions for {missing[:20]}, "
                       f"unknown prediction ids {extra[:20]}", EXIT_DATA)
    labels = prepared_labels(records) | {t["relation"] for r in rows for t in r["triples"]}
    vocab = RelationVocab(labels)
    examples = examples_from_records(records, vocab)
    preds = []
    for ex in examples:
        row = pred_by_id[ex.uid]
        preds.append({SpanTriple(t["subject_span"][0], t["subject_span"][1], vocab.id(t["relation"]),
                                 t["object_span"][0], t["object_span"][1]) for t in row["triples"]})
    return report(preds, examples, standard), meta


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    rep, meta = evaluate_files(args.predictions, args.corpus, config.match_standard, config)
    table = render_table(rep, args.title)
    payload = rep.to_dict()
    payload["meta"] = {"predictions": str(args.predictions), "corpus": str(args.corpus),
                       "prediction_meta": meta, "run_config": config.to_flat(), "seed": config.seed}
    if args.out:
        _write_json(Path(args.out), payload)
        Path(args.out).with_suffix(".txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


ABLATIONS = [
    ("full", {}),
    ("- Contrastive Learning", {"contrastive.enabled": False}),
    ("- Direction from o2s", {"model.o2s": False}),
    ("- Direction from s2o", {"model.s2o": False}),
    ("- Relation Prediction", {"model.relation_prediction": False, "decode.relation_filter": False}),
]


def cmd_ablate(args) -> int:
    from .metrics import micro_prf

    base = _config_from_args(args)
    train_records = _load_records(args.train, base)
    valid_records = _load_records(args.valid, base) if args.valid else train_records
    test_records = _load_records(args.test, base) if args.test else valid_records
    out = Path(args.out)
    rows = []
    for name, delta in ABLATIONS:
        config = base.replace(**delta)
        slug = name.strip("- ").lower().replace(" ", "_")
        result, vocab = _train_one(config, train_records, valid_records, out / slug)
        _, preds = _predict(result.model, vocab, config, test_records)
        test = examples_from_records(test_records, vocab)
        p, r, f = micro_prf([x.triples for x in preds], [ex.triples for ex in test], config.match_standard)
        rows.append({"variant": name, "precision": p, "recall": r, "f1": f, "overrides": delta})
    lines = [f"{'Model':<26}{'Prec.':>8}{'Rec.':>8}{'F1':>8}"]
    lines += [f"{r['variant']:<26}{100 * r['precision']:>8.1f}{100 * r['recall']:>8.1f}{100 * r['f1']:>8.1f}"
              for r in rows]
    table = "\n".join(lines)
    _write_json(out / "ablation.json", {"rows": rows, "run_config": base.to_flat(), "seed": base.seed})
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, training: bool = False) -> None:
    p.add_argument("--config", help="YAML file of flat dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--standard", choices=["partial", "exact"], help="match standard")
    p.add_argument("--seed", type=int)
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--patience", type=int)
        p.add_argument("--no-contrastive", action="store_true")
        p.add_argument("--no-relation-prediction", action="store_true")
        p.add_argument("--direction", choices=["both", "s2o", "o2s", "none"], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bidirte", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tokenize and align a dataset, write corpus + stats")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.add_argument("--strict", action="store_true", help="fail on malformed lines instead of skipping")
    _common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--out", required=True)
    _common(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode triples with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input")
    src.add_argument("--text")
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--direction", choices=["both", "s2o", "o2s"])
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against a corpus")
    p.add_argument("--predictions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.add_argument("--title", default="model")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--test")
    p.add_argument("--out", required=True)
    _common(p, training=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        logger.exception("runtime failure")
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
