"""Command line entry point: train, eval, ablate, parse-discourse, predict.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 training
divergence, 5 run directory locked, 1 anything else. Failures print one
``dam: error[<category>]: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Sequence

import dam
from dam.config import MATRIX_ROWS, config_to_text, flatten, load_config
from dam.evaluate import format_table
from dam.ingestion import (
    DataError,
    discourse_path,
    ecec_path,
    instance_id,
    load_discourse_corpus,
    load_ecec_dataset,
)

logger = logging.getLogger("dam")

DATA_ENV = "DAM_DATA_DIR"


class RunLocked(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def run_directory(path: Path):
    """Create ``path`` and hold ``path/.lock`` for the duration of the run."""
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{path} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(run_dir: Path, args: argparse.Namespace, config, data_files: Sequence[Path], started: str) -> None:
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config": flatten(config) if config is not None else None,
        "seed": config.seed if config is not None else None,
        "datasets": {str(p): _sha256(p) for p in data_files if p.exists()},
        "code_version": dam.__version__,
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "variant", None):
        out["variant"] = args.variant
    return out


def _data_dir(args) -> Path:
    return Path(args.data_dir or os.environ.get(DATA_ENV, "data"))


def _load_training_data(data_dir: Path, needs_discourse: bool):
    from dam.trainer import TrainingData

    files = [ecec_path(data_dir, "train"), ecec_path(data_dir, "validation")]
    train = load_ecec_dataset(files[0], "train")
    validation = load_ecec_dataset(files[1], "validation")
    test = None
    if ecec_path(data_dir, "test").exists():
        files.append(ecec_path(data_dir, "test"))
        test = load_ecec_dataset(files[-1], "test")
    discourse = []
    dpath = discourse_path(data_dir, "train")
    if dpath.exists() or needs_discourse:
        discourse = load_discourse_corpus(dpath)
        files.append(dpath)
    return TrainingData(train, validation, discourse, test), files


def _write_report(run_dir: Path, reports: dict, stem: str = "metrics") -> None:
    with open(run_dir / f"{stem}.jsonl", "w", encoding="utf-8") as fh:
        for name, report in reports.items():
            fh.write(report.to_record(name=name))
    (run_dir / f"{stem}.txt").write_text(format_table(reports), encoding="utf-8")


def _write_predictions(path: Path, examples, probs, preds) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex, p, y in zip(examples, probs, preds):
            inst = ex.instance
            fh.write(f"{inst.conversation_id} {inst.target_index} {inst.candidate_index} "
                     f"{p!r} {y} {inst.gold_label}\n")


def cmd_train(args, run_dir: Path):
    from dam.trainer import evaluate_split, train

    config = load_config(args.config, _overrides(args))
    data_dir = _data_dir(args)
    needs_discourse = config.effective_beta > 0 or config.variant_spec.needs_parses
    data, files = _load_training_data(data_dir, needs_discourse)
    (run_dir / "config.cfg").write_text(config_to_text(config), encoding="utf-8")
    result = train(config, data, run_dir)
    reports = {"validation": evaluate_split(result.model, result.edge_parser, data.validation)[0]}
    if data.test is not None:
        reports["test"] = evaluate_split(result.model, result.edge_parser, data.test)[0]
    _write_report(run_dir, reports)
    print(format_table(reports), end="")
    return config, files


def _load_split(args):
    data_dir = _data_dir(args)
    path = Path(args.input) if getattr(args, "input", None) else ecec_path(data_dir, args.split)
    return load_ecec_dataset(path, args.split), path


def _checkpoint(args):
    from dam.trainer import load_checkpoint

    return load_checkpoint(Path(args.checkpoint))


def cmd_eval(args, run_dir: Path):
    from dam.trainer import evaluate_split

    model, edge_parser = _checkpoint(args)
    split, path = _load_split(args)
    report, examples, probs, preds = evaluate_split(model, edge_parser, split)
    _write_report(run_dir, {args.split: report})
    _write_predictions(run_dir / "predictions.txt", examples, probs, preds)
    with open(run_dir / "distance.txt", "w", encoding="utf-8") as fh:
        fh.write("bucket count pos_f1\n")
        for bucket, score in report.by_distance.items():
            fh.write(f"{bucket} {report.distance_counts[bucket]} {100 * score:.2f}\n")
    print(format_table({args.split: report}), end="")
    return model.config, [path]


def cmd_predict(args, run_dir: Path):
    from dam.trainer import prepare_split

    model, edge_parser = _checkpoint(args)
    split, path = _load_split(args)
    examples = prepare_split(model, edge_parser, split)
    probs, preds = model.predict(examples, model.config.trainer.batch_size)
    _write_predictions(run_dir / "predictions.txt", examples, probs, preds)
    return model.config, [path]


def cmd_ablate(args, run_dir: Path):
    from dam.evaluate import run_matrix

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in MATRIX_ROWS]
    if unknown:
        raise ValueError(f"unknown variant(s) {', '.join(unknown)}; valid: {', '.join(MATRIX_ROWS)}")
    config = load_config(args.config, _overrides(args))
    data, files = _load_training_data(_data_dir(args), True)
    rows = run_matrix(config, variants, data, run_dir, split=args.split)
    _write_report(run_dir, rows, stem="ablation")
    print(format_table(rows), end="")
    return config, files


def cmd_parse(args, run_dir: Path):
    from dam.parser import StandaloneParser, decode_scores

    model, edge_parser = _checkpoint(args)
    dialogues = load_discourse_corpus(Path(args.input))
    if args.head == "edge":
        if edge_parser is None:
            raise DataError(f"checkpoint {args.checkpoint} has no standalone parser; use --head shared")
        parser = edge_parser
    else:
        parser = StandaloneParser(model.encoder, model.parser, model.relation_types, model.config.encoder.speaker_prefix)
    parser.eval()
    with open(run_dir / "links.txt", "w", encoding="utf-8") as fh:
        for d in dialogues:
            result, _ = parser.parse(d)
            for child, parent, rel, prob in result.links():
                fh.write(f"{d.id} {child} {parent} {rel} {prob:.6f}\n")
    return model.config, [Path(args.input)]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dam", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--run-dir", required=True, help="all outputs of the command go here")
        p.add_argument("--data-dir", help=f"dataset directory (default ${DATA_ENV} or ./data)")
        p.add_argument("-v", "--verbose", action="store_true")
        if config:
            p.add_argument("--config", help="flat key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
            p.add_argument("--seed", type=int)
            p.add_argument("--variant")

    p = sub.add_parser("train", help="joint training, keeps the best validation checkpoint")
    common(p)

    for name, helptext in (("eval", "score a checkpoint on a split"), ("predict", "write per-triple predictions")):
        p = sub.add_parser(name, help=helptext)
        common(p, config=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--input", help="ECEC file to read instead of <data-dir>/ecec_<split>.jsonl")

    p = sub.add_parser("ablate", help="train and score rows of the ablation / fusion matrix")
    common(p)
    p.add_argument("--variants", default=",".join(MATRIX_ROWS))
    p.add_argument("--split", default="test")

    p = sub.add_parser("parse-discourse", help="predict discourse links for dialogues")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="dialogue JSONL file")
    p.add_argument("--head", choices=("edge", "shared"), default="edge")
    return ap


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "ablate": cmd_ablate,
            "parse-discourse": cmd_parse}


def _fail(category: str, message: str, code: int) -> int:
    print(f"dam: error[{category}]: {message}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    from dam.trainer import CheckpointError, TrainingDivergence

    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    started = dt.datetime.now(dt.timezone.utc).isoformat()
    run_dir = Path(args.run_dir)
    try:
        with run_directory(run_dir):
            config, files = COMMANDS[args.command](args, run_dir)
            write_manifest(run_dir, args, config, files, started)
    except RunLocked as exc:
        return _fail("locked", str(exc), 5)
    except (DataError, FileNotFoundError) as exc:
        return _fail("data", str(exc).replace("\n", " "), 3)
    except TrainingDivergence as exc:
        return _fail("divergence", str(exc), 4)
    except CheckpointError as exc:
        return _fail("io", str(exc), 1)
    except (KeyError, ValueError) as exc:
        return _fail("config", str(exc).strip("'\""), 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
