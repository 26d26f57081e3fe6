"""Joint multi-task training of the ECEC classifier and the discourse parser."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from dam.config import DAMConfig, config_to_text, load_config
from dam.data import AnnotatedDialogue, RelationTypeSet
from dam.evaluate import MetricsReport, full_report
from dam.ingestion import DatasetSplit
from dam.model import DAMModel, PreparedExample, build_edge_parser, ecec_loss
from dam.parser import StandaloneParser, parse_conversations

logger = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


class CheckpointError(OSError):
    pass


@dataclass
class TrainingData:
    train: DatasetSplit
    validation: DatasetSplit
    discourse: list[AnnotatedDialogue] = field(default_factory=list)
    test: Optional[DatasetSplit] = None


@dataclass
class StepLosses:
    total: float
    ecec: float
    discourse: float


@dataclass
class TrainResult:
    model: DAMModel
    edge_parser: Optional[StandaloneParser]
    best_epoch: int
    history: list[dict]
    checkpoint: Optional[Path] = None


def set_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def combine_losses(l_e, l_dp, alpha: float = 1.0, beta: float = 0.25):
    """Joint objective ``alpha * L_e + beta * L_dp``."""
    return alpha * l_e + beta * l_dp


def select_best_epoch(scores: Sequence[float]) -> int:
    """1-based epoch with the highest validation score; earliest wins ties, 0 if none."""
    best, best_score = 0, -math.inf
    for epoch, score in enumerate(scores, 1):
        if score > best_score:
            best, best_score = epoch, score
    return best


def _cycle(dialogues: Sequence[AnnotatedDialogue], batch_size: int, generator: torch.Generator) -> Iterator[list]:
    """Endless reshuffled passes over the discourse corpus."""
    if not dialogues:
        while True:
            yield []
    while True:
        order = torch.randperm(len(dialogues), generator=generator).tolist()
        for start in range(0, len(order), batch_size):
            yield [dialogues[k] for k in order[start : start + batch_size]]


def train_step(
    model: DAMModel,
    optimizer: torch.optim.Optimizer,
    ecec_batch: Sequence[PreparedExample],
    discourse_batch: Sequence[AnnotatedDialogue],
    config: DAMConfig,
    scheduler=None,
) -> StepLosses:
    """One optimizer step on ``alpha * L_e + beta * L_dp``.

    Either batch may be empty (alternating mode, or ``beta = 0``); its loss is then 0.
    """
    alpha, beta = config.trainer.alpha, config.effective_beta
    model.train()
    optimizer.zero_grad()
    zero = model.head.weight.new_zeros(())
    l_e = zero
    if ecec_batch:
        gold = torch.tensor([ex.label for ex in ecec_batch], device=zero.device)
        weights = None
        if config.trainer.class_weights:
            weights = torch.tensor(config.trainer.class_weights, dtype=zero.dtype, device=zero.device)
        l_e = ecec_loss(model(ecec_batch), gold, weights)
    l_dp = zero
    if beta > 0 and discourse_batch:
        l_dp = model.discourse_loss(discourse_batch)[2]

    loss = combine_losses(l_e, l_dp, alpha, beta)
    values = (float(l_e.detach()), float(l_dp.detach()))
    if not all(math.isfinite(v) for v in values):
        raise TrainingDivergence(f"non-finite loss: L_e={values[0]} L_dp={values[1]}")
    if loss.requires_grad:
        loss.backward()
        if config.trainer.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.trainer.grad_clip)
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
    return StepLosses(combine_losses(values[0], values[1], alpha, beta), values[0], values[1])


def _optimizer(params, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW([p for p in params if p.requires_grad], lr=lr, weight_decay=weight_decay)


def _scheduler(optimizer, config: DAMConfig, total_steps: int):
    t = config.trainer
    if t.schedule == "constant":
        return None
    if t.schedule != "linear":
        raise ValueError(f"unknown schedule {t.schedule!r}")
    warmup = int(t.warmup_ratio * total_steps)

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def train_edge_parser(config: DAMConfig, dialogues: Sequence[AnnotatedDialogue],
                      relation_types: RelationTypeSet) -> StandaloneParser:
    """Train the standalone parser whose frozen predictions feed the relation edges."""
    parser = build_edge_parser(config, relation_types).to(config.trainer.device)
    settings = config.parser
    optimizer = _optimizer(parser.parameters(), settings.learning_rate, config.trainer.weight_decay)
    generator = torch.Generator().manual_seed(config.seed + 1)
    for epoch in range(settings.epochs):
        parser.train()
        order = torch.randperm(len(dialogues), generator=generator).tolist()
        total = 0.0
        for start in range(0, len(order), settings.batch_size):
            batch = [dialogues[k] for k in order[start : start + settings.batch_size]]
            optimizer.zero_grad()
            loss = parser.loss(batch)[2]
            if not math.isfinite(float(loss.detach())):
                raise TrainingDivergence("edge parser loss is not finite")
            loss.backward()
            if config.trainer.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(parser.parameters(), config.trainer.grad_clip)
            optimizer.step()
            total += float(loss.detach())
        logger.info("edge parser epoch %d: L_dp=%.4f", epoch + 1, total)
    parser.eval()
    for p in parser.parameters():
        p.requires_grad_(False)
    return parser


def prepare_split(model: DAMModel, edge_parser: Optional[StandaloneParser], split: DatasetSplit):
    spec = model.config.variant_spec
    parses = pair_hidden = None
    if spec.needs_parses:
        if edge_parser is None:
            raise ValueError(f"variant {model.config.variant} needs a discourse parser")
        parses, pair_hidden = parse_conversations(edge_parser, list(split.conversations.values()), spec.cat)
    return model.prepare(split, parses, pair_hidden)


def evaluate_examples(model: DAMModel, examples: Sequence[PreparedExample]) -> tuple[MetricsReport, list[float], list[int]]:
    probs, preds = model.predict(examples, model.config.trainer.batch_size)
    golds = [ex.label for ex in examples]
    report = full_report(preds, golds, [ex.instance for ex in examples], model.config.eval.distance_buckets)
    return report, probs, preds


def evaluate_split(model: DAMModel, edge_parser: Optional[StandaloneParser], split: DatasetSplit):
    examples = prepare_split(model, edge_parser, split)
    report, probs, preds = evaluate_examples(model, examples)
    return report, examples, probs, preds


def train(config: DAMConfig, data: TrainingData, run_dir: Optional[Path] = None) -> TrainResult:
    """Train for ``trainer.epochs`` epochs and keep the state with the best validation MacroF1.

    With ``run_dir`` set, the training log and the best checkpoint are written there.
    """
    set_seed(config.seed)
    device = torch.device(config.trainer.device)
    relation_types = RelationTypeSet.from_dialogues(data.discourse)
    spec = config.variant_spec

    edge_parser = None
    if spec.needs_parses:
        edge_parser = train_edge_parser(config, data.discourse, relation_types)

    set_seed(config.seed)
    model = DAMModel(config, relation_types).to(device)
    train_examples = prepare_split(model, edge_parser, data.train)
    val_examples = prepare_split(model, edge_parser, data.validation)

    t = config.trainer
    steps_per_epoch = math.ceil(len(train_examples) / t.batch_size) if train_examples else 0
    if t.interleave == "alternate":
        steps_per_epoch *= 2
    elif t.interleave != "sum":
        raise ValueError(f"unknown interleave mode {t.interleave!r}")
    optimizer = _optimizer(model.parameters(), t.learning_rate, t.weight_decay)
    scheduler = _scheduler(optimizer, config, steps_per_epoch * t.epochs)
    generator = torch.Generator().manual_seed(config.seed)
    discourse = _cycle(data.discourse if config.effective_beta > 0 else [], t.discourse_batch_size, generator)

    log_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "train_log.jsonl", "w", encoding="utf-8")

    best_state = copy.deepcopy(model.state_dict())
    history, scores = [], []
    if t.epochs == 0:
        logger.warning("epochs = 0: returning the initial model")
    step = 0
    try:
        for epoch in range(1, t.epochs + 1):
            order = torch.randperm(len(train_examples), generator=generator).tolist()
            sums = {"L": 0.0, "L_e": 0.0, "L_dp": 0.0}
            for start in range(0, len(order), t.batch_size):
                batch = [train_examples[k] for k in order[start : start + t.batch_size]]
                if t.interleave == "sum":
                    plans = [(batch, next(discourse))]
                else:
                    plans = [(batch, []), ([], next(discourse))]
                for ecec_batch, disc_batch in plans:
                    if not ecec_batch and not disc_batch:
                        continue
                    losses = train_step(model, optimizer, ecec_batch, disc_batch, config, scheduler)
                    step += 1
                    record = {"epoch": epoch, "step": step, "L": losses.total, "L_e": losses.ecec,
                              "L_dp": losses.discourse, "lr": optimizer.param_groups[0]["lr"]}
                    if log_fh:
                        log_fh.write(json.dumps(record) + "\n")
                    sums["L"] += losses.total
                    sums["L_e"] += losses.ecec
                    sums["L_dp"] += losses.discourse
            report = evaluate_examples(model, val_examples)[0] if val_examples else None
            score = report.macro_f1 if report else 0.0
            scores.append(score)
            entry = {"epoch": epoch, **sums, "val_macro_f1": score}
            history.append(entry)
            logger.info("epoch %d: L=%.4f L_e=%.4f L_dp=%.4f val MacroF1=%.4f",
                        epoch, sums["L"], sums["L_e"], sums["L_dp"], score)
            if select_best_epoch(scores) == epoch:
                best_state = copy.deepcopy(model.state_dict())
    finally:
        if log_fh:
            log_fh.close()

    best_epoch = select_best_epoch(scores)
    model.load_state_dict(best_state)
    checkpoint = None
    if run_dir is not None:
        checkpoint = save_checkpoint(run_dir / "checkpoint", model, edge_parser)
    return TrainResult(model, edge_parser, best_epoch, history, checkpoint)


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(directory: Path, model: DAMModel, edge_parser: Optional[StandaloneParser] = None) -> Path:
    """Write config, relation inventory, weights and tokenizer assets under ``directory``."""
    from dam.encoder import save_tokenizer_assets

    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.cfg").write_text(config_to_text(model.config), encoding="utf-8")
        (directory / "relations.json").write_text(
            json.dumps({"relations": list(model.relation_types.names)}, indent=1), encoding="utf-8"
        )
        torch.save(model.state_dict(), directory / "model.pt")
        if edge_parser is not None:
            torch.save(edge_parser.state_dict(), directory / "edge_parser.pt")
        save_tokenizer_assets(model.encoder, directory)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint to {directory}: {exc.strerror or exc}") from exc
    return directory


def load_checkpoint(directory: Path, device: str = "cpu") -> tuple[DAMModel, Optional[StandaloneParser]]:
    directory = Path(directory)
    if not (directory / "model.pt").exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    config = load_config(directory / "config.cfg")
    names = json.loads((directory / "relations.json").read_text(encoding="utf-8"))["relations"]
    relation_types = RelationTypeSet(tuple(names))
    model = DAMModel(config, relation_types)
    model.load_state_dict(torch.load(directory / "model.pt", map_location=device))
    model.to(device).eval()
    edge_parser = None
    if (directory / "edge_parser.pt").exists():
        edge_parser = build_edge_parser(config, relation_types)
        edge_parser.load_state_dict(torch.load(directory / "edge_parser.pt", map_location=device))
        edge_parser.to(device).eval()
    return model, edge_parser
