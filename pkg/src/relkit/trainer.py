"""Fine-tuning loop: one run per template, a checkpoint per epoch, best-checkpoint selection.

Run directory layout::

    <run>/config.cfg                    copy of the resolved training config
    <run>/checkpoints/t<T>_e<EE>/       one checkpoint per (template, epoch)
    <run>/records.jsonl                 one CheckpointRecord per line
    <run>/best.txt                      relative path of the selected checkpoint
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .contrastive import LossConfig, LossKind, loss_with_grad, n_batches, sample_batch
from .data import AnalogyQuestion, RelationDataset
from .encoder import Aggregation, EncoderModel, backward_pairs, embed_pairs, save_checkpoint
from .evaluation import EncoderEmbedder, eval_analogy
from .prompting import get_template

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good: str | None):
        super().__init__(f"{message} (last good checkpoint: {last_good or 'none'})")
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = LossConfig(LossKind.INFONCE, temperature=0.5)
    learning_rate: float = 5e-6
    batch_size: int = 400
    epochs: int = 10
    seed: int = 0
    templates: tuple[int, ...] = (1, 2, 3, 4, 5)
    aggregation: Aggregation = Aggregation.AVERAGE_WO_MASK
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    selection_metric: str = "accuracy"
    # encoder built when no checkpoint is given
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 64
    case_policy: str = "preserve"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 4:
            raise ConfigError("batch_size must be >= 4")
        if not self.templates:
            raise ConfigError("no templates")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.selection_metric not in ("accuracy", "loss"):
            raise ConfigError("selection_metric must be 'accuracy' or 'loss'")
        object.__setattr__(self, "aggregation", Aggregation.parse(self.aggregation))
        object.__setattr__(self, "templates", tuple(int(t) for t in self.templates))

    def to_dict(self) -> dict[str, str]:
        out = {
            "loss": self.loss.kind.value,
            "margin": "" if self.loss.margin is None else repr(self.loss.margin),
            "temperature": "" if self.loss.temperature is None else repr(self.loss.temperature),
            "mean_reduction": str(self.loss.mean_reduction).lower(),
        }
        for f in dataclasses.fields(self):
            if f.name == "loss":
                continue
            value = getattr(self, f.name)
            if f.name == "templates":
                value = ",".join(map(str, value))
            elif isinstance(value, Aggregation):
                value = value.value
            elif isinstance(value, float):
                value = repr(value)
            out[f.name] = str(value)
        return {k: v for k, v in out.items() if v != ""}

    def to_json(self) -> dict:
        """Typed counterpart of :meth:`to_dict` for JSON manifests."""
        out = {"loss": self.loss.kind.value, "mean_reduction": self.loss.mean_reduction}
        if self.loss.margin is not None:
            out["margin"] = self.loss.margin
        if self.loss.temperature is not None:
            out["temperature"] = self.loss.temperature
        for f in dataclasses.fields(self):
            if f.name != "loss":
                value = getattr(self, f.name)
                out[f.name] = value.value if isinstance(value, Aggregation) else value
        out["templates"] = list(self.templates)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_INT_KEYS = {"batch_size", "epochs", "seed", "d_model", "n_heads", "n_layers", "d_ff", "max_len"}
_FLOAT_KEYS = {"learning_rate", "beta1", "beta2", "eps"}
_STR_KEYS = {"optimizer", "selection_metric", "aggregation", "case_policy"}
_LOSS_KEYS = {"loss", "margin", "temperature", "mean_reduction"}


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    unknown = set(raw) - _INT_KEYS - _FLOAT_KEYS - _STR_KEYS - _LOSS_KEYS - {"templates"}
    if unknown:
        raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
    kwargs = {}
    try:
        for key, value in raw.items():
            if key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            elif key in _STR_KEYS:
                kwargs[key] = value
            elif key == "templates":
                kwargs[key] = tuple(int(t) for t in value.split(",") if t.strip())
        loss = LossConfig(
            LossKind(raw.get("loss", "infonce")),
            margin=float(raw["margin"]) if "margin" in raw else None,
            temperature=float(raw["temperature"]) if "temperature" in raw else None,
            mean_reduction=raw.get("mean_reduction", "false").lower() in ("1", "true", "yes"),
        )
        return TrainConfig(loss=loss, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def default_config(kind: str = "infonce") -> TrainConfig:
    """One of the shipped configs: ``infonce``, ``infoloob`` or ``triplet``."""
    text = resources.files("relkit.configs").joinpath(f"{kind}.cfg").read_text(encoding="utf-8")
    return parse_config(text, f"{kind}.cfg")


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected ADAM update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckpointRecord:
    template_id: int
    epoch: int
    path: str
    validation_accuracy: float
    train_loss: float
    validation_loss: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.validation_accuracy <= 1.0:
            raise ValueError(f"accuracy {self.validation_accuracy} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def select_best(records: Sequence[CheckpointRecord], metric: str = "accuracy") -> CheckpointRecord:
    """Highest validation accuracy (or lowest validation loss); ties go to the
    lower epoch, then the lower template id."""
    if not records:
        raise ValueError("no checkpoint records")
    if metric == "loss":
        if any(r.validation_loss is None for r in records):
            raise ValueError("records carry no validation loss")
        return min(records, key=lambda r: (r.validation_loss, r.epoch, r.template_id))
    return min(records, key=lambda r: (-r.validation_accuracy, r.epoch, r.template_id))


def _epoch_loss(model, template, dataset, config, seed_steps) -> float:
    total = 0.0
    for step in seed_steps:
        batch = sample_batch(dataset, config.batch_size, step, config.seed)
        emb = embed_pairs(model, template, [e.pair for e in batch.entries], config.aggregation)
        total += float(loss_with_grad(config.loss, batch, emb)[0])
    return total / len(seed_steps)


def train(model: EncoderModel, dataset: RelationDataset, valid_questions: Sequence[AnalogyQuestion],
          config: TrainConfig, run_dir, valid_dataset: RelationDataset | None = None) -> list[CheckpointRecord]:
    """Fine-tune one copy of ``model`` per template and checkpoint every epoch.

    Each template starts from the parameters ``model`` has on entry, with fresh
    optimizer state. ``model`` itself is not modified. Validation accuracy is
    measured on ``valid_questions`` with the checkpoint's own template;
    ``valid_dataset``, when given, also yields a validation loss.
    """
    if not valid_questions:
        raise ValueError("no validation questions")
    if config.selection_metric == "loss" and valid_dataset is None:
        raise ValueError("selection_metric=loss needs a validation dataset")
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(config.to_text(), encoding="utf-8")
    records_path = run_dir / "records.jsonl"
    records_path.write_text("", encoding="utf-8")

    per_epoch = n_batches(dataset, config.batch_size)
    records: list[CheckpointRecord] = []
    last_good = None
    for template_id in config.templates:
        template = get_template(template_id)
        work = model.copy()
        work.model_id = f"{model.model_id}/t{template_id}"
        state = AdamState()
        for epoch in range(1, config.epochs + 1):
            losses = []
            for s in range(per_epoch):
                step = (epoch - 1) * per_epoch + s
                batch = sample_batch(dataset, config.batch_size, step, config.seed)
                emb, fwd = embed_pairs(work, template, [e.pair for e in batch.entries],
                                       config.aggregation, record=True)
                loss, d_emb = loss_with_grad(config.loss, batch, emb)
                loss = float(loss)
                if not math.isfinite(loss):
                    raise TrainingAborted(f"non-finite loss at template {template_id}, epoch {epoch}", last_good)
                grads = backward_pairs(work, fwd, d_emb)
                try:
                    adam_step(work.params, grads, state, config.learning_rate,
                              config.beta1, config.beta2, config.eps)
                except FloatingPointError as exc:
                    raise TrainingAborted(str(exc), last_good) from None
                losses.append(loss)
            rel_path = f"checkpoints/t{template_id}_e{epoch:02d}"
            save_checkpoint(work, run_dir / rel_path, training_config=config.to_dict())
            last_good = rel_path
            embedder = EncoderEmbedder(work, template, config.aggregation)
            accuracy = eval_analogy(embedder, valid_questions).accuracy
            valid_loss = None
            if valid_dataset is not None:
                valid_loss = _epoch_loss(work, template, valid_dataset, config,
                                         list(range(n_batches(valid_dataset, config.batch_size))))
            record = CheckpointRecord(template_id, epoch, rel_path, accuracy, float(np.mean(losses)), valid_loss)
            records.append(record)
            with records_path.open("a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")
            logger.info("template %d epoch %d: loss %.6f valid acc %.4f", template_id, epoch,
                        record.train_loss, accuracy)
    best = select_best(records, config.selection_metric)
    (run_dir / "best.txt").write_text(best.path + "\n", encoding="utf-8")
    return records


def load_records(run_dir) -> list[CheckpointRecord]:
    lines = (Path(run_dir) / "records.jsonl").read_text(encoding="utf-8").splitlines()
    return [CheckpointRecord(**json.loads(line)) for line in lines if line.strip()]
