"""
Training service: the momentum SGD optimizer, the deterministic training loop,
evaluation and the ablation study.
"""

import csv
import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch.optim import Optimizer
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader

from ..models.network import PestVLNet
from ..schemas.config import ModelConfig
from ..schemas.dataset import DatasetManifest
from ..schemas.metrics import EpochRecord, MetricsReport
from ..utils.exceptions import CheckpointFormatError, TrainingDivergedError, ValidationError
from ..utils.logging_config import log_performance, log_training_event
from .checkpoint_service import (
    Checkpoint,
    generator_state,
    restore_generator,
    save_checkpoint,
)
from .dataset_service import PestImageDataset
from .metrics_service import MetricLog, compute_metrics
from .text_encoder import EmbeddingStore

logger = logging.getLogger(__name__)

MOMENTUM_PREFIX = "momentum."
GUMBEL_SEED_OFFSET = 1
DATA_SEED_OFFSET = 2


def sgd_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[Optional[torch.Tensor]],
    velocities: List[Optional[torch.Tensor]],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """
    One in-place momentum SGD update.

    d = g + weight_decay * theta; v = d on the first step, else v = momentum * v + d;
    theta -= lr * v. With momentum 0 this is theta -= lr * d.
    """
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        step = grad.add(param, alpha=weight_decay) if weight_decay else grad
        if momentum:
            if velocities[i] is None:
                velocities[i] = torch.clone(step).detach()
            else:
                velocities[i].mul_(momentum).add_(step)
            step = velocities[i]
        param.add_(step, alpha=-lr)


class MomentumSGD(Optimizer):
    """Classic momentum SGD backed by :func:`sgd_step`."""

    def __init__(self, params: Iterable, lr: float = 0.1, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValidationError(f"Learning rate must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ValidationError(f"Momentum must be in [0, 1), got {momentum}")
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):  # type: ignore[override]
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            params = [p for p in group["params"] if p.grad is not None]
            velocities = [self.state[p].get("momentum_buffer") for p in params]
            sgd_step(
                params,
                [p.grad for p in params],
                velocities,
                lr=group["lr"],
                momentum=group["momentum"],
                weight_decay=group["weight_decay"],
            )
            for p, velocity in zip(params, velocities):
                if velocity is not None:
                    self.state[p]["momentum_buffer"] = velocity
        return loss


def lr_factor(schedule: str, epochs: int):
    if schedule == "cosine":
        return lambda epoch: 0.5 * (1.0 + math.cos(math.pi * min(epoch, epochs) / epochs))
    return lambda epoch: 1.0


def configure_determinism(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.set_num_threads(threads)


def build_model(config: ModelConfig) -> PestVLNet:
    """Construct a model with parameters drawn from ``optimizer.seed``."""
    torch.manual_seed(config.optimizer.seed)
    return PestVLNet(config)


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    history: List[EpochRecord]
    steps: int
    epoch_losses: List[float] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None
    duration_seconds: float = 0.0

    def final(self, split: str = "train") -> EpochRecord:
        for record in reversed(self.history):
            if record.split == split:
                return record
        raise KeyError(split)


class TrainingService:
    """
    Owns the model, optimizer, schedule and RNG streams of one training run.

    Three generators keep the run reproducible: the global torch RNG (model
    init), a Gumbel-noise generator and a data generator (shuffling, flips).
    """

    def __init__(
        self,
        config: ModelConfig,
        manifest: DatasetManifest,
        store: Optional[EmbeddingStore] = None,
    ):
        self.config = config
        self.manifest = manifest
        if manifest.class_count != config.class_count:
            raise ValidationError(
                f"Manifest has {manifest.class_count} classes, config expects {config.class_count}"
            )
        configure_determinism(config.optimizer.threads)
        self.model = build_model(config)
        self.store = store if self.model.uses_text else None
        if self.model.uses_text and store is None:
            raise ValidationError("An embedding store is required when fusion is enabled")

        opt = config.optimizer
        self.optimizer = MomentumSGD(
            self.model.parameters(), lr=opt.lr, momentum=opt.momentum, weight_decay=opt.weight_decay
        )
        self.scheduler = LambdaLR(self.optimizer, lr_factor(opt.schedule, opt.epochs))
        self.gumbel_generator = torch.Generator().manual_seed(opt.seed + GUMBEL_SEED_OFFSET)
        self.data_generator = torch.Generator().manual_seed(opt.seed + DATA_SEED_OFFSET)
        self.epoch = 0
        self.steps = 0

    def dataset(self, split: str) -> PestImageDataset:
        return PestImageDataset(
            self.manifest,
            split,
            self.config.image_size,
            store=self.store,
            embedding_dim=self.config.embedding_dim,
        )

    def _loader(self, dataset: PestImageDataset, order: Optional[List[int]] = None) -> DataLoader:
        return DataLoader(
            dataset,
            batch_size=self.config.optimizer.batch_size,
            sampler=order if order is not None else list(range(len(dataset))),
            num_workers=self.config.data.num_workers,
        )

    def _text(self, text: torch.Tensor) -> Optional[torch.Tensor]:
        return text if self.model.uses_text else None

    def train_epoch(self, dataset: PestImageDataset) -> float:
        """One shuffled pass; returns the sample-weighted mean minibatch loss."""
        self.model.train()
        order = torch.randperm(len(dataset), generator=self.data_generator).tolist()
        total_loss, seen = 0.0, 0
        for batch_index, (images, text, labels) in enumerate(self._loader(dataset, order)):
            if self.config.data.hflip:
                flips = torch.rand(images.shape[0], generator=self.data_generator) < 0.5
                images = torch.where(flips[:, None, None, None], images.flip(-1), images)

            logits = self.model(images, self._text(text), generator=self.gumbel_generator)
            loss = F.cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(self.epoch + 1, batch_index, float(loss))

            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if self.config.optimizer.max_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.optimizer.max_grad_norm)
            self.optimizer.step()
            self.steps += 1

            total_loss += float(loss) * images.shape[0]
            seen += images.shape[0]
        self.scheduler.step()
        self.epoch += 1
        return total_loss / max(seen, 1)

    @torch.no_grad()
    def evaluate(self, split: str) -> Tuple[MetricsReport, float]:
        """Eval-mode metrics and mean loss over a split."""
        self.model.eval()
        dataset = self.dataset(split)
        if len(dataset) == 0:
            raise ValidationError(f"Split '{split}' is empty")
        predictions: List[int] = []
        labels: List[int] = []
        total_loss = 0.0
        for images, text, target in self._loader(dataset):
            logits = self.model(images, self._text(text))
            total_loss += float(F.cross_entropy(logits, target, reduction="sum"))
            predictions.extend(logits.argmax(dim=-1).tolist())
            labels.extend(target.tolist())
        report = compute_metrics(
            predictions, labels, self.config.class_count, self.config.evaluation.average
        )
        return report, total_loss / len(dataset)

    # Checkpointing

    def checkpoint(self) -> Checkpoint:
        optimizer_state: Dict[str, torch.Tensor] = OrderedDict()
        for name, param in self.model.named_parameters():
            buffer = self.optimizer.state.get(param, {}).get("momentum_buffer")
            if buffer is not None:
                optimizer_state[MOMENTUM_PREFIX + name] = buffer.detach().clone()
        optimizer_state["steps"] = torch.tensor(float(self.steps))
        optimizer_state["scheduler.last_epoch"] = torch.tensor(float(self.scheduler.last_epoch))

        rng_state: Dict[str, torch.Tensor] = OrderedDict(
            [
                ("torch", generator_state(torch.default_generator)),
                ("gumbel", generator_state(self.gumbel_generator)),
                ("data", generator_state(self.data_generator)),
            ]
        )
        model_state = OrderedDict(
            (name, tensor.detach().clone()) for name, tensor in self.model.state_dict().items()
        )
        return Checkpoint(
            config=self.config,
            epoch=self.epoch,
            model_state=model_state,
            optimizer_state=optimizer_state,
            rng_state=rng_state,
        )

    def restore(self, checkpoint: Checkpoint) -> None:
        """Load parameters, momentum, schedule position and RNG streams."""
        if checkpoint.config.canonical_json() != self.config.model_copy(
            update={"optimizer": checkpoint.config.optimizer}
        ).canonical_json():
            raise CheckpointFormatError("Checkpoint was written for a different model configuration")
        try:
            self.model.load_state_dict(checkpoint.model_state)
        except RuntimeError as e:
            raise CheckpointFormatError(f"Checkpoint parameters do not match the model: {e}")

        params = dict(self.model.named_parameters())
        for name, tensor in checkpoint.optimizer_state.items():
            if name.startswith(MOMENTUM_PREFIX):
                param = params.get(name[len(MOMENTUM_PREFIX) :])
                if param is None:
                    raise CheckpointFormatError(f"Optimizer state for unknown parameter {name}")
                self.optimizer.state[param]["momentum_buffer"] = tensor.clone()
        self.steps = int(checkpoint.optimizer_state["steps"])
        last_epoch = int(checkpoint.optimizer_state["scheduler.last_epoch"])
        self.scheduler.last_epoch = last_epoch
        for group, base_lr, factor in zip(
            self.optimizer.param_groups, self.scheduler.base_lrs, self.scheduler.lr_lambdas
        ):
            group["lr"] = base_lr * factor(last_epoch)

        restore_generator(torch.default_generator, checkpoint.rng_state["torch"])
        restore_generator(self.gumbel_generator, checkpoint.rng_state["gumbel"])
        restore_generator(self.data_generator, checkpoint.rng_state["data"])
        self.epoch = checkpoint.epoch


def _eval_splits(manifest: DatasetManifest) -> List[str]:
    return ["train"] + (["val"] if manifest.splits["val"] else [])


def train(
    config: ModelConfig,
    manifest: DatasetManifest,
    store: Optional[EmbeddingStore] = None,
    out_dir: Optional[str | Path] = None,
    resume: Optional[Checkpoint] = None,
) -> TrainingResult:
    """
    Train for ``optimizer.epochs`` epochs (continuing from ``resume`` if given).

    Writes ``checkpoint.pvlc`` and ``metrics.csv`` to ``out_dir`` when set.

    Raises:
        TrainingDivergedError: Non-finite loss; carries the epoch and batch index
    """
    started = time.perf_counter()
    service = TrainingService(config, manifest, store)
    if resume is not None:
        service.restore(resume)
    dataset = service.dataset("train")
    if len(dataset) == 0:
        raise ValidationError("The train split is empty")

    out_path = Path(out_dir) if out_dir is not None else None
    metric_log = MetricLog(out_path / "metrics.csv") if out_path is not None else None
    history: List[EpochRecord] = []
    epoch_losses: List[float] = []

    log_training_event("start", {"epochs": config.optimizer.epochs, "start_epoch": service.epoch})
    while service.epoch < config.optimizer.epochs:
        epoch_losses.append(service.train_epoch(dataset))
        rows = []
        for split in _eval_splits(manifest):
            report, loss = service.evaluate(split)
            rows.append(EpochRecord.from_report(service.epoch, split, report, loss))
        history.extend(rows)
        if metric_log is not None:
            metric_log.append(rows)
        logger.info(
            f"Epoch {service.epoch}: train loss {epoch_losses[-1]:.4f}, "
            f"train accuracy {rows[0].accuracy:.3f}"
        )

    checkpoint = service.checkpoint()
    checkpoint_path = None
    if out_path is not None:
        checkpoint_path = save_checkpoint(checkpoint, out_path / "checkpoint.pvlc")
    duration = time.perf_counter() - started
    log_training_event("finish", {"steps": service.steps, "final_epoch": service.epoch})
    log_performance("train", duration, steps=service.steps)
    return TrainingResult(
        checkpoint=checkpoint,
        history=history,
        steps=service.steps,
        epoch_losses=epoch_losses,
        checkpoint_path=checkpoint_path,
        metrics_path=metric_log.path if metric_log is not None else None,
        duration_seconds=duration,
    )


def load_model(checkpoint: Checkpoint) -> PestVLNet:
    model = PestVLNet(checkpoint.config)
    try:
        model.load_state_dict(checkpoint.model_state)
    except RuntimeError as e:
        raise CheckpointFormatError(f"Checkpoint parameters do not match the model: {e}")
    model.eval()
    return model


def evaluate(
    checkpoint: Checkpoint,
    manifest: DatasetManifest,
    store: Optional[EmbeddingStore] = None,
    split: str = "test",
) -> Tuple[MetricsReport, float]:
    """Metrics and mean loss of a checkpoint on one manifest split."""
    service = TrainingService(checkpoint.config, manifest, store)
    service.restore(checkpoint)
    return service.evaluate(split)


# Ablation study

ABLATION_VARIANTS: Dict[str, Dict[str, bool]] = {
    "full": {},
    "disable_partition": {"disable_partition": True},
    "disable_fusion": {"disable_fusion": True},
    "disable_prompt": {"disable_prompt": True},
    "conv_only_backbone": {"conv_only_backbone": True},
}
DEFAULT_ABLATIONS = ("full", "disable_partition", "disable_fusion")


def ablation_config(config: ModelConfig, variant: str, seed: int, epochs: int) -> ModelConfig:
    if variant not in ABLATION_VARIANTS:
        raise ValidationError(f"Unknown ablation variant '{variant}'")
    data = config.model_dump()
    data["ablation"].update(ABLATION_VARIANTS[variant])
    data["optimizer"].update(seed=seed, epochs=epochs)
    return ModelConfig.model_validate(data)


@dataclass
class AblationReport:
    epochs: int
    seeds: List[int]
    losses: Dict[str, List[float]]

    @property
    def mean_losses(self) -> Dict[str, float]:
        return {name: sum(values) / len(values) for name, values in self.losses.items()}

    @property
    def ordering_holds(self) -> bool:
        """Full model's mean final train loss is <= every other variant's."""
        means = self.mean_losses
        full = means.get("full")
        return full is not None and all(full <= value for value in means.values())

    def to_dict(self) -> Dict[str, object]:
        return {
            "epochs": self.epochs,
            "seeds": self.seeds,
            "final_train_loss": self.losses,
            "mean_final_train_loss": self.mean_losses,
            "ordering_holds": self.ordering_holds,
        }

    def write(self, out_dir: str | Path) -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        json_path = out / "ablation.json"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        csv_path = out / "ablation.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["variant", "seed", "final_train_loss"])
            for name, values in self.losses.items():
                for seed, value in zip(self.seeds, values):
                    writer.writerow([name, seed, f"{value:.8f}"])
        return json_path, csv_path


def run_ablation_study(
    config: ModelConfig,
    manifest: DatasetManifest,
    store: Optional[EmbeddingStore],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    epochs: int = 100,
    variants: Sequence[str] = DEFAULT_ABLATIONS,
    out_dir: Optional[str | Path] = None,
) -> AblationReport:
    """
    Train every variant under every seed and collect the final train-set loss.

    The report is written even when the full model does not come out ahead.
    """
    losses: Dict[str, List[float]] = {}
    for variant in variants:
        for seed in seeds:
            result = train(ablation_config(config, variant, seed, epochs), manifest, store)
            losses.setdefault(variant, []).append(result.final("train").loss)
            logger.info(f"Ablation {variant} seed {seed}: final train loss {losses[variant][-1]:.4f}")
    report = AblationReport(epochs=epochs, seeds=list(seeds), losses=losses)
    if out_dir is not None:
        report.write(out_dir)
    if not report.ordering_holds:
        logger.warning(f"Full model is not ahead of every ablation: {report.mean_losses}")
    return report
