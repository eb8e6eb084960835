"""
Training, evaluation and attention export.

One training step mines the batch once, evaluates the multi-similarity loss, the
query-combination loss and both adversarial losses, and takes one AdamW step on every
trainable parameter of the model and the adversarial heads.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from itertools import chain, product
from pathlib import Path
from typing import Any

import numpy as np
import torch
from numpy.typing import NDArray
from PIL import Image
from tqdm import tqdm

from qdavpr.adversarial import AdversarialHeads
from qdavpr.config import (
    BackboneKind,
    EvalProtocol,
    ExperimentConfig,
    TrainConfig,
    device_name,
    override_config,
)
from qdavpr.core import QdaVPRModel
from qdavpr.data.domains import SyntheticDomain, apply_domain
from qdavpr.data.manifest import DatasetManifest, Split, resize_image, to_uint8
from qdavpr.data.sampler import SampledBatch, sample_batch, sample_feature_batch
from qdavpr.error import ConfigError, NonFiniteLossError, PathError, ProtocolError
from qdavpr.losses import (
    LossParts,
    LossRecord,
    local_triplet_loss,
    mine_triplets,
    ms_loss,
    total_loss,
)
from qdavpr.retrieval import (
    DescriptorIndex,
    RecallReport,
    apply_pca,
    domain_probe_accuracy,
    fit_pca,
    recall_at_n,
)
from qdavpr.serial.core import CheckpointRecord, load_checkpoint, save_checkpoint, write_descriptors

logger = logging.getLogger(__name__)

LOG_FILE = "train_log.jsonl"
LAST_CHECKPOINT = "last.qckpt"
BEST_CHECKPOINT = "best.qckpt"

####################################################################################################
### Schedule
####################################################################################################


def lr_at(epoch_fraction: float, cfg: TrainConfig) -> float:
    """
    Linear warmup from 0 to ``base_lr``, then a step decay by ``decay_factor`` every
    ``decay_every`` epochs counted from the end of the warmup.
    """
    if epoch_fraction < cfg.warmup_epochs:
        return cfg.base_lr * epoch_fraction / cfg.warmup_epochs
    decays = math.floor((epoch_fraction - cfg.warmup_epochs) / cfg.decay_every)
    return cfg.base_lr * cfg.decay_factor**decays


####################################################################################################
### Step
####################################################################################################


def train_step(
    batch: SampledBatch,
    model: QdaVPRModel,
    heads: AdversarialHeads,
    config: ExperimentConfig,
    optimizer: torch.optim.Optimizer,
    *,
    epoch: int = 0,
    step: int = 0,
    dump_dir: Path | None = None,
) -> LossRecord:
    """
    Run one optimization step and return every loss component.

    Loss levels with weight 0 are not computed and recorded as 0.

    Raises
    ------
    NonFiniteLossError
        If the total loss is NaN or infinite. A JSON dump of the batch seeds is written to
        ``dump_dir`` first.
    """
    model.train()
    heads.train()
    weights = config.weights
    device = next(model.combiner.parameters()).device
    inputs = batch.images.to(device)
    labels = batch.place_labels.to(device)
    domains = batch.domain_labels.to(device)

    output = model(inputs, mode="train")
    indices = mine_triplets(output.descriptor, labels, epsilon=weights.miner_epsilon)
    if indices.is_empty:
        logger.warning("epoch %d step %d: the miner kept no pairs", epoch, step)
    zero = output.descriptor.new_zeros(())

    ms = ms_loss(output.descriptor, labels, weights, indices=indices)
    local = (
        local_triplet_loss(
            output.descriptor, output.combinations, labels, config.local_loss, indices=indices
        )
        if weights.local > 0
        else zero
    )
    adv_q = (
        heads.query_adversarial_loss(output.stacked_queries, domains) if weights.adv_q > 0 else zero
    )
    adv_x = (
        heads.image_adversarial_loss(output.feature_maps(), domains) if weights.adv_x > 0 else zero
    )
    total = total_loss(LossParts(ms, local, adv_q, adv_x), weights)

    record = LossRecord(
        ms=float(ms),
        local=float(local),
        adv_q=float(adv_q),
        adv_x=float(adv_x),
        total=float(total),
    )
    if not math.isfinite(record.total):
        dump = _dump_non_finite(batch, record, config, epoch, step, dump_dir)
        raise NonFiniteLossError(
            f"Non-finite loss at epoch `{epoch}` step `{step}` "
            f"(seed `{config.train.seed}`, first sample seed `{batch.seeds[0]}`), "
            f"dump: `{dump}`"
        )

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if config.train.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(
            [p for group in optimizer.param_groups for p in group["params"]],
            config.train.grad_clip,
        )
    optimizer.step()
    return record


def _dump_non_finite(
    batch: SampledBatch,
    record: LossRecord,
    config: ExperimentConfig,
    epoch: int,
    step: int,
    dump_dir: Path | None,
) -> Path | None:
    if dump_dir is None:
        return None
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nonfinite_e{epoch}_s{step}.json"
    payload = {
        "seed": config.train.seed,
        "epoch": epoch,
        "step": step,
        "sample_seeds": batch.seeds,
        "rows": batch.rows,
        "domain_labels": batch.domain_labels.tolist(),
        "losses": {k: repr(v) for k, v in record.as_dict().items()},
    }
    path.write_text(json.dumps(payload, indent=2))
    return path


####################################################################################################
### Trainer
####################################################################################################


@dataclass
class EpochSummary:
    epoch: int
    lr: float
    losses: dict[str, float]
    recall_at_1: float | None


@dataclass
class FitResult:
    best_epoch: int
    best_metric: float | None
    history: list[EpochSummary] = field(default_factory=list)


def _check_feature_rows(features: NDArray[np.float32], manifest: DatasetManifest) -> None:
    if features.ndim != 3 or features.shape[0] != len(manifest):
        raise ConfigError(
            f"Features of shape `{features.shape}` do not match the `{len(manifest)}` "
            "manifest rows!"
        )


class Trainer:
    """
    Owns the model, the adversarial heads, the optimizer and the output directory.

    ``fit`` writes ``train_log.jsonl`` (one loss record per step), ``last.qckpt`` after every
    epoch and ``best.qckpt`` for the epoch with the highest validation R@1, the earliest one
    on ties. Without a validation split the last epoch is the best one.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        manifest: DatasetManifest,
        *,
        validation: DatasetManifest | None = None,
        features: NDArray[np.float32] | None = None,
        validation_features: NDArray[np.float32] | None = None,
        output_dir: Path | str | None = None,
        workers: int = 0,
    ) -> None:
        config.validate()
        external = config.model.backbone_kind is BackboneKind.EXTERNAL
        if external and features is None:
            raise PathError("External-features mode needs a features file!")
        if features is not None:
            config = dataclasses.replace(
                config, model=config.model.with_feature_channels(features.shape[-1])
            )
            _check_feature_rows(features, manifest)
        if validation is None or validation is manifest:
            validation, validation_features = manifest, features
        elif validation_features is not None:
            config.model.with_feature_channels(validation_features.shape[-1])
            _check_feature_rows(validation_features, validation)
        elif external:
            raise ConfigError(
                "A separate validation manifest in external-features mode needs "
                "`train.validation_features`!"
            )

        self.config = config
        self.manifest = manifest
        self.validation = validation
        self.features = features
        self.validation_features = validation_features
        self.output_dir = Path(output_dir if output_dir is not None else config.train.output_dir)
        self.workers = workers
        self.device = torch.device(device_name())

        self.train_rows = [i for i, row in enumerate(manifest.rows) if row.split is Split.TRAIN]
        self.train_manifest = DatasetManifest(
            rows=[manifest.rows[i] for i in self.train_rows],
            root=manifest.root,
            cache=manifest.cache,
        )
        self.train_features = None if features is None else np.asarray(features[self.train_rows])

        self.model = QdaVPRModel(config.model).to(self.device)
        self.heads = AdversarialHeads(
            dim=config.model.dim,
            blocks=config.model.blocks,
            grl_config=config.grl,
            discriminator_config=config.discriminator,
            seed=config.model.seed,
        ).to(self.device)
        if external:
            self.model.freeze_backbone()

        params = [
            p for p in chain(self.model.parameters(), self.heads.parameters()) if p.requires_grad
        ]
        self.optimizer = torch.optim.AdamW(
            params, lr=lr_at(0.0, config.train), weight_decay=config.train.weight_decay
        )
        self.steps_per_epoch = config.train.steps_per_epoch or max(
            1, len(self.train_manifest) // config.batch.size
        )

    def sample(self, epoch: int, step: int) -> SampledBatch:
        cfg = self.config
        if self.train_features is not None:
            return sample_feature_batch(
                self.train_manifest,
                self.train_features,
                cfg.batch,
                epoch=epoch,
                step=step,
                seed=cfg.train.seed,
            )
        return sample_batch(
            self.train_manifest,
            cfg.batch,
            epoch=epoch,
            step=step,
            seed=cfg.train.seed,
            image_size=cfg.model.train_resize,
            augment=cfg.augment,
            workers=self.workers,
        )

    def fit(self) -> FitResult:
        cfg = self.config
        self.output_dir.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(cfg.train.seed)
        result = FitResult(best_epoch=-1, best_metric=None)

        with open(self.output_dir / LOG_FILE, "w") as log:
            for epoch in range(cfg.train.epochs):
                records = self._run_epoch(epoch, log)
                metric = self.validate()
                summary = EpochSummary(
                    epoch=epoch,
                    lr=lr_at(float(epoch), cfg.train),
                    losses={
                        key: float(np.mean([r.as_dict()[key] for r in records]))
                        for key in records[0].as_dict()
                    },
                    recall_at_1=metric,
                )
                result.history.append(summary)
                logger.info(
                    "epoch %d: %s, R@1 %s",
                    epoch,
                    ", ".join(f"{k}={v:.4f}" for k, v in summary.losses.items()),
                    "n/a" if metric is None else f"{metric:.2f}",
                )

                improved = metric is not None and (
                    result.best_metric is None or metric > result.best_metric
                )
                if improved or (metric is None and result.best_metric is None):
                    result.best_epoch, result.best_metric = epoch, metric
                    self.save(self.output_dir / BEST_CHECKPOINT, epoch, metric)
                self.save(self.output_dir / LAST_CHECKPOINT, epoch, result.best_metric)
        return result

    def _run_epoch(self, epoch: int, log: Any) -> list[LossRecord]:
        cfg = self.config
        records: list[LossRecord] = []
        progress = cfg.train.progress and sys.stderr.isatty()
        for step in tqdm(range(self.steps_per_epoch), desc=f"epoch {epoch}", disable=not progress):
            lr = lr_at(epoch + step / self.steps_per_epoch, cfg.train)
            for group in self.optimizer.param_groups:
                group["lr"] = lr

            batch = self.sample(epoch, step)
            record = train_step(
                batch,
                self.model,
                self.heads,
                cfg,
                self.optimizer,
                epoch=epoch,
                step=step,
                dump_dir=self.output_dir,
            )
            records.append(record)
            entry = {"epoch": epoch, "step": step, "lr": lr, **record.as_dict()}
            log.write(json.dumps(entry) + "\n")
            logger.debug("epoch %d step %d lr %.3g: %s", epoch, step, lr, record)
        return records

    def validate(self) -> float | None:
        """R@1 on the query/db splits of the validation manifest, ``None`` if there are none."""
        splits = {row.split for row in self.validation.rows}
        if not {Split.QUERY, Split.DB} <= splits:
            return None
        report = evaluate_model(
            self.model,
            self.validation,
            self.config.protocol,
            resize=self.config.model.eval_resize,
            features=self.validation_features,
        )
        return report.recalls.get(1, next(iter(report.recalls.values())))

    def checkpoint(self, epoch: int, best_metric: float | None) -> CheckpointRecord:
        return CheckpointRecord(
            config=self.config,
            model=self.model.state_dict(),
            adversarial=self.heads.state_dict(),
            optimizer=self.optimizer.state_dict(),
            epoch=epoch,
            best_metric=best_metric,
        )

    def save(self, path: Path, epoch: int, best_metric: float | None) -> None:
        save_checkpoint(self.checkpoint(epoch, best_metric), path)


####################################################################################################
### Sweeps
####################################################################################################


SWEEP_LOG = "sweep.jsonl"


def expand_grid(grid: dict[str, list[str]]) -> list[list[str]]:
    """All grid combinations as ``section.key=value`` overrides, first key slowest."""
    keys = list(grid)
    for key in keys:
        if not grid[key]:
            raise ConfigError(f"The sweep entry `{key}` has no values!")
    return [
        [f"{key}={value}" for key, value in zip(keys, values)]
        for values in product(*(grid[key] for key in keys))
    ]


@dataclass
class SweepRun:
    overrides: list[str]
    output_dir: Path
    result: FitResult
    pca_recall_at_1: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict[str, Any]:
        return {
            "overrides": self.overrides,
            "output_dir": str(self.output_dir),
            "best_epoch": self.result.best_epoch,
            "best_recall_at_1": self.result.best_metric,
            "pca_recall_at_1": {str(k): v for k, v in self.pca_recall_at_1.items()},
        }


def run_sweep(
    config: ExperimentConfig,
    grid: dict[str, list[str]],
    manifest: DatasetManifest,
    output_dir: Path | str,
    *,
    validation: DatasetManifest | None = None,
    features: NDArray[np.float32] | None = None,
    validation_features: NDArray[np.float32] | None = None,
    pca_dims: tuple[int, ...] = (),
    workers: int = 0,
) -> list[SweepRun]:
    """
    Train one model per grid combination, each into its own ``run<NNN>`` directory.

    The best checkpoint of every run is evaluated once more per entry of ``pca_dims`` on the
    validation split. One line per run is appended to ``sweep.jsonl`` as soon as it finishes.
    """
    output_dir = Path(output_dir)
    combinations = expand_grid(grid)
    for overrides in combinations:
        override_config(config, overrides).validate()
    output_dir.mkdir(parents=True, exist_ok=True)

    runs: list[SweepRun] = []
    with open(output_dir / SWEEP_LOG, "w") as log:
        for number, overrides in enumerate(combinations):
            logger.info("Sweep run %d/%d: %s", number + 1, len(combinations), overrides)
            trainer = Trainer(
                override_config(config, overrides),
                manifest,
                validation=validation,
                features=features,
                validation_features=validation_features,
                output_dir=output_dir / f"run{number:03d}",
                workers=workers,
            )
            run = SweepRun(overrides, trainer.output_dir, trainer.fit())
            if pca_dims and run.result.best_metric is None:
                logger.warning("Run %d has no validation queries, skipping the PCA dims", number)
            elif pca_dims:
                best = load_checkpoint(trainer.output_dir / BEST_CHECKPOINT)
                for dim in pca_dims:
                    report = evaluate(
                        best,
                        trainer.validation,
                        trainer.config.protocol,
                        pca_dim=dim,
                        features=trainer.validation_features,
                    )
                    run.pca_recall_at_1[dim] = report.recalls.get(
                        1, next(iter(report.recalls.values()))
                    )
            runs.append(run)
            log.write(json.dumps(run.as_dict()) + "\n")
            log.flush()
    return runs


####################################################################################################
### Evaluation
####################################################################################################


def model_from_checkpoint(record: CheckpointRecord | Path | str) -> QdaVPRModel:
    """Rebuild the inference model, the adversarial namespace is not needed."""
    if not isinstance(record, CheckpointRecord):
        record = load_checkpoint(record)
    model = QdaVPRModel(record.config.model)
    model.load_state_dict(record.model)
    return model.eval()


@torch.no_grad()
def compute_descriptors(
    model: QdaVPRModel,
    manifest: DatasetManifest,
    rows: list[int],
    *,
    resize: int,
    features: NDArray[np.float32] | None = None,
    batch_size: int = 32,
) -> NDArray[np.float32]:
    """Inference descriptors of the given manifest rows (or of their feature entries)."""
    model.eval()
    device = next(model.combiner.parameters()).device
    chunks: list[NDArray[np.float32]] = []
    for start in range(0, len(rows), batch_size):
        chunk = rows[start : start + batch_size]
        if features is not None:
            inputs = torch.from_numpy(np.ascontiguousarray(features[chunk], dtype=np.float32))
        else:
            images = np.stack([manifest.load_image(row, resize) for row in chunk])
            inputs = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
        chunks.append(model(inputs.to(device), mode="infer").cpu().numpy())
    if not chunks:
        return np.zeros((0, model.config.descriptor_dim), dtype=np.float32)
    return np.concatenate(chunks)


def evaluate_model(
    model: QdaVPRModel,
    manifest: DatasetManifest,
    protocol: EvalProtocol,
    *,
    resize: int,
    pca_dim: int | None = None,
    features: NDArray[np.float32] | None = None,
    save_db: Path | None = None,
) -> RecallReport:
    db_rows = [i for i, row in enumerate(manifest.rows) if row.split is Split.DB]
    query_rows = [i for i, row in enumerate(manifest.rows) if row.split is Split.QUERY]
    if not db_rows or not query_rows:
        raise ProtocolError("Evaluation needs both a `db` and a `query` split!")

    db = compute_descriptors(model, manifest, db_rows, resize=resize, features=features)
    queries = compute_descriptors(model, manifest, query_rows, resize=resize, features=features)
    if pca_dim is not None:
        pca = fit_pca(db, pca_dim)
        db, queries = apply_pca(pca, db), apply_pca(pca, queries)

    index = DescriptorIndex(matrix=db, rows=[manifest.rows[i] for i in db_rows])
    if save_db is not None:
        write_descriptors(index, save_db)
    return recall_at_n(index, queries, [manifest.rows[i] for i in query_rows], protocol)


def evaluate(
    checkpoint: CheckpointRecord | Path | str,
    manifest: DatasetManifest,
    protocol: EvalProtocol | None = None,
    resize: int | None = None,
    pca_dim: int | None = None,
    *,
    features: NDArray[np.float32] | None = None,
    save_db: Path | None = None,
) -> RecallReport:
    """
    Recall@N of a checkpoint on the db and query splits of ``manifest``.

    Only the model namespace of the checkpoint is used.
    """
    if not isinstance(checkpoint, CheckpointRecord):
        checkpoint = load_checkpoint(checkpoint)
    if features is not None:
        model_config = checkpoint.config.model.with_feature_channels(features.shape[-1])
        if model_config.in_channels != checkpoint.config.model.in_channels:
            raise ConfigError(
                f"The checkpoint expects `{checkpoint.config.model.in_channels}` feature "
                f"channels, the features file has `{features.shape[-1]}`!"
            )
        _check_feature_rows(features, manifest)
    model = model_from_checkpoint(checkpoint).to(torch.device(device_name()))
    return evaluate_model(
        model,
        manifest,
        protocol or checkpoint.config.protocol,
        resize=resize or checkpoint.config.model.eval_resize,
        pca_dim=pca_dim,
        features=features,
        save_db=save_db,
    )


@torch.no_grad()
def probe_query_domains(
    model: QdaVPRModel,
    manifest: DatasetManifest,
    rows: list[int],
    *,
    resize: int,
    seed: int = 0,
) -> float:
    """
    Linear probe accuracy of the six synthetic domains on mean pooled query features.

    Every listed image is rendered into all six domains.
    """
    model.eval()
    device = next(model.combiner.parameters()).device
    features: list[NDArray[np.float32]] = []
    labels: list[int] = []
    for row in rows:
        image = manifest.load_image(row, resize)
        for domain in SyntheticDomain:
            rendered = apply_domain(image, int(domain), seed + row)
            inputs = torch.from_numpy(rendered).permute(2, 0, 1)[None].contiguous()
            output = model(inputs.to(device), mode="train")
            features.append(output.stacked_queries.mean(dim=1)[0].cpu().numpy())
            labels.append(int(domain))
    return domain_probe_accuracy(np.stack(features), np.asarray(labels), seed)


####################################################################################################
### Attention
####################################################################################################


def dump_attention(
    checkpoint: CheckpointRecord | Path | str,
    image: NDArray[np.float32] | Path | str,
    out_dir: Path | str,
    resize: int | None = None,
) -> list[Path]:
    """
    Write the head averaged cross-attention of every block.

    ``block{l}.npy`` holds the raw ``M x H x W`` weights, ``block{l}.png`` the map averaged
    over the queries, min-max scaled to ``0..255`` and upsampled to the image size.
    """
    model = model_from_checkpoint(checkpoint)
    size = resize or model.config.eval_resize
    if not isinstance(image, np.ndarray):
        path = Path(image)
        if not path.exists():
            raise PathError(f"Image `{path}` does not exist!")
        with Image.open(path) as handle:
            image = np.asarray(handle.convert("RGB"), dtype=np.float32) / 255.0
    height, width = image.shape[:2]
    pixels = resize_image(image, size) if image.shape[:2] != (size, size) else image

    inputs = torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1)[None]
    maps = model.attention_maps(inputs)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for block, amap in enumerate(maps):
        raw = amap[0].numpy()
        np.save(out_dir / f"block{block}.npy", raw)

        mean = raw.mean(axis=0)
        span = mean.max() - mean.min()
        scaled = (mean - mean.min()) / span if span > 0 else np.zeros_like(mean)
        heat = Image.fromarray(to_uint8(scaled)).resize(
            (width, height), Image.Resampling.BILINEAR
        )
        heat.save(out_dir / f"block{block}.png")
        written += [out_dir / f"block{block}.png", out_dir / f"block{block}.npy"]
    return written