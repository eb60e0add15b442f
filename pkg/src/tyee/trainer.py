"""Task assembly, train/valid steps, the fit loop, and checkpointing.

Components (model, criterion, optimizer, scheduler, metrics) are resolved
by registry lookup from their configured names. Runs are deterministic for
a fixed config and seed: parameter init, batch order, and splits each draw
from their own derived random stream, and checkpoints capture enough state
(including the shuffle generator) for a resumed run to reproduce an
uninterrupted one bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .errors import (
    CorruptCheckpoint,
    EmptyInput,
    IoFailure,
    ShapeMismatch,
    UnknownComponent,
    VersionMismatch,
)
from .metrics import (
    BINARY_ONLY_METRICS,
    CLASSIFICATION_METRICS,
    REGRESSION_METRICS,
    MetricReport,
    compute_classification_metrics,
    compute_regression_metrics,
)
from .nn import CRITERIA, MLPModel, build_model
from .optim import build_optimizer, scheduler_lr
from .seeding import derive_rng, restore_rng, rng_state

logger = logging.getLogger("tyee")

MODELS = {"linear": build_model, "mlp": build_model}
OPTIMIZERS = ("sgd", "adam")
SCHEDULERS = ("none", "step", "cosine")

CHECKPOINT_MAGIC = b"TYCK"
CHECKPOINT_VERSION = 1


@dataclass
class Task:
    """Everything one experiment needs to step: components plus data handles."""

    model: MLPModel
    criterion_name: str
    criterion: callable
    optimizer: object
    scheduler: dict
    base_lr: float
    task_type: str
    metric_names: tuple[str, ...]
    dataset: Dataset
    train_indices: list[int]
    valid_indices: list[int]
    test_indices: list[int] = field(default_factory=list)
    batch_size: int = 32
    select_by: str = "metric"
    rng: np.random.Generator | None = None


def init_task(config: dict, dataset: Dataset, splits) -> Task:
    """Instantiate every configured component and wire it into a Task."""
    seed = config["common"]["seed"]
    model_cfg = config["model"]
    task_cfg = config["task"]
    opt_cfg = config["optimizer"]

    kind = model_cfg["kind"]
    if kind not in MODELS:
        raise UnknownComponent("model", kind)
    try:
        model = MODELS[kind](
            kind,
            input_dim=model_cfg["input_dim"],
            output_dim=model_cfg["output_dim"],
            hidden=model_cfg.get("hidden") or (),
            activation=model_cfg.get("activation", "relu"),
            rng=derive_rng(seed, "init"),
        )
    except ValueError as exc:
        raise UnknownComponent("model", kind, str(exc)) from exc

    train_idx, valid_idx, test_idx = splits
    if len(dataset):
        channels, window = dataset.sample_shape()
        if channels * window != model.input_dim:
            raise ShapeMismatch(
                f"model input_dim {model.input_dim} != sample size "
                f"{channels} x {window} = {channels * window}"
            )
        if task_cfg["type"] == "regression":
            label = dataset[0].label
            size = int(np.asarray(label).size)
            if size != model.output_dim:
                raise ShapeMismatch(
                    f"model output_dim {model.output_dim} != label size {size}"
                )

    criterion_name = task_cfg["criterion"]
    if criterion_name not in CRITERIA:
        raise UnknownComponent("task.criterion", criterion_name)
    expected = "cross_entropy" if task_cfg["type"] == "classification" else "mse"
    if criterion_name != expected:
        raise UnknownComponent(
            "task.criterion", criterion_name, f"incompatible with {task_cfg['type']} task"
        )

    allowed = CLASSIFICATION_METRICS if task_cfg["type"] == "classification" else REGRESSION_METRICS
    for name in task_cfg["metrics"]:
        if name not in allowed:
            raise UnknownComponent("task.metrics", name, f"not a {task_cfg['type']} metric")
        if name in BINARY_ONLY_METRICS and model.output_dim != 2:
            raise UnknownComponent(
                "task.metrics", name, f"requires binary classification, model has {model.output_dim} outputs"
            )

    if opt_cfg["kind"] not in OPTIMIZERS:
        raise UnknownComponent("optimizer", opt_cfg["kind"])
    optimizer = build_optimizer(
        opt_cfg["kind"],
        lr=opt_cfg["lr"],
        momentum=opt_cfg.get("momentum", 0.0),
        beta1=opt_cfg.get("beta1", 0.9),
        beta2=opt_cfg.get("beta2", 0.999),
        eps=opt_cfg.get("eps", 1e-8),
        weight_decay=opt_cfg.get("weight_decay", 0.0),
    )
    scheduler = dict(opt_cfg.get("scheduler") or {"kind": "none"})
    if scheduler.get("kind", "none") not in SCHEDULERS:
        raise UnknownComponent("optimizer.scheduler", scheduler.get("kind"))

    return Task(
        model=model,
        criterion_name=criterion_name,
        criterion=CRITERIA[criterion_name],
        optimizer=optimizer,
        scheduler=scheduler,
        base_lr=opt_cfg["lr"],
        task_type=task_cfg["type"],
        metric_names=tuple(task_cfg["metrics"]),
        dataset=dataset,
        train_indices=list(train_idx),
        valid_indices=list(valid_idx),
        test_indices=list(test_idx),
        batch_size=config["trainer"]["batch_size"],
        select_by=task_cfg.get("select_by", "metric"),
        rng=derive_rng(seed, "shuffle"),
    )


def assemble_batch(task: Task, indices) -> tuple[np.ndarray, np.ndarray]:
    """Flatten samples into a design matrix and a label array."""
    samples = [task.dataset[i] for i in indices]
    x = np.stack([s.data.ravel() for s in samples])
    if task.task_type == "classification":
        y = np.asarray([int(s.label) for s in samples], dtype=np.int64)
    else:
        y = np.stack([np.asarray(s.label, dtype=np.float64) for s in samples])
    return x, y


def train_step(task: Task, batch) -> float:
    """One optimization step: forward, criterion, backward, update.

    This is the override point for custom task types; the surrounding loop
    only assumes a float loss comes back.
    """
    x, y = batch
    if len(x) == 0:
        raise EmptyInput("empty training batch")
    out = task.model.forward(x)
    loss, grad = task.criterion(out, y)
    grads = task.model.backward(grad)
    task.optimizer.step(task.model.params, grads)
    return loss


def valid_step(task: Task, batch) -> tuple[np.ndarray, float]:
    """Forward plus criterion only; no parameter or optimizer mutation."""
    x, y = batch
    if len(x) == 0:
        raise EmptyInput("empty validation batch")
    out = task.model.forward(x)
    loss, _ = task.criterion(out, y)
    task.model.clear_cache()
    if task.task_type == "classification":
        return out.argmax(axis=1), loss
    return out, loss


def _batches(indices, batch_size):
    for i in range(0, len(indices), batch_size):
        yield indices[i : i + batch_size]


def evaluate_split(task: Task, indices) -> tuple[MetricReport | None, float | None]:
    """Metrics and mean loss over one index list, in index order."""
    if not indices:
        return None, None
    outputs = []
    labels = []
    total_loss = 0.0
    for chunk in _batches(list(indices), task.batch_size):
        x, y = assemble_batch(task, chunk)
        out = task.model.forward(x)
        loss, _ = task.criterion(out, y)
        task.model.clear_cache()
        outputs.append(out)
        labels.append(y)
        total_loss += loss * len(chunk)
    out = np.concatenate(outputs)
    y = np.concatenate(labels)
    mean_loss = total_loss / len(indices)
    if task.task_type == "classification":
        preds = out.argmax(axis=1)
        scores = None
        if task.model.output_dim == 2:
            shifted = out - out.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            scores = probs[:, 1]
        report = compute_classification_metrics(
            task.metric_names, y, preds, scores=scores, num_classes=task.model.output_dim
        )
    else:
        report = compute_regression_metrics(task.metric_names, out, y)
    return report, float(mean_loss)


# --- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    """A resumable snapshot of training state."""

    version: int
    epoch: int
    params: list[np.ndarray]
    optimizer_meta: dict
    optimizer_arrays: dict[str, list[np.ndarray]]
    scheduler: dict
    rng_state: dict
    best_metric: float | None
    best_epoch: int | None
    model_meta: dict

    def named_arrays(self):
        for i, p in enumerate(self.params):
            yield f"param/{i}", p
        for key in sorted(self.optimizer_arrays):
            for i, a in enumerate(self.optimizer_arrays[key]):
                yield f"opt/{key}/{i}", a


def snapshot_task(task: Task, epoch: int, best_metric, best_epoch) -> Checkpoint:
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        epoch=epoch,
        params=[p.copy() for p in task.model.params],
        optimizer_meta=task.optimizer.state_meta(),
        optimizer_arrays={k: [a.copy() for a in v] for k, v in task.optimizer.state_arrays().items()},
        scheduler=dict(task.scheduler),
        rng_state=rng_state(task.rng),
        best_metric=best_metric,
        best_epoch=best_epoch,
        model_meta=task.model.meta(),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Serialize a checkpoint: magic, version, payload digest, manifest, blocks."""
    names = []
    blobs = []
    for name, arr in ckpt.named_arrays():
        names.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = {
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "best_epoch": ckpt.best_epoch,
        "rng_state": ckpt.rng_state,
        "model": ckpt.model_meta,
        "optimizer": ckpt.optimizer_meta,
        "optimizer_array_keys": sorted(ckpt.optimizer_arrays),
        "scheduler": ckpt.scheduler,
        "blocks": names,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    payload = struct.pack("<I", len(mbytes)) + mbytes + b"".join(blobs)
    digest = hashlib.sha256(payload).digest()
    blob = CHECKPOINT_MAGIC + struct.pack("<I", ckpt.version) + digest + payload
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    """Parse and verify a checkpoint file."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 44:
        raise CorruptCheckpoint(f"{path}: too short to be a checkpoint")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version > CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version} > supported {CHECKPOINT_VERSION}")
    digest = blob[8:40]
    payload = blob[40:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptCheckpoint(f"{path}: payload digest mismatch")
    (mlen,) = struct.unpack_from("<I", payload, 0)
    try:
        manifest = json.loads(payload[4 : 4 + mlen])
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{path}: bad manifest: {exc}") from exc
    offset = 4 + mlen
    arrays = {}
    for block in manifest["blocks"]:
        count = int(np.prod(block["shape"], dtype=np.int64)) if block["shape"] else 1
        nbytes = 8 * count
        raw = payload[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise CorruptCheckpoint(f"{path}: truncated block {block['name']}")
        arrays[block["name"]] = np.frombuffer(raw, dtype="<f8").reshape(block["shape"]).copy()
        offset += nbytes
    if offset != len(payload):
        raise CorruptCheckpoint(f"{path}: {len(payload) - offset} trailing bytes")

    params = []
    i = 0
    while f"param/{i}" in arrays:
        params.append(arrays[f"param/{i}"])
        i += 1
    optimizer_arrays = {}
    for key in manifest.get("optimizer_array_keys", []):
        items = []
        j = 0
        while f"opt/{key}/{j}" in arrays:
            items.append(arrays[f"opt/{key}/{j}"])
            j += 1
        optimizer_arrays[key] = items
    return Checkpoint(
        version=version,
        epoch=manifest["epoch"],
        params=params,
        optimizer_meta=manifest["optimizer"],
        optimizer_arrays=optimizer_arrays,
        scheduler=manifest["scheduler"],
        rng_state=manifest["rng_state"],
        best_metric=manifest["best_metric"],
        best_epoch=manifest["best_epoch"],
        model_meta=manifest["model"],
    )


# --- the fit loop -----------------------------------------------------------------


def _score(task: Task, report: MetricReport | None, valid_loss, train_loss) -> float:
    if task.select_by == "loss":
        loss = valid_loss if valid_loss is not None else train_loss
        return -loss
    if report is not None:
        return report.aggregate
    return -train_loss


def _reconcile_history(path: Path, start_epoch: int) -> list[dict]:
    """Keep history lines from completed epochs before the resume point."""
    kept = []
    if path.exists():
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            if entry["epoch"] < start_epoch:
                kept.append(entry)
    path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in kept))
    return kept


def fit(
    task: Task,
    epochs: int,
    checkpoint_interval: int,
    out_dir,
    resume_from=None,
    eval_initial: bool = False,
) -> list[dict]:
    """Run the training loop and return the per-epoch history.

    Per epoch: shuffle the train indices from the task's stream, take the
    optimizer through every batch (last partial batch kept), evaluate the
    valid split, log one tab-separated line, append one history record, and
    write checkpoints (every epoch for resume, at the configured interval,
    and whenever the selection score improves).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "history.jsonl"

    start_epoch = 0
    best_metric = None
    best_epoch = None
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.model_meta != task.model.meta():
            raise ShapeMismatch(
                f"checkpoint model {ckpt.model_meta} incompatible with configured {task.model.meta()}"
            )
        task.model.set_params(ckpt.params)
        task.optimizer.load_state(ckpt.optimizer_meta, ckpt.optimizer_arrays)
        task.rng = restore_rng(ckpt.rng_state)
        start_epoch = ckpt.epoch
        best_metric = ckpt.best_metric
        best_epoch = ckpt.best_epoch
        history = _reconcile_history(history_path, start_epoch)
    else:
        history_path.write_text("")
        history = []

    def emit(entry: dict) -> None:
        history.append(entry)
        with open(history_path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def log_line(entry: dict) -> None:
        parts = [
            datetime.now().isoformat(timespec="seconds"),
            f"epoch {entry['epoch']}",
            f"lr {entry['lr']:.6g}",
            f"train_loss {entry['train_loss']:.6g}" if entry["train_loss"] is not None else "train_loss -",
        ]
        for name, value in entry["metrics"].items():
            parts.append(f"{name} {value:.6g}")
        if entry["aggregate"] is not None:
            parts.append(f"aggregate {entry['aggregate']:.6g}")
        logger.info("\t".join(parts))

    if eval_initial and start_epoch == 0 and not history:
        report, vloss = evaluate_split(task, task.valid_indices)
        entry = {
            "epoch": -1,
            "lr": task.base_lr,
            "train_loss": None,
            "valid_loss": vloss,
            "metrics": dict(report.values) if report else {},
            "aggregate": report.aggregate if report else None,
        }
        emit(entry)
        log_line(entry)

    epoch = start_epoch
    try:
        for epoch in range(start_epoch, epochs):
            lr = scheduler_lr(task.scheduler, task.base_lr, epoch)
            task.optimizer.lr = lr
            perm = task.rng.permutation(len(task.train_indices))
            order = [task.train_indices[int(j)] for j in perm]
            loss_sum = 0.0
            for chunk in _batches(order, task.batch_size):
                loss_sum += train_step(task, assemble_batch(task, chunk)) * len(chunk)
            train_loss = loss_sum / len(order) if order else 0.0

            report, valid_loss = evaluate_split(task, task.valid_indices)
            entry = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_loss,
                "valid_loss": valid_loss,
                "metrics": dict(report.values) if report else {},
                "aggregate": report.aggregate if report else None,
            }
            emit(entry)
            log_line(entry)

            score = _score(task, report, valid_loss, train_loss)
            is_best = best_metric is None or score > best_metric
            if is_best:
                best_metric = score
                best_epoch = epoch
            ckpt = snapshot_task(task, epoch + 1, best_metric, best_epoch)
            save_checkpoint(ckpt, out_dir / "ckpt_last.tyck")
            if checkpoint_interval > 0 and (epoch + 1) % checkpoint_interval == 0:
                save_checkpoint(ckpt, out_dir / f"ckpt_epoch_{epoch + 1:04d}.tyck")
            if is_best:
                save_checkpoint(ckpt, out_dir / "ckpt_best.tyck")
    except Exception:
        try:
            save_checkpoint(snapshot_task(task, epoch, best_metric, best_epoch),
                            out_dir / "ckpt_abort.tyck")
        except Exception:
            logger.warning("could not write abort checkpoint")
        raise
    return history
