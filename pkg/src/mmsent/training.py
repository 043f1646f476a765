"""Cross-entropy training with Adam, rotated-fold evaluation, best-on-
validation checkpointing, and the ablation harness.

Every source of randomness (init, shuffling, dropout) derives from the config
seed through named SeedSequence spawn keys, so a run is bit-reproducible from
(seed, config, dataset) alone.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as Mx
from . import tensor as T
from .data import Dataset, Sample, read_tensor, write_tensor
from .fusion import ModelConfig, SentimentModel, SentimentDistribution
from .metrics import MetricsReport
from .tensor import Tensor, TensorError, backward
from .text import EmbeddingMatrix

logger = logging.getLogger(__name__)

LOSS_EPS = 1e-12
# ablation harness rows, ablated variants first, full model last
ABLATION_ORDER = ("no_sa_ca", "no_smatt", "no_satt", "none")


class TrainingError(RuntimeError):
    """Training aborted (divergence or invalid configuration)."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    epochs: int = 50
    dropout: float = 0.5
    seed: int = 0
    fold_count: int = 5
    split: tuple[int, int, int] = (80, 10, 10)  # train : validation : test
    ablation: str = "none"
    channels: int = 32
    embed_width: int = 50
    hidden_width: int = 64
    fused_width: int = 128
    reduction: int = 8
    class_count: int = 3
    max_tokens: int = 64
    backbone_blocks: int = 3
    backbone_trainable: bool = True
    train_embedding: bool = False

    def validate(self) -> None:
        if sum(self.split) != 100 or any(r <= 0 for r in self.split):
            raise TrainingError(f"split ratios must be positive and sum to 100, got {self.split}")
        if self.batch_size < 1:
            raise TrainingError("batch size must be at least 1")
        # learning_rate 0 is allowed: it must leave parameters untouched
        if self.learning_rate < 0:
            raise TrainingError("learning rate must be nonnegative")
        if self.epochs < 1:
            raise TrainingError("epoch count must be at least 1")
        if self.fold_count < 1:
            raise TrainingError("fold count must be at least 1")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainingError("dropout rate must be in [0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels,
            embed_width=self.embed_width,
            hidden_width=self.hidden_width,
            fused_width=self.fused_width,
            reduction=self.reduction,
            class_count=self.class_count,
            ablation=self.ablation,
            dropout=self.dropout,
            backbone_blocks=self.backbone_blocks,
            backbone_trainable=self.backbone_trainable,
            train_embedding=self.train_embedding,
        )


def ablate_variant(cfg: TrainConfig) -> ModelConfig:
    """Model wiring for the config's ablation flag (unknown flags raise)."""
    return cfg.model_config()


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


# ---------------------------------------------------------------------------
# loss and optimizer


def cross_entropy(dist: SentimentDistribution, label: int) -> Tensor:
    """Negative log-likelihood of the true class, guarded against log(0)."""
    k = dist.probs.shape[0]
    if not 0 <= label < k:
        raise TensorError(f"label {label} outside [0, {k})")
    picked = T.gather_rows(dist.probs, [label])
    return T.reshape(T.neg(T.log(T.add_scalar(picked, LOSS_EPS))), ())


class Adam:
    """Adam with bias correction over a fixed parameter order.

    beta1 = 0.9, beta2 = 0.999, eps = 1e-8. Parameters update in place;
    a tensor whose grad was never populated is treated as zero gradient.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: list[tuple[str, Tensor]]):
        self.params = params
        self.m = [np.zeros_like(t.data) for _, t in params]
        self.v = [np.zeros_like(t.data) for _, t in params]
        self.t = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.BETA1 ** self.t
        c2 = 1.0 - self.BETA2 ** self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad if p.grad is not None else 0.0
            self.m[i] = self.BETA1 * self.m[i] + (1.0 - self.BETA1) * g
            self.v[i] = self.BETA2 * self.v[i] + (1.0 - self.BETA2) * (g * g)
            p.data -= lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.EPS)


# ---------------------------------------------------------------------------
# fold plans


@dataclass
class Fold:
    train: list[int]
    validation: list[int]
    test: list[int]


@dataclass
class FoldPlan:
    folds: list[Fold]


def make_folds(n: int, cfg: TrainConfig) -> FoldPlan:
    """Rotated test slices over one seeded shuffle.

    Fold k rotates the permutation by k test-slice lengths and takes the
    leading test%, then validation%, then the rest for training, so each fold
    partitions the dataset and the default ratios give disjoint test slices.
    """
    if n < cfg.fold_count:
        raise TrainingError(f"dataset of {n} samples cannot make {cfg.fold_count} folds")
    perm = _rng(cfg.seed, 0).permutation(n)
    t_len = max(1, round(n * cfg.split[2] / 100))
    v_len = max(1, round(n * cfg.split[1] / 100))
    if t_len + v_len >= n:
        raise TrainingError("dataset too small for the requested split ratios")
    folds = []
    for k in range(cfg.fold_count):
        rot = np.roll(perm, -k * t_len)
        folds.append(Fold(
            test=[int(i) for i in rot[:t_len]],
            validation=[int(i) for i in rot[t_len:t_len + v_len]],
            train=[int(i) for i in rot[t_len + v_len:]],
        ))
    return FoldPlan(folds)


# ---------------------------------------------------------------------------
# evaluation helpers


def predict_probs(model: SentimentModel, samples: list[Sample]) -> np.ndarray:
    with T.no_grad():
        return np.stack([model.forward(s)[0].probs.data for s in samples])


def evaluate(model: SentimentModel, samples: list[Sample]) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) without touching the tape."""
    probs = predict_probs(model, samples)
    labels = np.array([s.label for s in samples])
    losses = -np.log(probs[np.arange(len(samples)), labels] + LOSS_EPS)
    accuracy = float((probs.argmax(axis=1) == labels).mean())
    return float(losses.mean()), accuracy


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(out_dir: str | Path, model: SentimentModel,
                    meta: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = model.state_tensors()
    doc = {
        "format": 1,
        "config": asdict(model.config),
        "tensors": [name for name, _ in tensors],
        "meta": meta or {},
    }
    for name, t in tensors:
        write_tensor(out / f"{name}.dmlt", t.data)
    (out / "model.json").write_text(json.dumps(doc, indent=1))
    return out


def load_checkpoint(ckpt_dir: str | Path) -> SentimentModel:
    ckpt = Path(ckpt_dir)
    doc = json.loads((ckpt / "model.json").read_text())
    cfg = ModelConfig(**doc["config"])
    emb_values = read_tensor(ckpt / "embedding.values.dmlt")
    embedding = EmbeddingMatrix(Tensor(emb_values), trainable=cfg.train_embedding)
    model = SentimentModel(cfg, embedding, np.random.default_rng(0))
    by_name = dict(model.state_tensors())
    for name in doc["tensors"]:
        target = by_name[name]
        values = read_tensor(ckpt / f"{name}.dmlt")
        if values.shape != target.data.shape:
            raise TrainingError(
                f"checkpoint tensor {name} has shape {values.shape}, expected {target.data.shape}")
        target.data = values
    return model


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class FoldOutcome:
    fold: int
    best_epoch: int
    best_val_accuracy: float
    report: MetricsReport
    curve: list[dict] = field(default_factory=list)  # per-epoch rows


@dataclass
class TrainResult:
    config: TrainConfig
    outcomes: list[FoldOutcome]
    average: dict
    best_fold: int
    models: list[SentimentModel]

    @property
    def best_model(self) -> SentimentModel:
        return self.models[self.best_fold]


def build_embedding(cfg: TrainConfig, vocab_size: int) -> EmbeddingMatrix:
    """Seeded stand-in for pretrained vectors, shared by every fold."""
    rng = _rng(cfg.seed, 3)
    return EmbeddingMatrix.random(vocab_size, cfg.embed_width, rng,
                                  trainable=cfg.train_embedding)


def _check_finite(model: SentimentModel, fold: int, epoch: int, batch: int) -> None:
    for name, p in model.parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(
                f"gradient of parameter group {name!r} overflowed "
                f"(fold {fold}, epoch {epoch}, batch {batch})")


def train(dataset: Dataset, cfg: TrainConfig,
          embedding: EmbeddingMatrix | None = None) -> TrainResult:
    """Train one model per fold and evaluate each best checkpoint.

    Per fold: Glorot init from the fold seed, shuffled minibatches with the
    batch loss as the mean over samples, Adam updates, end-of-epoch
    validation, and the highest-validation-accuracy epoch (earliest on ties)
    restored before the test pass.
    """
    cfg.validate()
    if not dataset.samples:
        raise TrainingError("dataset is empty")
    model_cfg = ablate_variant(cfg)
    plan = make_folds(len(dataset), cfg)
    if embedding is None:
        embedding = build_embedding(cfg, len(dataset.vocab))
    emb_initial = embedding.values.data.copy()

    batch_size = min(cfg.batch_size, min(len(f.train) for f in plan.folds))
    if batch_size < cfg.batch_size:
        logger.info("batch size clipped from %d to the training-set size %d",
                    cfg.batch_size, batch_size)

    outcomes: list[FoldOutcome] = []
    models: list[SentimentModel] = []
    for k, fold in enumerate(plan.folds):
        embedding.values.data[...] = emb_initial
        model = SentimentModel(model_cfg, embedding, _rng(cfg.seed, 1, k))
        rng_train = _rng(cfg.seed, 2, k)
        adam = Adam(model.parameters())
        train_samples = [dataset.samples[i] for i in fold.train]
        val_samples = [dataset.samples[i] for i in fold.validation]
        test_samples = [dataset.samples[i] for i in fold.test]

        best_acc, best_epoch, best_state = -1.0, -1, None
        curve = []
        for epoch in range(cfg.epochs):
            order = rng_train.permutation(len(train_samples))
            loss_total, correct = 0.0, 0
            for b0 in range(0, len(order), batch_size):
                chunk = order[b0:b0 + batch_size]
                losses = []
                for idx in chunk:
                    s = train_samples[idx]
                    dist, _ = model.forward(s, training=True, rng=rng_train)
                    losses.append(cross_entropy(dist, s.label))
                    if int(np.argmax(dist.probs.data)) == s.label:
                        correct += 1
                batch_loss = T.scale(T.add_n(losses), 1.0 / len(losses))
                value = batch_loss.item()
                if not np.isfinite(value):
                    raise TrainingError(
                        f"loss became non-finite (fold {k}, epoch {epoch}, "
                        f"batch {b0 // batch_size})")
                loss_total += value * len(losses)
                adam.zero_grad()
                backward(batch_loss)
                _check_finite(model, k, epoch, b0 // batch_size)
                adam.step(cfg.learning_rate)
            val_loss, val_acc = evaluate(model, val_samples)
            curve.append({
                "epoch": epoch,
                "train_loss": loss_total / len(order),
                "val_loss": val_loss,
                "train_acc": correct / len(order),
                "val_acc": val_acc,
            })
            if val_acc > best_acc:
                best_acc, best_epoch = val_acc, epoch
                best_state = [p.data.copy() for _, p in model.parameters()]

        for (_, p), saved in zip(model.parameters(), best_state):
            p.data = saved.copy()
        probs = predict_probs(model, test_samples)
        labels = [s.label for s in test_samples]
        report = Mx.full_report(labels, probs, cfg.class_count)
        outcomes.append(FoldOutcome(k, best_epoch, best_acc, report, curve))
        # freeze this fold's weights before the shared embedding resets
        fold_emb = EmbeddingMatrix(Tensor(embedding.values.data.copy()),
                                   trainable=False)
        frozen = SentimentModel(model_cfg, fold_emb, np.random.default_rng(0))
        src_by_name = dict(model.state_tensors())
        for name, dst in frozen.state_tensors():
            dst.data = src_by_name[name].data.copy()
        models.append(frozen)
        logger.info("fold %d: best epoch %d (val acc %.4f), test acc %.4f",
                    k, best_epoch, best_acc, report.accuracy)

    average = Mx.average_reports([o.report for o in outcomes])
    best_fold = int(np.argmax([o.best_val_accuracy for o in outcomes]))
    return TrainResult(cfg, outcomes, average, best_fold, models)


# ---------------------------------------------------------------------------
# ablation harness


def run_ablation(dataset: Dataset, cfg: TrainConfig,
                 seeds: list[int]) -> tuple[list[dict], dict]:
    """Retrain every wiring variant with shared folds and seeds.

    Returns rows in the fixed report order (ablated variants first, the full
    model last), each averaging test accuracy and macro F1 over the seeds,
    plus the per-run detail map.
    """
    if not seeds:
        raise TrainingError("ablation needs at least one seed")
    detail: dict[str, list[dict]] = {v: [] for v in ABLATION_ORDER}
    for variant in ABLATION_ORDER:
        for seed in seeds:
            run_cfg = replace(cfg, ablation=variant, seed=seed)
            started = time.perf_counter()
            result = train(dataset, run_cfg)
            detail[variant].append({
                "seed": seed,
                "accuracy": result.average["accuracy"],
                "f1": result.average["macro_f1"],
                "seconds": time.perf_counter() - started,
            })
            logger.info("ablation %s seed %d: acc %.4f f1 %.4f",
                        variant, seed, detail[variant][-1]["accuracy"],
                        detail[variant][-1]["f1"])
    rows = []
    for variant in ABLATION_ORDER:
        runs = detail[variant]
        rows.append({
            "variant": variant,
            "f1": float(np.mean([r["f1"] for r in runs])),
            "accuracy": float(np.mean([r["accuracy"] for r in runs])),
        })
    return rows, detail


# ---------------------------------------------------------------------------
# CSV writers (training curves and the ablation table)

CURVE_COLUMNS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")


def write_curves(path: str | Path, curve: list[dict]) -> None:
    lines = [",".join(CURVE_COLUMNS)]
    for row in curve:
        lines.append(",".join(repr(row[c]) if c != "epoch" else str(row[c])
                              for c in CURVE_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def write_ablation_csv(path: str | Path, rows: list[dict]) -> None:
    lines = ["variant,f1,accuracy"]
    for row in rows:
        lines.append(f"{row['variant']},{row['f1']!r},{row['accuracy']!r}")
    Path(path).write_text("\n".join(lines) + "\n")
