"""Adam with decoupled weight decay, the training loop, and checkpoint
selection on validation AUC.

Determinism contract: given a TrainConfig seed and single-threaded BLAS,
every run is bit-identical.  All randomness (init, epoch shuffles,
per-sample augmentation) flows from generators keyed by structured seed
lists, so no draw depends on evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import augment as aug
from . import metrics
from .errors import ConfigError, DataError, LabelError, NonFiniteError, ShapeError
from .layers import bce_backward, bce_loss, sigmoid_forward
from .network import Network

# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(params: dict[str, np.ndarray], lr: float = 1e-3,
                   betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                   weight_decay: float = 1e-4) -> OptimizerState:
    if lr <= 0 or eps <= 0:
        raise ConfigError("learning rate and eps must be positive")
    if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
        raise ConfigError(f"betas must lie in [0, 1), got {betas}")
    if weight_decay < 0:
        raise ConfigError("weight_decay must be >= 0")
    return OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                          weight_decay=weight_decay,
                          m={k: np.zeros_like(p) for k, p in params.items()},
                          v={k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState) -> None:
    """One in-place update.  Decay is decoupled: it multiplies the
    pre-step parameters and is never mixed into the moments, so zero decay
    reproduces plain Adam exactly."""
    if set(grads) != set(params):
        raise ShapeError("gradient keys do not match parameter keys")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, "
                             f"parameter is {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * ((m / bc1) / (np.sqrt(v / bc2) + state.eps))
        if state.weight_decay:
            update = update + state.lr * state.weight_decay * params[name]
        params[name] -= update


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class LabeledVolumes:
    """In-memory scan set: (N, D, H, W) volumes with labels and patient ids."""

    volumes: np.ndarray
    labels: np.ndarray
    patients: tuple[str, ...]
    scan_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float32)
        self.labels = np.asarray(self.labels)
        if self.volumes.ndim != 4:
            raise ShapeError(f"volumes must be (N, D, H, W), got {self.volumes.shape}")
        n = self.volumes.shape[0]
        if self.labels.shape != (n,):
            raise ShapeError(f"{self.labels.shape[0] if self.labels.ndim else 0} labels "
                             f"for {n} volumes")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise LabelError("labels must be 0 or 1")
        self.labels = self.labels.astype(np.int64)
        if len(self.patients) != n:
            raise ShapeError(f"{len(self.patients)} patient ids for {n} volumes")
        if self.scan_ids is not None and len(self.scan_ids) != n:
            raise ShapeError(f"{len(self.scan_ids)} scan ids for {n} volumes")

    def __len__(self):
        return self.volumes.shape[0]


def assert_patient_disjoint(*sets: LabeledVolumes) -> None:
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            shared = set(sets[i].patients) & set(sets[j].patients)
            if shared:
                raise DataError(f"patients appear in two splits: {sorted(shared)[:5]}")


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    seed: int
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    pos_weight: float = 1.0
    val_every: int = 1
    flip: bool = False
    flip_axes: tuple[int, ...] = (1,)
    elastic: aug.ElasticParams | None = None
    crop: aug.CropAugParams | None = None
    early_stop_train_loss: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.val_every < 1:
            raise ConfigError("epochs, batch_size and val_every must be positive")
        if self.pos_weight <= 0:
            raise ConfigError("pos_weight must be positive")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_val_auc: float | None
    best_step: int
    final_params: dict[str, np.ndarray]
    log: list[dict]
    steps: int


def _derived_seed(*key) -> int:
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _augment_sample(vol: np.ndarray, cfg: TrainConfig, epoch: int, idx: int) -> np.ndarray:
    if cfg.flip:
        vol = aug.random_flip(vol, axes=cfg.flip_axes,
                              seed=_derived_seed(cfg.seed, 3, epoch, idx, 0))
    if cfg.elastic is not None:
        p = replace(cfg.elastic, seed=_derived_seed(cfg.seed, 3, epoch, idx, 1))
        vol = aug.elastic_deform(vol, p)
    if cfg.crop is not None:
        p = replace(cfg.crop, seed=_derived_seed(cfg.seed, 3, epoch, idx, 2))
        vol, _ = aug.crop_to_zero(vol, p)
    return vol


def best_eval_index(aucs) -> int:
    """Index of the maximum; ties go to the earliest evaluation."""
    best = 0
    for i, a in enumerate(aucs):
        if a > aucs[best]:
            best = i
    return best


def score_dataset(net: Network, params: dict[str, np.ndarray],
                  data: LabeledVolumes, batch_size: int = 8) -> np.ndarray:
    """Raw logits for every volume, in dataset order."""
    out = []
    for start in range(0, len(data), batch_size):
        x = data.volumes[start:start + batch_size][..., None]
        logits, _ = net.forward(params, x)
        out.append(logits)
    return np.concatenate(out) if out else np.zeros(0, np.float32)


def predict_probabilities(net: Network, params, data: LabeledVolumes,
                          batch_size: int = 8) -> np.ndarray:
    return sigmoid_forward(score_dataset(net, params, data, batch_size))


def dataset_bce(net: Network, params, data: LabeledVolumes,
                batch_size: int = 8, pos_weight: float = 1.0) -> float:
    logits = score_dataset(net, params, data, batch_size)
    loss, _ = bce_loss(logits, data.labels, pos_weight=pos_weight)
    return loss


def train(net: Network, train_set: LabeledVolumes, val_set: LabeledVolumes | None,
          cfg: TrainConfig, log_path=None) -> TrainResult:
    """Minibatch AdamW training with best-on-validation selection.

    Logs one record per step plus validation/full-loss records; the best
    checkpoint is the earliest validation evaluation achieving the maximum
    AUC.  Without a validation set the final parameters are returned.
    """
    if len(train_set) == 0 or (val_set is not None and len(val_set) == 0):
        raise DataError("empty split")
    if val_set is not None:
        assert_patient_disjoint(train_set, val_set)
    params = net.init_parameters(np.random.default_rng([cfg.seed, 0]))
    state = init_optimizer(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                           weight_decay=cfg.weight_decay)
    log: list[dict] = []
    best_params = None
    best_auc = -1.0
    best_step = 0
    step = 0
    stop = False
    n = len(train_set)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idxs = order[start:start + cfg.batch_size]
            vols = [_augment_sample(train_set.volumes[i], cfg, epoch, int(i))
                    for i in idxs]
            x = np.stack(vols)[..., None]
            y = train_set.labels[idxs]
            logits, fstate = net.forward(params, x)
            loss, cache = bce_loss(logits, y, pos_weight=cfg.pos_weight)
            if not math.isfinite(loss):
                raise NonFiniteError(f"loss diverged at step {step + 1} (epoch {epoch})")
            grads, _, _ = net.backward(params, fstate, bce_backward(cache))
            adamw_step(params, grads, state)
            step += 1
            log.append({"step": step, "epoch": epoch, "loss": float(loss),
                        "lr": cfg.lr})
        if val_set is not None and (epoch + 1) % cfg.val_every == 0:
            probs = predict_probabilities(net, params, val_set, cfg.batch_size)
            val_auc = metrics.auc(metrics.ScoredSet(probs, val_set.labels))
            log.append({"step": step, "val_auc": float(val_auc)})
            if val_auc > best_auc:
                best_auc = val_auc
                best_step = step
                best_params = {k: p.copy() for k, p in params.items()}
        if cfg.early_stop_train_loss is not None:
            full = dataset_bce(net, params, train_set, cfg.batch_size,
                               pos_weight=cfg.pos_weight)
            log.append({"step": step, "train_loss": float(full)})
            if full < cfg.early_stop_train_loss:
                stop = True
        if stop:
            break
    if log_path is not None:
        with open(log_path, "w") as f:
            for entry in log:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
    if best_params is None:
        best_params = params
        best_auc = None
        best_step = step
    return TrainResult(params=best_params, best_val_auc=best_auc, best_step=best_step,
                       final_params=params, log=log, steps=step)


def run_seeds(net: Network, train_set: LabeledVolumes, val_set: LabeledVolumes,
              test_set: LabeledVolumes, cfg: TrainConfig,
              seeds) -> tuple[list[metrics.EvalReport], metrics.EvalReport]:
    """Train one model per seed, evaluate each on the test set, aggregate.

    The operating threshold comes from the validation set (F2-optimal),
    never from the test set.
    """
    assert_patient_disjoint(train_set, val_set, test_set)
    reports = []
    for seed in seeds:
        result = train(net, train_set, val_set, replace(cfg, seed=seed))
        val_probs = predict_probabilities(net, result.params, val_set, cfg.batch_size)
        threshold = metrics.select_threshold_f2(
            metrics.ScoredSet(val_probs, val_set.labels))
        test_probs = predict_probabilities(net, result.params, test_set, cfg.batch_size)
        scored = metrics.ScoredSet(test_probs, test_set.labels,
                                   scan_ids=test_set.scan_ids,
                                   patient_ids=test_set.patients)
        reports.append(metrics.evaluate(scored, threshold=threshold, seed=seed))
    return reports, metrics.aggregate_runs(reports)
