"""Task heads over frozen ECG embeddings, plus the evaluation metrics.

One three-layer MLP per task (never shared), trained with the common
optimization recipe. Regression tasks report R-squared in original target
units; binary tasks report AUROC with the training split class-balanced by
undersampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from cardalign import tensor as T
from cardalign.training import AdamW, EarlyStop, ScheduleConfig, lr_at


class MetricError(ValueError):
    pass


def r_squared(preds, targets) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 1 or preds.size < 2:
        raise MetricError(f"need matching 1-D vectors of length >= 2, got {preds.shape} vs {targets.shape}")
    ss_tot = float(((targets - targets.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise MetricError("targets are constant; R^2 undefined")
    ss_res = float(((preds - targets) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"need matching 1-D vectors, got {scores.shape} vs {labels.shape}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("both classes must be present for AUROC")
    ranks = rankdata(scores)  # average ranks on ties -> Mann-Whitney with ties at 1/2
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def balance_classes(labels: np.ndarray, seed: int) -> np.ndarray:
    """Indices of a class-balanced subsample (majority undersampled).

    Returned indices are sorted; only training data should pass through
    here, validation and test stay untouched.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("cannot balance: one class is empty")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    if len(pos) > len(neg):
        pos = rng.choice(pos, size=len(neg), replace=False)
    elif len(neg) > len(pos):
        neg = rng.choice(neg, size=len(pos), replace=False)
    return np.sort(np.concatenate([pos, neg]))


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str  # "regression" | "binary"
    target: str  # phenotype field or outcome name
    metric: str = ""

    def __post_init__(self):
        if self.kind not in ("regression", "binary"):
            raise ValueError(f"kind must be regression or binary, got {self.kind!r}")
        expected = "r2" if self.kind == "regression" else "auroc"
        metric = self.metric or expected
        if metric != expected:
            raise ValueError(f"{self.kind} tasks pair with {expected}, got {metric!r}")
        object.__setattr__(self, "metric", metric)


class TargetScaler:
    """Train-split standardization for regression targets."""

    def __init__(self):
        self.mean = None
        self.std = None

    def fit(self, values: np.ndarray) -> "TargetScaler":
        values = np.asarray(values, dtype=np.float64)
        self.mean = values.mean(axis=0)
        std = values.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)
        return self

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def transform(self, values: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise MetricError("target standardization statistics missing; fit on the train split first")
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise MetricError("target standardization statistics missing; fit on the train split first")
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


class MlpHead:
    """Exactly three affine layers with GELU activations between."""

    def __init__(self, input_dim: int, rng: np.random.Generator,
                 hidden: tuple = (256, 64), dtype=None):
        if len(hidden) != 2:
            raise ValueError("a three-layer head needs exactly two hidden widths")
        self.dtype = dtype or T.get_default_dtype()
        h1, h2 = hidden
        self.params = {
            "fc1.w": T.Tensor(rng.normal(0, input_dim**-0.5, (input_dim, h1)), True, self.dtype),
            "fc1.b": T.Tensor(np.zeros(h1), True, self.dtype),
            "fc2.w": T.Tensor(rng.normal(0, h1**-0.5, (h1, h2)), True, self.dtype),
            "fc2.b": T.Tensor(np.zeros(h2), True, self.dtype),
            "fc3.w": T.Tensor(rng.normal(0, h2**-0.5, (h2, 1)), True, self.dtype),
            "fc3.b": T.Tensor(np.zeros(1), True, self.dtype),
        }

    def forward(self, x: T.Tensor | np.ndarray) -> T.Tensor:
        x = T.as_tensor(x)
        h = T.gelu(T.linear(x, self.params["fc1.w"], self.params["fc1.b"]))
        h = T.gelu(T.linear(h, self.params["fc2.w"], self.params["fc2.b"]))
        out = T.linear(h, self.params["fc3.w"], self.params["fc3.b"])
        return T.reshape(out, (x.shape[0],))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(T.constant(x, dtype=self.dtype)).data


def head_loss(head: MlpHead, x: np.ndarray, y: np.ndarray, kind: str) -> T.Tensor:
    """MSE for regression targets, logistic loss for binary labels."""
    pred = head.forward(T.constant(x, dtype=head.dtype))
    yt = T.constant(np.asarray(y, dtype=np.float64))
    if kind == "regression":
        return T.mse(pred, yt)
    # mean softplus(z) - y*z, the standard stable binary cross-entropy
    return T.reduce_mean(T.sub(T.softplus(pred), T.mul(yt, pred)))


@dataclass
class HeadTrainConfig:
    hidden: tuple = (256, 64)
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 256
    warmup_epochs: int = 2
    max_epochs: int = 120
    patience: int = 15
    seed: int = 0


@dataclass
class HeadResult:
    task: TaskSpec
    head: MlpHead
    test_metric: float
    val_metric: float
    n_test: int


def train_head(task: TaskSpec, embeddings: dict, targets: dict,
               cfg: HeadTrainConfig | None = None) -> HeadResult:
    """Train one task head on frozen, precomputed embeddings.

    `embeddings` and `targets` map split name -> array. Regression targets
    are standardized with train statistics; the reported R-squared is
    computed in original units. Binary training data is class-balanced
    first; validation and test are untouched.
    """
    cfg = cfg or HeadTrainConfig()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    x_train, y_train = np.asarray(embeddings["train"]), np.asarray(targets["train"], dtype=np.float64)
    x_val, y_val = np.asarray(embeddings["val"]), np.asarray(targets["val"], dtype=np.float64)
    x_test, y_test = np.asarray(embeddings["test"]), np.asarray(targets["test"], dtype=np.float64)

    # embeddings are standardized on train statistics so probe conditioning
    # does not depend on the encoder's output scale
    feat = TargetScaler().fit(x_train)
    x_train, x_val, x_test = feat.transform(x_train), feat.transform(x_val), feat.transform(x_test)

    scaler = None
    if task.kind == "regression":
        scaler = TargetScaler().fit(y_train)
        y_fit = scaler.transform(y_train)
    else:
        keep = balance_classes(y_train.astype(int), cfg.seed)
        x_train, y_train = x_train[keep], y_train[keep]
        y_fit = y_train

    head = MlpHead(x_train.shape[1], rng, hidden=cfg.hidden)
    optim = AdamW(head.params, weight_decay=cfg.weight_decay)
    n = len(x_train)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    schedule = ScheduleConfig(base_lr=cfg.base_lr, steps_per_epoch=steps_per_epoch,
                              warmup_epochs=cfg.warmup_epochs, max_epochs=cfg.max_epochs)
    stopper = EarlyStop(patience=cfg.patience, mode="max")

    def evaluate(x, y) -> float:
        pred = head.predict(x)
        if task.kind == "regression":
            return r_squared(scaler.inverse(pred), y)
        return auroc(pred, y.astype(int))

    best_params = {k: v.data.copy() for k, v in head.params.items()}
    step = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            with T.tape():
                loss = head_loss(head, x_train[batch], y_fit[batch], task.kind)
                grads = T.grads_by_name(T.backward(loss), head.params)
            optim.step(grads, lr=lr_at(step, schedule))
            step += 1
        val_metric = evaluate(x_val, y_val)
        if stopper.update(val_metric, epoch) == "stop":
            break
        if stopper.best_epoch == epoch:
            best_params = {k: v.data.copy() for k, v in head.params.items()}
    for k, v in best_params.items():
        head.params[k] = T.Tensor(v, requires_grad=True)
    return HeadResult(task=task, head=head, test_metric=evaluate(x_test, y_test),
                      val_metric=float(stopper.best_metric), n_test=len(x_test))
