"""Synthetic multi-modal tasks, metrics and the training loop.

Latent construction: ``z ~ N(0, I_K)``; coordinate ``k`` is owned by modality
``k % M``. A ``rho`` fraction of the coordinates is private (seen only by its
owner); the rest are shared by every modality. The label score is

    s = sum_shared w_k z_k + sum_pairs w_ab z_a z_b

where each pair joins private coordinates of two different modalities,
weights are normalized so ``var(s) = 1`` and the label is ``clip(s, -3, 3)``.
With ``rho = 1`` every term is a cross-modal product, so no single modality
carries information about the label.

Each modality emits ``x_t = O_m (z_V * profile_V(t)) + noise`` where ``V``
are its visible coordinates and ``profile`` is a fixed positive sinusoid per
(modality, coordinate).
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import math
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numcore as nc
from .config import CoupledModelConfig, OptimConfig, SyntheticTaskSpec, _coerce
from .model import ModalityBatch, init_model, model_backward, model_forward, pad_modalities, predict

__all__ = [
    "SpecError",
    "TrainingDivergedError",
    "Split",
    "SyntheticDataset",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "to_classes",
    "MetricReport",
    "compute_metrics",
    "classification_metrics",
    "evaluate",
    "TrainResult",
    "train",
    "METRIC_HEADER",
    "format_row",
]

METRIC_HEADER = ["seed", "fusion", "epoch", "mae", "corr", "acc2", "f1", "acc3", "f13"]
NEUTRAL_BAND = 0.5


class SpecError(ValueError):
    """Degenerate synthetic task specification."""


class TrainingDivergedError(FloatingPointError):
    """Loss became NaN or infinite during training."""


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Split:
    batch: ModalityBatch
    labels: np.ndarray  # continuous score in [-3, 3]

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Split":
        return Split(self.batch.take(idx), self.labels[idx])


@dataclass
class SyntheticDataset:
    spec: SyntheticTaskSpec
    train: Split
    val: Split
    test: Split

    def split(self, name: str) -> Split:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


def _label_structure(spec: SyntheticTaskSpec):
    M, K = spec.n_modalities, spec.latent_dim
    if not 0.0 <= spec.rho <= 1.0:
        raise SpecError(f"rho must lie in [0, 1], got {spec.rho}")
    if len(spec.raw_dims) != M or len(spec.noise) != M:
        raise SpecError("raw_dims and noise need one entry per modality")
    if K < 1:
        raise SpecError("latent_dim must be >= 1")
    if spec.rho == 1.0 and K < M:
        raise SpecError(f"latent_dim {K} < {M} modalities with rho = 1")
    n_private = int(round(spec.rho * K))
    if n_private and M < 2:
        raise SpecError("cross-modal coordinates need at least two modalities")
    if n_private == 1:
        raise SpecError("rho leaves a single private coordinate; nothing to pair it with")
    private = list(range(n_private))
    shared = list(range(n_private, K))
    owner = [k % M for k in range(K)]
    pairs = [(private[i], private[i + 1]) for i in range(0, n_private - 1, 2)]
    if n_private % 2:
        last = private[-1]
        partner = next(k for k in private if owner[k] != owner[last])
        pairs.append((last, partner))
    visible = [sorted(set(shared) | {k for k in private if owner[k] == m}) for m in range(M)]
    return shared, pairs, visible


def generate_dataset(spec: SyntheticTaskSpec) -> SyntheticDataset:
    """Deterministic train/val/test splits for ``spec`` (disjoint draws)."""
    shared, pairs, visible = _label_structure(spec)
    M, K, L = spec.n_modalities, spec.latent_dim, spec.seq_len
    rng = np.random.default_rng(spec.seed)
    w = rng.normal(size=len(shared) + len(pairs))
    w /= np.linalg.norm(w)
    obs = [rng.normal(size=(spec.raw_dims[m], len(visible[m]))) / math.sqrt(max(len(visible[m]), 1)) for m in range(M)]
    freq = [rng.integers(1, 4, size=len(visible[m])) for m in range(M)]
    phase = [rng.uniform(0, 2 * math.pi, size=len(visible[m])) for m in range(M)]

    n = spec.n_train + spec.n_val + spec.n_test
    z = rng.normal(size=(n, K))
    score = z[:, shared] @ w[: len(shared)]
    for j, (a, b) in enumerate(pairs):
        score = score + w[len(shared) + j] * z[:, a] * z[:, b]
    labels = np.clip(score, -3.0, 3.0)

    lo = max(1, math.ceil(spec.min_len_frac * L))
    sequences = []
    for m in range(M):
        if spec.unaligned:
            lengths = rng.integers(lo, L + 1, size=n)
        else:
            lengths = np.full(n, L)
        seqs = []
        for i in range(n):
            Lm = int(lengths[i])
            tau = (np.arange(Lm) + 0.5) / Lm
            profile = 1.0 + 0.5 * np.sin(2 * math.pi * freq[m][None, :] * tau[:, None] + phase[m][None, :])
            clean = (z[i, visible[m]][None, :] * profile) @ obs[m].T
            seqs.append(clean + spec.noise[m] * rng.normal(size=clean.shape))
        sequences.append(seqs)
    batch = pad_modalities(sequences, length=L)
    full = Split(batch, labels)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return SyntheticDataset(
        spec,
        full.take(slice(0, a)),
        full.take(slice(a, b)),
        full.take(slice(b, n)),
    )


def to_classes(score: np.ndarray, n_classes: int) -> np.ndarray:
    """Sign (2 classes) or negative/neutral/positive buckets (3 classes)."""
    if n_classes == 2:
        return (score >= 0).astype(np.int64)
    if n_classes == 3:
        return np.where(score < -NEUTRAL_BAND, 0, np.where(score > NEUTRAL_BAND, 2, 1)).astype(np.int64)
    raise ValueError(f"n_classes must be 2 or 3, got {n_classes}")


def save_dataset(ds: SyntheticDataset, directory: str | Path) -> None:
    """Tensor container ``data.cssm`` plus an INI sidecar ``spec.ini``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name in ("train", "val", "test"):
        sp = ds.split(name)
        for m, (x, mk) in enumerate(zip(sp.batch.xs, sp.batch.masks)):
            tensors[f"{name}.x{m}"] = x
            tensors[f"{name}.mask{m}"] = mk
        tensors[f"{name}.labels"] = sp.labels
    nc.save_tensors(directory / "data.cssm", tensors)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["task"] = {
        f.name: (", ".join(map(str, v)) if isinstance(v, tuple) else str(v))
        for f in dataclasses.fields(ds.spec)
        for v in [getattr(ds.spec, f.name)]
    }
    buf = io.StringIO()
    cp.write(buf)
    (directory / "spec.ini").write_text(buf.getvalue())


def load_dataset(directory: str | Path) -> SyntheticDataset:
    directory = Path(directory)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string((directory / "spec.ini").read_text())
    hints = typing.get_type_hints(SyntheticTaskSpec)
    spec = SyntheticTaskSpec(**{k: _coerce(hints[k], v, f"spec.ini {k}") for k, v in cp.items("task")})
    tensors = nc.load_tensors(directory / "data.cssm")
    splits = {}
    for name in ("train", "val", "test"):
        xs = [tensors[f"{name}.x{m}"] for m in range(spec.n_modalities)]
        masks = [tensors[f"{name}.mask{m}"] for m in range(spec.n_modalities)]
        splits[name] = Split(ModalityBatch(xs, masks), tensors[f"{name}.labels"])
    return SyntheticDataset(spec, **splits)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Regression and classification metrics; F1 scores are support-weighted.

    Fields that do not apply (e.g. MAE for a classification head) are NaN.
    """

    mae: float
    corr: float
    acc2: float
    f1: float
    acc3: float
    f13: float

    def as_row(self) -> list[float]:
        return [self.mae, self.corr, self.acc2, self.f1, self.acc3, self.f13]


def _weighted_f1(pred: np.ndarray, true: np.ndarray) -> float:
    total = 0.0
    for c in np.unique(true):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        total += f1 * np.sum(true == c)
    return float(total / len(true))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return 0.0
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


def compute_metrics(preds, labels) -> MetricReport:
    """Metrics for continuous predictions on the [-3, 3] label scale.

    Acc-2 / F1 compare non-negative against negative; Acc-3 / F1-3 use the
    neutral band ``|y| <= 0.5``.
    """
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} vs labels {labels.shape}")
    if preds.size == 0:
        raise ValueError("compute_metrics: empty input")
    p2, t2 = to_classes(preds, 2), to_classes(labels, 2)
    p3, t3 = to_classes(preds, 3), to_classes(labels, 3)
    return MetricReport(
        mae=float(np.mean(np.abs(preds - labels))),
        corr=_pearson(preds, labels),
        acc2=float(np.mean(p2 == t2)),
        f1=_weighted_f1(p2, t2),
        acc3=float(np.mean(p3 == t3)),
        f13=_weighted_f1(p3, t3),
    )


def classification_metrics(logits: np.ndarray, labels: np.ndarray) -> MetricReport:
    """Metrics for a classification head against continuous scores.

    With 3 classes, Acc-2/F1 are taken over non-neutral samples only,
    comparing the negative and positive logits.
    """
    if logits.shape[0] == 0:
        raise ValueError("classification_metrics: empty input")
    C = logits.shape[1]
    nan = float("nan")
    if C == 2:
        pred, true = logits.argmax(axis=1), to_classes(labels, 2)
        return MetricReport(nan, nan, float(np.mean(pred == true)), _weighted_f1(pred, true), nan, nan)
    pred3, true3 = logits.argmax(axis=1), to_classes(labels, 3)
    keep = true3 != 1
    acc2 = f1 = nan
    if keep.any():
        p2 = (logits[keep, 2] > logits[keep, 0]).astype(np.int64)
        t2 = (true3[keep] == 2).astype(np.int64)
        acc2, f1 = float(np.mean(p2 == t2)), _weighted_f1(p2, t2)
    return MetricReport(nan, nan, acc2, f1, float(np.mean(pred3 == true3)), _weighted_f1(pred3, true3))


def evaluate(params, cfg: CoupledModelConfig, split: Split) -> MetricReport:
    if len(split) == 0:
        raise ValueError("evaluate: empty dataset")
    out = predict(params, cfg, split.batch)
    if cfg.head == "regression":
        return compute_metrics(out, split.labels)
    return classification_metrics(out, split.labels)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def format_row(seed, fusion: str, epoch, report: MetricReport) -> list[str]:
    return [str(seed), fusion, str(epoch)] + [repr(float(v)) for v in report.as_row()]


@dataclass
class TrainResult:
    store: nc.ParameterStore
    rows: list[list[str]] = field(default_factory=list)
    val: MetricReport | None = None
    test: MetricReport | None = None


def _loss(cfg: CoupledModelConfig, out: np.ndarray, labels: np.ndarray):
    if cfg.head == "regression":
        return nc.l1_loss(out, labels)
    return nc.cross_entropy(out, to_classes(labels, cfg.n_classes))


def train(
    cfg: CoupledModelConfig,
    data: SyntheticDataset,
    optim: OptimConfig,
    seed: int = 0,
    on_row: Callable[[list[str]], None] | None = None,
) -> TrainResult:
    """Adam training with L1 (regression) or cross-entropy loss.

    Emits one validation row per epoch. With ``early_stop_patience > 0`` the
    parameters with the best validation MAE (or F1-3 for classification) are
    kept.
    """
    cfg.validate()
    if data.spec.n_modalities != cfg.n_modalities or tuple(data.spec.raw_dims) != tuple(cfg.raw_dims):
        raise ValueError("dataset modalities / raw dims do not match the model config")
    store = init_model(cfg, seed)
    rng = np.random.default_rng(seed)
    train_split = data.train
    n = len(train_split)
    result = TrainResult(store)
    best, best_params, since = math.inf, None, 0
    for epoch in range(1, optim.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, optim.batch_size):
            idx = order[start : start + optim.batch_size]
            mb = train_split.take(idx)
            store.zero_grad()
            out, cache = model_forward(store.params, cfg, mb.batch)
            loss, dout = _loss(cfg, out, mb.labels)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"seed {seed} epoch {epoch} step {start // optim.batch_size}: loss is {loss}")
            store.accumulate(model_backward(dout, cache))
            nc.adam_step(store, optim.lr, optim.beta1, optim.beta2, optim.eps, optim.weight_decay)
        if not len(data.val):
            continue
        report = evaluate(store.params, cfg, data.val)
        row = format_row(seed, cfg.fusion, epoch, report)
        result.rows.append(row)
        if on_row is not None:
            on_row(row)
        if optim.early_stop_patience > 0:
            key = report.mae if cfg.head == "regression" else -report.f13
            if key < best:
                best, since = key, 0
                best_params = {k: v.copy() for k, v in store.params.items()}
            else:
                since += 1
                if since >= optim.early_stop_patience:
                    break
    if best_params is not None:
        for k, v in best_params.items():
            store.params[k][...] = v
    # empty splits are skipped (e.g. an export-only spec with n_test = 0)
    result.val = evaluate(store.params, cfg, data.val) if len(data.val) else None
    result.test = evaluate(store.params, cfg, data.test) if len(data.test) else None
    return result


def write_csv(path: str | Path, rows: Iterable[list[str]], header: list[str] = METRIC_HEADER) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def compare_fusions(
    cfg: CoupledModelConfig,
    spec: SyntheticTaskSpec,
    optim: OptimConfig,
    fusions: Sequence[str],
    seeds: Sequence[int],
    on_result: Callable[[str, int, MetricReport], None] | None = None,
) -> dict[str, list[MetricReport]]:
    """Test reports per fusion mode; seed ``s`` draws both the data and the init."""
    out: dict[str, list[MetricReport]] = {f: [] for f in fusions}
    for s in seeds:
        data = generate_dataset(replace(spec, seed=s))
        for f in fusions:
            res = train(replace(cfg, fusion=f), data, optim, seed=s)
            out[f].append(res.test)
            if on_result is not None:
                on_result(f, s, res.test)
    return out
