"""Metrics, one-step evaluation, rollouts, enclave maps and dropped-view sweeps."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import CROP
from .errors import InputError
from .geometry import embed_position, kernel_batch
from .trainer import bce_loss
from .worldsim import FRAME, HALF, extract_crops, sample_centers

log = logging.getLogger(__name__)

GRID = (6, 18, 30, 42)
GRID_CENTERS = np.array([(r, c) for r in GRID for c in GRID], dtype=np.int64)
PROMPT_STEPS = 20
ROLLOUT_STEPS = 25
DROP_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(9))
METRIC_FIELDS = ("dataset", "n_balls", "drop_fraction", "balanced_accuracy", "f1", "mean_bce")


# -- metrics ----------------------------------------------------------------------

def binarize(pred) -> np.ndarray:
    """Threshold probabilities (or pass through binary values) at 0.5."""
    return np.asarray(pred, dtype=float) >= 0.5


def confusion(pred, target) -> tuple[int, int, int, int]:
    """``(tp, fp, tn, fn)`` counts."""
    p = binarize(pred).ravel()
    t = np.asarray(target).astype(bool).ravel()
    if p.shape != t.shape:
        raise ValueError("prediction and target sizes differ")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, tn, fn


def balanced_accuracy_from_counts(tp, fp, tn, fn) -> tuple[float, bool]:
    """Mean of recall and specificity, plus a flag set when a class is absent.

    With one class absent its term is undefined and the defined term is
    returned alone.
    """
    terms = []
    if tp + fn:
        terms.append(tp / (tp + fn))
    if tn + fp:
        terms.append(tn / (tn + fp))
    if not terms:
        return math.nan, True
    return sum(terms) / len(terms), len(terms) < 2


def f1_from_counts(tp, fp, tn, fn) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def balanced_accuracy(pred, target) -> float:
    return balanced_accuracy_from_counts(*confusion(pred, target))[0]


def f1(pred, target) -> float:
    return f1_from_counts(*confusion(pred, target))


@dataclass
class MetricsRow:
    dataset: str
    n_balls: int
    drop_fraction: float
    balanced_accuracy: float
    f1: float
    mean_bce: float
    flagged: bool = False
    counts: tuple = (0, 0, 0, 0)

    def as_csv(self) -> dict:
        return dict(dataset=self.dataset, n_balls=self.n_balls, drop_fraction=f"{self.drop_fraction:g}",
                    balanced_accuracy=repr(self.balanced_accuracy), f1=repr(self.f1), mean_bce=repr(self.mean_bce))


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def get(self, dataset=None, drop_fraction=None) -> MetricsRow:
        for r in self.rows:
            if (dataset is None or r.dataset == dataset) and (
                    drop_fraction is None or math.isclose(r.drop_fraction, drop_fraction)):
                return r
        raise KeyError((dataset, drop_fraction))

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow(row.as_csv())
        return path


# -- reference predictors -------------------------------------------------------------

_SATURATED = 30.0


class ConstantPredictor:
    """Ignores its inputs and predicts ``value`` everywhere."""

    uses_future_observations = False

    def __init__(self, value: float = 0.0):
        self.value = value

    def init_state(self, batch=1):
        return batch

    def step(self, state, centers, crops):
        return state

    def query(self, state, centers):
        centers = torch.as_tensor(centers)
        logit = _SATURATED if self.value >= 0.5 else -_SATURATED
        return torch.full((*centers.shape[:-1], CROP * CROP), logit, dtype=torch.float64)


class CopyPreviousPredictor:
    """Paints the current step's observed crops onto a blank canvas and answers
    queries from it; unobserved pixels are predicted empty."""

    uses_future_observations = False

    def init_state(self, batch=1):
        return np.zeros((batch, FRAME, FRAME), dtype=np.uint8)

    def step(self, state, centers, crops):
        centers = np.asarray(centers, dtype=np.int64)
        crops = np.asarray(crops) >= 0.5
        canvas = np.zeros_like(state)
        for b in range(canvas.shape[0]):
            for (r, c), crop in zip(centers[b], crops[b]):
                canvas[b, r - HALF: r + HALF + 1, c - HALF: c + HALF + 1] = crop
        return canvas

    def query(self, state, centers):
        centers = np.asarray(centers, dtype=np.int64)
        out = np.stack([extract_crops(state[b], centers[b]) for b in range(state.shape[0])])
        logits = np.where(out.reshape(*out.shape[:-2], -1) > 0, _SATURATED, -_SATURATED)
        return torch.as_tensor(logits, dtype=torch.float64)


class GroundTruthOracle:
    """Answers every query with the true crop of the frame the state points at.

    The state is the index of the frame the model would be predicting.
    """

    uses_future_observations = False

    def __init__(self, frames: np.ndarray):
        self.frames = np.asarray(frames)

    def init_state(self, batch=1):
        return 0

    def step(self, state, centers, crops):
        return state + 1

    def query(self, state, centers):
        centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
        crops = extract_crops(self.frames[state], centers).reshape(1, len(centers), -1)
        return torch.as_tensor(np.where(crops > 0, _SATURATED, -_SATURATED), dtype=torch.float64)


# -- one-step evaluation ----------------------------------------------------------------

def _model_dtype(model):
    if isinstance(model, torch.nn.Module):
        return next(model.parameters()).dtype
    return torch.float64


def view_subset(A: int, drop_fraction: float, seed: int, seq_seed: int, t: int) -> np.ndarray:
    """Sorted indices of the ``ceil((1 - drop_fraction) * A)`` views kept at step ``t``."""
    keep = int(math.ceil(round((1.0 - drop_fraction) * A, 9)))
    if keep >= A:
        return np.arange(A)
    rng = np.random.default_rng([seed, seq_seed, t])
    return np.sort(rng.permutation(A)[:keep])


def one_step_eval(model, dataset, drop_fraction: float = 0.0, seed: int = 0, batch_size: int = 16,
                  dataset_id: str | None = None) -> MetricsRow:
    """Teacher-forced one-step prediction metrics over a whole dataset.

    At each step a seeded subset of the views is fed to the model and every
    view center of the next step is queried. Confusion counts are summed
    over the dataset before computing the metrics.
    """
    if not 0.0 <= drop_fraction <= 1.0:
        raise InputError(f"drop_fraction must lie in [0, 1], got {drop_fraction}")
    dtype = _model_dtype(model)
    future = getattr(model, "uses_future_observations", False)
    tp = fp = tn = fn = 0
    bce_sum, bce_count = 0.0, 0
    n = len(dataset)
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            eps = [dataset[i] for i in range(lo, min(n, lo + batch_size))]
            centers = np.stack([e.centers for e in eps])
            crops = np.stack([e.crops() for e in eps])
            seq_seeds = [int(e.meta.get("seed", e.meta.get("index", 0))) for e in eps]
            B, T, A = centers.shape[:3]
            state = model.init_state(B)
            for t in range(T - 1):
                src = t + 1 if future else t
                keep = [view_subset(A, drop_fraction, seed, s, src) for s in seq_seeds]
                c_in = np.stack([centers[b, src, k] for b, k in enumerate(keep)])
                o_in = np.stack([crops[b, src, k] for b, k in enumerate(keep)])
                if isinstance(model, torch.nn.Module):
                    c_in = torch.as_tensor(c_in, dtype=dtype)
                    o_in = torch.as_tensor(o_in, dtype=dtype)
                state = model.step(state, c_in, o_in)
                q = centers[:, t + 1]
                logits = model.query(state, torch.as_tensor(q, dtype=dtype) if isinstance(model, torch.nn.Module) else q)
                target = crops[:, t + 1].reshape(B, A, -1)
                probs = torch.sigmoid(logits).double().numpy()
                a, b_, c, d = confusion(probs, target)
                tp, fp, tn, fn = tp + a, fp + b_, tn + c, fn + d
                bce_sum += float(bce_loss(logits.double(), torch.as_tensor(target, dtype=torch.float64))) * target.size
                bce_count += target.size
    ba, flagged = balanced_accuracy_from_counts(tp, fp, tn, fn)
    if flagged:
        log.warning("dataset %s drop %.2f: a class is absent from the targets", dataset_id, drop_fraction)
    return MetricsRow(dataset_id or str(getattr(dataset, "path", "dataset")), int(getattr(dataset, "n_balls", 0)),
                      float(drop_fraction), ba, f1_from_counts(tp, fp, tn, fn),
                      bce_sum / max(bce_count, 1), flagged, (tp, fp, tn, fn))


def robustness_sweep(model, datasets: dict, fractions=DROP_FRACTIONS, seed: int = 0,
                     out_csv=None, batch_size: int = 16) -> MetricsReport:
    """One-step metrics for every (dataset, drop fraction) pair."""
    report = MetricsReport()
    for name, ds in datasets.items():
        for frac in fractions:
            report.rows.append(one_step_eval(model, ds, frac, seed=seed, batch_size=batch_size, dataset_id=name))
    if out_csv is not None:
        report.to_csv(out_csv)
    return report


# -- rollouts and images ------------------------------------------------------------------

def stitch_grid(crops) -> np.ndarray:
    """Paste 16 crops (row-major over the 4x4 grid) into a 48x48 image; gaps stay 0."""
    crops = np.asarray(crops, dtype=float).reshape(len(GRID_CENTERS), CROP, CROP)
    image = np.zeros((FRAME, FRAME))
    for (r, c), crop in zip(GRID_CENTERS, crops):
        image[r - HALF: r + HALF + 1, c - HALF: c + HALF + 1] = crop
    return image


def grid_mask() -> np.ndarray:
    return stitch_grid(np.ones((len(GRID_CENTERS), CROP, CROP))).astype(bool)


@dataclass
class RolloutResult:
    predictions: np.ndarray  # (45, 48, 48) stitched probabilities, step s predicts frame s
    truth: np.ndarray  # (45, 48, 48) ground-truth frames restricted to the grid windows
    records: list  # per step: dict(step, phase, centers, fed crops)
    prompt_len: int = PROMPT_STEPS
    rollout_len: int = ROLLOUT_STEPS


def _as_input(model, x):
    if isinstance(model, torch.nn.Module):
        return torch.as_tensor(np.asarray(x), dtype=_model_dtype(model)).unsqueeze(0)
    return np.asarray(x)[None]


def rollout(model, episode, seed: int = 0, A: int = 10, prompt: int = PROMPT_STEPS,
            horizon: int = ROLLOUT_STEPS) -> RolloutResult:
    """Prompt with ground-truth views, then feed back thresholded predictions.

    Step ``i`` (0-based) first queries the 4x4 grid (the prediction of frame
    ``i``), then feeds observations: ground-truth crops of frame ``i`` at
    random centers during the prompt, afterwards the model's own thresholded
    predictions at fresh random centers. Center sequences depend only on
    ``seed``, so every model sees the same positions.
    """
    frames = np.asarray(episode.frames if hasattr(episode, "frames") else episode)
    total = prompt + horizon
    if frames.shape[0] < total:
        raise InputError(f"rollout needs at least {total} frames, episode has {frames.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = np.stack([sample_centers(A, rng) for _ in range(total)]).reshape(total, A, 2)
    mask = grid_mask()
    state = model.init_state(1)
    preds, truth, records = [], [], []
    with torch.no_grad():
        for i in range(total):
            grid_logits = model.query(state, _as_input(model, GRID_CENTERS))
            preds.append(stitch_grid(torch.sigmoid(grid_logits[0]).double().numpy()))
            truth.append(np.where(mask, frames[i], 0))
            if i < prompt:
                fed = extract_crops(frames[i], centers[i]).astype(float)
                phase = "prompt"
            else:
                logits = model.query(state, _as_input(model, centers[i]))
                fed = (torch.sigmoid(logits[0]).double().numpy() >= 0.5).astype(float).reshape(A, CROP, CROP)
                phase = "rollout"
            state = model.step(state, _as_input(model, centers[i]), _as_input(model, fed))
            records.append(dict(step=i + 1, phase=phase, centers=centers[i], crops=fed))
    return RolloutResult(np.stack(preds), np.stack(truth), records, prompt, horizon)


def enclave_map(model) -> np.ndarray:
    """``(M, 48, 48)`` kernel values between every pixel's embedding and each module."""
    P = model.embeddings.P.detach()
    rows, cols = np.meshgrid(np.arange(FRAME), np.arange(FRAME), indexing="ij")
    pix = torch.as_tensor(np.stack((rows, cols), -1).reshape(-1, 2), dtype=P.dtype)
    with torch.no_grad():
        Z = kernel_batch(P, embed_position(pix, model.config.embed_dim), model.config.kernel)
    return Z.double().numpy().reshape(-1, FRAME, FRAME)


def write_pgm(image, path) -> Path:
    """Binary 8-bit PGM (P5); values in [0, 1] are scaled to 0..255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    data = np.rint(img * 255).astype(np.uint8)
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, size, maxval, data = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in size.split())
    return np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w) / int(maxval)
