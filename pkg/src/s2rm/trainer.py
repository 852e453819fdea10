"""Loss, Adam, plateau scheduling, the teacher-forced training loop and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, FormatError, NumericError
from .recurrent import build_model, model_kind
from .tensorcore import default_dtype

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 8
    epochs: int = 40
    plateau_factor: float = 2.0
    plateau_threshold: float = 1e-4
    plateau_patience: int = 5
    clip_norm: float = 5.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.plateau_patience < 1:
            raise ConfigError("lr, batch_size, epochs and patience must be positive")
        if self.plateau_factor <= 1:
            raise ConfigError("plateau_factor is a divisor and must exceed 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


def bce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over all elements, computed from logits."""
    if logits.shape != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} differ")
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


class Adam:
    """Bias-corrected Adam over an ordered list of parameters."""

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self, grads=None) -> None:
        grads = [p.grad for p in self.params] if grads is None else grads
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params, grads, state: Adam, lr: float | None = None, model=None) -> None:
    """Functional form: one Adam update, then re-project module embeddings if ``model`` is given."""
    if lr is not None:
        state.lr = lr
    state.step(grads)
    if model is not None and hasattr(model, "after_update"):
        model.after_update()


class PlateauScheduler:
    """Divide the learning rate by ``factor`` after ``patience`` epochs without
    a relative improvement of at least ``threshold`` over the best loss seen."""

    def __init__(self, lr: float, factor: float = 2.0, threshold: float = 1e-4, patience: int = 5):
        self.lr = lr
        self.factor = factor
        self.threshold = threshold
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best * (1 - self.threshold):
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr /= self.factor
                self.bad_epochs = 0
        return self.lr

    def state_dict(self) -> dict:
        return dict(lr=self.lr, best=self.best, bad_epochs=self.bad_epochs)

    def load_state_dict(self, state: dict) -> None:
        self.lr, self.best, self.bad_epochs = state["lr"], state["best"], state["bad_epochs"]


def plateau_step(scheduler: PlateauScheduler, val_loss: float) -> float:
    return scheduler.step(val_loss)


# -- data plumbing ---------------------------------------------------------------

def dataset_tensors(dataset, dtype=torch.float32, indices=None):
    """All views of ``dataset`` as ``centers (N, T, A, 2)`` and ``crops (N, T, A, 11, 11)``."""
    indices = range(len(dataset)) if indices is None else indices
    centers, crops = [], []
    for i in indices:
        ep = dataset[i]
        centers.append(ep.centers)
        crops.append(ep.crops())
    return (torch.as_tensor(np.stack(centers), dtype=dtype),
            torch.as_tensor(np.stack(crops), dtype=dtype))


def sequence_loss(model, centers: torch.Tensor, crops: torch.Tensor) -> torch.Tensor:
    """Teacher-forced one-step loss over a batch of sequences.

    Step ``t`` consumes the views of ``t`` (the views of ``t + 1`` for models
    that see the future) and is scored on the crops at the view centers of
    ``t + 1``.
    """
    T = centers.shape[1]
    state = model.init_state(centers.shape[0])
    future = getattr(model, "uses_future_observations", False)
    total = 0.0
    for t in range(T - 1):
        src = t + 1 if future else t
        state = model.step(state, centers[:, src], crops[:, src])
        logits = model.query(state, centers[:, t + 1])
        total = total + bce_loss(logits, crops[:, t + 1].flatten(-2))
    return total / (T - 1)


def evaluate_loss(model, centers, crops, batch_size: int = 8) -> float:
    losses, weights = [], []
    with torch.no_grad():
        for lo in range(0, centers.shape[0], batch_size):
            c, o = centers[lo: lo + batch_size], crops[lo: lo + batch_size]
            losses.append(float(sequence_loss(model, c, o)))
            weights.append(c.shape[0])
    return float(np.average(losses, weights=weights))


# -- checkpoints -------------------------------------------------------------------

CKPT_MAGIC = b"S2RMCKPT1"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict  # name -> tensor (float32)
    optimizer: dict = field(default_factory=dict)  # t, lr, m: {name: tensor}, v: {name: tensor}
    epoch: int = 0
    val_loss: float = math.nan
    extra: dict = field(default_factory=dict)

    def build(self, dtype=torch.float32):
        """Rebuild the model and load the stored parameters."""
        with default_dtype(dtype):
            model = build_model(self.kind, **self.config)
        model.load_state_dict({k: v.to(dtype) for k, v in self.params.items()}, strict=True)
        return model


def checkpoint_from_model(model, optimizer: Adam | None = None, epoch: int = 0,
                          val_loss: float = math.nan, extra: dict | None = None) -> Checkpoint:
    params = {k: v.detach().to(torch.float32).clone() for k, v in model.state_dict().items()}
    opt = {}
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        opt = dict(t=optimizer.t, lr=optimizer.lr,
                   m={n: m.detach().to(torch.float32).clone() for n, m in zip(names, optimizer.m)},
                   v={n: v.detach().to(torch.float32).clone() for n, v in zip(names, optimizer.v)})
    return Checkpoint(model_kind(model), model.config.to_dict(), params, opt, epoch, val_loss, extra or {})


def _tensor_record(name: str, t: torch.Tensor) -> bytes:
    raw_name = name.encode("utf-8")
    dims = tuple(t.shape)
    out = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", len(dims))
    out += struct.pack(f"<{len(dims)}I", *dims)
    return out + t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()


def save_checkpoint(ckpt: Checkpoint, path, overwrite: bool = False) -> Path:
    """Binary layout: magic, u32 version, u32-length JSON metadata, u32 record
    count, then records ``(u16 name length, name, u8 rank, u32 dims, f32 values)``."""
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"checkpoint {path} already exists")
    records = [(k, v) for k, v in ckpt.params.items()]
    if ckpt.optimizer:
        records += [(f"adam.m/{k}", v) for k, v in ckpt.optimizer["m"].items()]
        records += [(f"adam.v/{k}", v) for k, v in ckpt.optimizer["v"].items()]
    names = [n for n, _ in records]
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names in checkpoint")
    lossy = [n for n, t in records if t.dtype == torch.float64 and not torch.equal(t.float().double(), t.detach())]
    if lossy:
        log.warning("checkpoint stores 32-bit values; %d float64 tensors lose precision (first: %s)",
                    len(lossy), lossy[0])
    meta = dict(kind=ckpt.kind, config=ckpt.config, epoch=ckpt.epoch,
                val_loss=None if math.isnan(ckpt.val_loss) else ckpt.val_loss,
                optimizer=dict(t=ckpt.optimizer.get("t", 0), lr=ckpt.optimizer.get("lr")) if ckpt.optimizer else None,
                extra=ckpt.extra)
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(raw_meta)), raw_meta,
            struct.pack("<I", len(records))]
    body += [_tensor_record(n, t) for n, t in records]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(body))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=len(self.raw))
        out = self.raw[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, meta_len = r.unpack("<II", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(CKPT_MAGIC))
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}", offset=len(CKPT_MAGIC) + 8) from exc
    (count,) = r.unpack("<I", "record count")
    params, m, v = {}, {}, {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "record name length")
        name = r.take(name_len, "record name").decode("utf-8")
        (rank,) = r.unpack("<B", "record rank")
        dims = r.unpack(f"<{rank}I", "record dims")
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(4 * n, f"values of {name}"), dtype="<f4").reshape(dims)
        t = torch.from_numpy(values.astype(np.float32))
        target = m if name.startswith("adam.m/") else v if name.startswith("adam.v/") else params
        key = name.split("/", 1)[1] if target is not params else name
        if key in target:
            raise FormatError(f"duplicate record {name!r}", offset=start)
        target[key] = t
    if r.pos != len(r.raw):
        raise FormatError("trailing bytes after checkpoint records", offset=r.pos)
    opt = {}
    if meta.get("optimizer"):
        opt = dict(t=meta["optimizer"]["t"], lr=meta["optimizer"]["lr"], m=m, v=v)
    val = meta.get("val_loss")
    return Checkpoint(meta["kind"], meta["config"], params, opt, meta.get("epoch", 0),
                      math.nan if val is None else val, meta.get("extra", {}))


# -- training loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list  # dicts: epoch, lr, train_loss, val_loss
    checkpoint_path: Path | None = None


EPOCH_FIELDS = ("epoch", "lr", "train_loss", "val_loss")


def train(model, train_data, val_data, config: TrainConfig = TrainConfig(), out_dir=None,
          progress: bool = False) -> TrainResult:
    """Teacher-forced training with plateau decay and lowest-validation-loss selection.

    ``train_data``/``val_data`` are datasets (see :mod:`s2rm.worldsim`) or
    ``(centers, crops)`` tensor pairs.
    """
    dtype = torch.float64 if config.dtype == "float64" else torch.float32
    model.to(dtype)
    tr = train_data if isinstance(train_data, tuple) else dataset_tensors(train_data, dtype)
    va = val_data if isinstance(val_data, tuple) else dataset_tensors(val_data, dtype)
    tr = tuple(x.to(dtype) for x in tr)
    va = tuple(x.to(dtype) for x in va)
    params = [p for _, p in model.named_parameters()]
    opt = Adam(params, lr=config.lr)
    sched = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_threshold, config.plateau_patience)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history, best = [], None
    n = tr[0].shape[0]
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        model.train()
        losses, weights = [], []
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = torch.as_tensor(order[lo: lo + config.batch_size])
            loss = sequence_loss(model, tr[0][idx], tr[1][idx])
            if not torch.isfinite(loss):
                dump = None
                if out_dir is not None:
                    dump = out_dir / f"nonfinite_e{epoch}_b{b}.npz"
                    np.savez(dump, indices=order[lo: lo + config.batch_size], epoch=epoch, seed=config.seed)
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b} (shuffle seed "
                                   f"[{config.seed}, {epoch}], sequences {order[lo: lo + config.batch_size].tolist()}"
                                   f"{', dumped to ' + str(dump) if dump else ''})")
            opt.zero_grad()
            loss.backward()
            if config.clip_norm:
                torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
            opt.lr = sched.lr
            opt.step()
            model.after_update()
            losses.append(float(loss.detach()))
            weights.append(len(idx))
        model.eval()
        train_loss = float(np.average(losses, weights=weights))
        val_loss = evaluate_loss(model, *va, batch_size=config.batch_size)
        row = dict(epoch=epoch, lr=sched.lr, train_loss=train_loss, val_loss=val_loss)
        history.append(row)
        if progress:
            log.info("epoch %d lr %.3g train %.5f val %.5f", epoch, sched.lr, train_loss, val_loss)
        if best is None or val_loss < best.val_loss:
            best = checkpoint_from_model(model, opt, epoch, val_loss, extra=dict(train=dataclasses.asdict(config)))
            if out_dir is not None:
                save_checkpoint(best, out_dir / "ckpt.bin", overwrite=True)
        sched.step(val_loss)
        if out_dir is not None:
            write_epoch_log(history, out_dir / "epochs.csv")
    return TrainResult(best, history, out_dir / "ckpt.bin" if out_dir is not None else None)


def write_epoch_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EPOCH_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in EPOCH_FIELDS})
