"""Training loop, count evaluation and checkpoints.

The loss is the plain L1 distance between predicted and target count maps,
summed over a batch; nothing else (no count penalty, no weight decay).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .countmap import CountGeometry, build_target, pad_image, recover_count, subsample_stride
from .datasets import CountingDataset
from .network import NetworkSpec, NetworkState, forward_full
from .tensorcore import AdamState, BatchNormParams, Tape, Tensor, adam_step, l1_loss, stride_slice

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    batch_size: int = 4
    max_epochs: int = 1000
    seed: int = 0
    stride_train: int = 1
    eval_every: int = 1
    # BN running statistics stay put when set (implied by learning_rate == 0)
    freeze_bn_stats: bool = False
    # start the head's batchnorm at the mean/std of the training targets
    calibrate_head: bool = True
    # recompute BN running statistics on the training set before each validation
    recalibrate_bn: bool = True
    # end the run at the first validation whose MAE is below this
    stop_below: float | None = None

    def __post_init__(self):
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be a finite number >= 0")
        if self.stop_below is not None and not self.stop_below > 0:
            raise ValueError("stop_below must be > 0")
        for name in ("batch_size", "max_epochs", "stride_train", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def check_geometry(self, r: int) -> None:
        if r % self.stride_train:
            raise ValueError(f"stride_train {self.stride_train} does not divide receptive field {r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_mae: float | None
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_mae: float = math.inf

    def append(self, rec: EpochRecord) -> bool:
        """Store ``rec``; True when it sets a new best validation MAE."""
        self.records.append(rec)
        if rec.val_mae is not None and rec.val_mae < self.best_val_mae:
            self.best_val_mae = rec.val_mae
            self.best_epoch = rec.epoch
            return True
        return False

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def val_maes(self) -> list[float]:
        return [r.val_mae for r in self.records if r.val_mae is not None]

    def to_csv(self, path=None) -> str:
        """``epoch,loss,val_mae`` rows; floats in shortest round-trip form.

        Wall-clock time is left out so that identical runs give identical files.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_mae"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.loss), "" if r.val_mae is None else repr(r.val_mae)])
        text = buf.getvalue()
        if path is not None:
            atomic_write_bytes(path, text.encode())
        return text

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                val = float(row["val_mae"]) if row["val_mae"] else None
                out.append(EpochRecord(int(row["epoch"]), float(row["loss"]), val, 0.0))
        return out


# ----------------------------------------------------------------------- primitives


def train_loss_map(pred: Tensor, target, stride_train: int = 1) -> Tensor:
    """L1 distance between ``(B, 1, H, W)`` count maps after keeping every ``stride_train``-th entry."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.ndim != 4 or t.ndim != 4:
        raise ValueError(f"expected (B, 1, H, W) maps, got {pred.shape} and {t.shape}")
    if pred.shape != t.shape:
        raise ValueError(f"prediction {pred.shape} and target {t.shape} differ in shape")
    return l1_loss(stride_slice(pred, stride_train), subsample_stride(t, stride_train))


def _padded_batch(images: list[np.ndarray], geometry: CountGeometry, dtype) -> np.ndarray:
    return np.stack([pad_image(img, geometry) for img in images]).astype(dtype, copy=False)


def predict_maps(state: NetworkState, spec: NetworkSpec, images, batch_size: int = 8) -> list[np.ndarray]:
    """Stride-1 count maps ``(H + r - 1, W + r - 1)`` in eval mode."""
    geometry = CountGeometry(spec.receptive_field)
    dtype = next(iter(state.params.values())).dtype
    out: list[np.ndarray] = []
    images = list(images)
    i = 0
    while i < len(images):
        shape = images[i].shape
        j = i
        while j < len(images) and j - i < batch_size and images[j].shape == shape:
            j += 1
        pred = forward_full(state, spec, _padded_batch(images[i:j], geometry, dtype), mode="eval")
        out.extend(pred.data[:, 0].astype(np.float64))
        i = j
    return out


def predict_count(state: NetworkState, spec: NetworkSpec, image: np.ndarray, stride: int = 1) -> float:
    geometry = CountGeometry(spec.receptive_field, stride)
    cmap = predict_maps(state, spec, [image])[0]
    return recover_count(subsample_stride(cmap, stride), geometry)


@dataclass
class EvalResult:
    mae: float
    table: list[dict]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["index", "id", "true_count", "predicted_count", "abs_error"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(self.table)
        if path is not None:
            atomic_write_bytes(path, buf.getvalue().encode())
        return buf.getvalue()


def mae_from_counts(predicted, true) -> EvalResult:
    pred = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError("predicted and true counts differ in length")
    err = np.abs(pred - true)
    table = [{"index": i, "id": str(i), "true_count": float(t), "predicted_count": float(p), "abs_error": float(e)}
             for i, (t, p, e) in enumerate(zip(true, pred, err))]
    return EvalResult(mae=float(err.mean()) if len(err) else 0.0, table=table)


def evaluate_mae(model, images, annotations, geometry: CountGeometry, ids=None) -> EvalResult:
    """Mean over images of ``|recover_count(map) - true count|``.

    ``model`` maps a list of images to a list of stride-1 count maps; a
    ``(spec, state)`` pair is accepted as shorthand for the network. Maps are
    subsampled by ``geometry.s`` before recovery.
    """
    if isinstance(model, tuple):
        spec, state = model
        maps = predict_maps(state, spec, images)
    else:
        maps = model(list(images))
    preds = [recover_count(subsample_stride(m, geometry.s), geometry) for m in maps]
    res = mae_from_counts(preds, [a.count for a in annotations])
    if ids is not None:
        for row, ident in zip(res.table, ids):
            row["id"] = ident
    return res


def oracle_model(annotations, r: int) -> Callable:
    """A 'model' that returns the exact target maps; for harness checks."""
    geometry = CountGeometry(r)
    targets = [build_target(a, geometry) for a in annotations]
    return lambda images: [t.astype(np.float64) for t in targets[: len(images)]]


# ------------------------------------------------------------------------ training


def _snapshot_bn(bn: dict[str, BatchNormParams]):
    return {k: (b.running_mean.copy(), b.running_var.copy(), b.num_batches_tracked) for k, b in bn.items()}


def _restore_bn(bn: dict[str, BatchNormParams], snap) -> None:
    for k, (m, v, n) in snap.items():
        bn[k].running_mean, bn[k].running_var, bn[k].num_batches_tracked = m, v, n


def calibrate_head(spec: NetworkSpec, state: NetworkState, targets: np.ndarray) -> None:
    """Set the output layer's batchnorm shift/scale to the target mean/std.

    The head output is ``leaky(gamma * z + beta)`` with ``z`` standardized, so
    this makes the untrained network's maps match the targets in first and
    second moment. Without it Adam spends hundreds of steps walking ``beta``
    up from zero.
    """
    head = state.bn[f"{spec.convs()[-1].name}.bn"]
    dt = head.beta.dtype
    head.beta.data = np.full_like(head.beta.data, float(targets.mean()), dtype=dt)
    head.gamma.data = np.full_like(head.gamma.data, max(float(targets.std()), 1e-3), dtype=dt)


def recalibrate_bn(spec: NetworkSpec, state: NetworkState, padded: np.ndarray, batch_size: int) -> None:
    """Replace every BN running estimate by the average over training batches.

    Uses the current weights, so eval-mode statistics no longer lag behind
    parameters that moved during the epoch. Batches are taken in index order.
    """
    bns = list(state.bn.values())
    saved = [(b.momentum, b.num_batches_tracked) for b in bns]
    try:
        for j, start in enumerate(range(0, len(padded), batch_size), start=1):
            for b in bns:
                b.momentum = 1.0 / j  # cumulative average of the per-batch statistics
            forward_full(state, spec, padded[start:start + batch_size], mode="train")
    finally:
        for b, (m, n) in zip(bns, saved):
            b.momentum, b.num_batches_tracked = m, n


def train(train_set: CountingDataset, val_set: CountingDataset, spec: NetworkSpec, state: NetworkState,
          config: TrainConfig, checkpoint_path=None, progress: Callable[[EpochRecord], None] | None = None,
          ) -> tuple[NetworkState, TrainLog]:
    """Adam on the batch L1 map loss; returns the snapshot with the lowest validation MAE.

    ``state`` is updated in place and ends as the last-epoch state. Validation
    uses stride-1 recovery. When ``checkpoint_path`` is given the best state is
    written there (atomically) every time it improves.
    """
    r = spec.receptive_field
    config.check_geometry(r)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be nonempty")
    for ds in (train_set, val_set):
        if ds.channels != spec.in_channels:
            raise ValueError(f"{ds.name}: {ds.channels} channel(s), network expects {spec.in_channels}")
    shapes = {img.shape for img in train_set.images}
    if len(shapes) > 1:
        raise ValueError(f"training images differ in size {sorted(shapes)}; center-crop them first")

    geometry = CountGeometry(r)
    params = state.trainable()
    dtype = next(iter(params.values())).dtype
    padded = _padded_batch(train_set.images, geometry, dtype)
    targets = np.stack([build_target(a, geometry) for a in train_set.annotations])[:, None].astype(dtype)
    n = len(train_set)

    # learning rate 0 is a pure diagnostic run: nothing in the state may move
    frozen = config.freeze_bn_stats or config.learning_rate == 0
    if config.calibrate_head and not frozen:
        calibrate_head(spec, state, targets)
    adam = AdamState.for_params(params, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    trace = TrainLog()
    best = state.copy()

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            snap = _snapshot_bn(state.bn) if frozen else None
            state.zero_grad()
            with Tape() as tape:
                pred = forward_full(state, spec, padded[idx], mode="train")
                loss = train_loss_map(pred, targets[idx], config.stride_train)
                tape.backward(loss, retain_intermediate=False)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"loss became {value} at epoch {epoch} (batch starting at {start}); "
                    f"try a smaller learning rate than {config.learning_rate}"
                )
            total += value
            if snap is not None:
                _restore_bn(state.bn, snap)
            if config.learning_rate > 0:
                adam_step(params, {k: p.grad for k, p in params.items()}, adam)
        if not state.all_finite():
            raise DivergenceError(f"non-finite parameters after epoch {epoch}")

        val = None
        if epoch % config.eval_every == 0 or epoch == config.max_epochs:
            if config.recalibrate_bn and not frozen:
                recalibrate_bn(spec, state, padded, config.batch_size)
            val = evaluate_mae((spec, state), val_set.images, val_set.annotations, geometry).mae
        rec = EpochRecord(epoch, total / n, val, time.perf_counter() - t0)
        if trace.append(rec):
            best = state.copy()
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, spec, best, adam=adam,
                                meta={"epoch": epoch, "val_mae": val, "train_config": config.to_dict()})
        if progress is not None:
            progress(rec)
        log.debug("epoch %d loss %.4f val_mae %s", epoch, rec.loss, val)
        if val is not None and config.stop_below is not None and val < config.stop_below:
            log.info("validation MAE %.4f below %g at epoch %d, stopping", val, config.stop_below, epoch)
            break
    state.zero_grad()
    best.zero_grad()
    return best, trace


# --------------------------------------------------------------------- checkpoints


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    spec: NetworkSpec
    state: NetworkState
    adam: AdamState | None
    meta: dict


def save_checkpoint(path, spec: NetworkSpec, state: NetworkState, adam: AdamState | None = None,
                    meta: dict | None = None) -> None:
    """One ``.npz`` with parameters, batchnorm statistics, Adam moments and a JSON header."""
    arrays: dict[str, np.ndarray] = {}
    for k, t in state.params.items():
        arrays[f"param/{k}"] = t.data
    bn_meta = {}
    for k, b in state.bn.items():
        arrays[f"bn/{k}/gamma"] = b.gamma.data
        arrays[f"bn/{k}/beta"] = b.beta.data
        arrays[f"bn/{k}/running_mean"] = b.running_mean
        arrays[f"bn/{k}/running_var"] = b.running_var
        bn_meta[k] = {"momentum": b.momentum, "eps": b.eps, "num_batches_tracked": b.num_batches_tracked}
    header = {"spec": spec.to_dict(), "bn": bn_meta, "meta": meta or {}}
    if adam is not None:
        header["adam"] = {k: getattr(adam, k) for k in ("learning_rate", "beta1", "beta2", "epsilon", "step")}
        for k in adam.m:
            arrays[f"adam_m/{k}"] = adam.m[k]
            arrays[f"adam_v/{k}"] = adam.v[k]
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(z["header"].tobytes().decode())
        spec = NetworkSpec.from_dict(header["spec"])
        state = NetworkState()
        for key in z.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                state.params[name] = Tensor(z[key], requires_grad=True, name=name)
        for name, bm in header["bn"].items():
            state.bn[name] = BatchNormParams(
                gamma=Tensor(z[f"bn/{name}/gamma"], requires_grad=True, name=f"{name}.gamma"),
                beta=Tensor(z[f"bn/{name}/beta"], requires_grad=True, name=f"{name}.beta"),
                running_mean=z[f"bn/{name}/running_mean"],
                running_var=z[f"bn/{name}/running_var"],
                momentum=bm["momentum"], eps=bm["eps"], num_batches_tracked=bm["num_batches_tracked"],
            )
        adam = None
        if "adam" in header:
            adam = AdamState(**header["adam"])
            for key in z.files:
                if key.startswith("adam_m/"):
                    name = key[len("adam_m/"):]
                    adam.m[name] = z[key]
                    adam.v[name] = z[f"adam_v/{name}"]
    expected = set(spec.param_shapes())
    got = set(state.params) | {f"{k}.{p}" for k in state.bn for p in ("gamma", "beta")}
    if expected != got:
        raise ValueError(f"checkpoint {path} does not match its network description")
    return Checkpoint(spec=spec, state=state, adam=adam, meta=header["meta"])
