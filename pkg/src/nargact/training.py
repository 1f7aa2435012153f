"""The three training sessions, early stopping, snapshots and matched baselines."""

from __future__ import annotations

import hashlib
import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .analysis import mass_mask
from .config import RunConfig
from .datasets import LabeledSet
from .formats import Checkpoint, GridFile, MetricLog
from .inner import InnerNet, TargetMap, eval_on_grid, make_target_map, preact_tuples, pretrain_inner
from .outer import OuterNet, OuterSpec, match_baseline

log = logging.getLogger(__name__)


class FrozenParameterError(RuntimeError):
    """A parameter that must stay frozen changed."""


class ArityMismatchError(ValueError):
    pass


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from the run seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.PCG64(ss))


def params_digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def inner_digest(inner: InnerNet) -> str:
    return params_digest(p.data for p in inner.parameters())


class EarlyStopper:
    """Tracks the lowest validation loss; ties keep the earlier epoch."""

    def __init__(self, patience: int = 20):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            return True, False
        return False, epoch - self.best_epoch >= self.patience


# ---------------------------------------------------------------------------
# checkpoint helpers


def inner_arrays(inner: InnerNet) -> dict[str, np.ndarray]:
    return {f"inner.{k}": v for k, v in inner.state_dict().items()}


def outer_arrays(net: OuterNet) -> dict[str, np.ndarray]:
    return {f"outer.{k}": p.data.copy() for k, p in net.named_outer_parameters().items()}


def optimizer_arrays(names: list[str], state: ad.AdamState) -> dict[str, np.ndarray]:
    out = {f"adam.m.{n}": m.copy() for n, m in zip(names, state.m)}
    out.update({f"adam.v.{n}": v.copy() for n, v in zip(names, state.v)})
    return out


def inner_from_checkpoint(ckpt: Checkpoint) -> InnerNet:
    state = ckpt.prefixed("inner.")
    if "w1" not in state:
        raise ValueError("checkpoint holds no inner-net parameters")
    net = InnerNet(int(state["w1"].shape[0]))
    net.load_state_dict(state)
    return net


def load_outer_state(net: OuterNet, ckpt: Checkpoint) -> None:
    state = ckpt.prefixed("outer.")
    for k, p in net.named_outer_parameters().items():
        p.data[...] = state[k]


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


# ---------------------------------------------------------------------------
# session I


@dataclass
class Session1Result:
    inner: InnerNet
    target: TargetMap
    rmse: float
    checkpoint: Checkpoint


def run_session1(cfg: RunConfig) -> Session1Result:
    """Pretrain a fresh Xavier inner net on a seeded random target map."""
    seed = cfg["run.seed"]
    n = cfg["model.arity"]
    tmap = make_target_map(n, seed, cfg["session1.resolution"], cfg["session1.sigma"], cfg["session1.half_width"])
    inner = InnerNet(n, stream(seed, "session1-init"))
    sample_rng = stream(seed, "session1-sample")
    rmse = pretrain_inner(inner, tmap, cfg["session1.steps"], cfg["session1.batch"], cfg["session1.lr"], sample_rng)
    ckpt = Checkpoint(
        cfg.run_id(), "session1", 0, cfg.digest(), inner_arrays(inner),
        {"rmse": rmse, "arity": n, "rng": rng_state(sample_rng)},
    )
    return Session1Result(inner, tmap, rmse, ckpt)


# ---------------------------------------------------------------------------
# shared epoch loop


@dataclass
class TrainResult:
    net: OuterNet
    log: MetricLog
    best_epoch: int
    stopped_epoch: int
    checkpoint: Checkpoint
    first_batch: np.ndarray
    snapshots: list = field(default_factory=list)
    inner_digests: list = field(default_factory=list)


def evaluate(net: OuterNet, data: LabeledSet, batch_size: int = 250, taps: list | None = None):
    """(mean cross-entropy, accuracy) in inference mode."""
    total, correct = 0.0, 0
    prev = net.taps
    net.taps = taps
    batch_size = net.safe_batch(batch_size)
    try:
        with ad.no_grad():
            for i in range(0, len(data), batch_size):
                x, y = data.images[i : i + batch_size], data.labels[i : i + batch_size]
                logits = net.forward(x, training=False)
                total += ad.softmax_cross_entropy(logits, y).item() * len(y)
                correct += int((logits.data.argmax(axis=1) == y).sum())
    finally:
        net.taps = prev
    return total / len(data), correct / len(data)


def snapshot_bounds(tuples: np.ndarray, mass: float = 0.99) -> list[tuple[float, float]]:
    """Box around the high-mass part of the activation inputs."""
    if tuples.shape[1] == 2:
        return list(mass_mask(tuples, mass).bbox)
    tail = (1.0 - mass) / 2.0
    lo = np.quantile(tuples, tail, axis=0)
    hi = np.quantile(tuples, 1.0 - tail, axis=0)
    return [(float(a), float(b)) for a, b in zip(lo, hi)]


def train_epochs(net: OuterNet, params: list[ad.Tensor], train: LabeledSet, val: LabeledSet, test: LabeledSet,
                 cfg: RunConfig, session: str, max_epochs: int, early_stop: bool, patience: int,
                 snapshot_dir: Path | None = None, frozen_inner: bool = False,
                 epoch_hook: Callable | None = None) -> TrainResult:
    seed = cfg["run.seed"]
    data_rng = stream(seed, "data-order")
    drop_rng = stream(seed, f"{session}-dropout")
    names = [f"p{i}" for i in range(len(params))]
    opt = ad.Adam(params, cfg["optim.lr"], cfg["optim.beta1"], cfg["optim.beta2"], cfg["optim.eps"])
    bs = cfg["optim.batch_size"]
    micro = net.safe_batch(bs)
    stopper = EarlyStopper(patience)
    mlog = MetricLog()
    best_state = [p.data.copy() for p in params]
    first_batch = None
    snapshots, digests = [], []
    inner = net.inner
    if frozen_inner:
        digests.append(inner_digest(inner))
    res_snap = cfg["session2.snapshot_resolution"]
    every = cfg["session2.snapshot_every"]
    stopped = 0
    for epoch in range(1, max_epochs + 1):
        t0 = time.perf_counter()
        net.train()
        order = data_rng.permutation(len(train))
        if first_batch is None:
            first_batch = order[:bs].copy()
        loss_sum, correct = 0.0, 0
        for i in range(0, len(order), bs):
            idx = order[i : i + bs]
            opt.zero_grad()
            # micro-batches keep conv activations in memory; the summed
            # gradient equals the full-batch one since every op is per-example
            for j in range(0, len(idx), micro):
                sub = idx[j : j + micro]
                x, y = train.images[sub], train.labels[sub]
                logits = net.forward(x, rng=drop_rng, training=True)
                loss = ad.softmax_cross_entropy(logits, y)
                if len(sub) < len(idx):
                    ad.backward(loss * (len(sub) / len(idx)))
                else:
                    loss.backward()
                loss_sum += loss.item() * len(sub)
                correct += int((logits.data.argmax(axis=1) == y).sum())
            opt.step()
        taps = [] if snapshot_dir is not None and inner is not None else None
        val_loss, val_acc = evaluate(net, val, taps=taps)
        _, test_acc = evaluate(net, test)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / len(train),
            "train_acc": correct / len(train),
            "val_loss": val_loss,
            "val_acc": val_acc,
            "test_acc": test_acc,
        }
        mlog.append(row, time.perf_counter() - t0)
        log.info("%s epoch %d: %s", session, epoch, {k: round(v, 4) for k, v in row.items()})
        if taps is not None and epoch % every == 0:
            tuples = np.concatenate([preact_tuples(z, inner.arity) for z in taps])
            bounds = snapshot_bounds(tuples)
            res = res_snap if inner.arity <= 2 else max(2, res_snap // 5)
            grid = GridFile.from_bounds(bounds, eval_on_grid(inner, bounds, res))
            path = Path(snapshot_dir) / f"epoch_{epoch:04d}.grid"
            grid.write(path)
            snapshots.append(path)
        if frozen_inner:
            d = inner_digest(inner)
            digests.append(d)
            if d != digests[0]:
                raise FrozenParameterError(f"{session}: frozen inner parameters changed during epoch {epoch}")
        if epoch_hook is not None:
            epoch_hook(epoch, net)
            if frozen_inner and inner_digest(inner) != digests[0]:
                raise FrozenParameterError(f"{session}: frozen inner parameters changed after epoch {epoch}")
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = [p.data.copy() for p in params]
        stopped = epoch
        if early_stop and stop:
            log.info("%s: early stop at epoch %d (best %d)", session, epoch, stopper.best_epoch)
            break
    for p, b in zip(params, best_state):
        p.data[...] = b
    arrays = {}
    if inner is not None:
        arrays.update(inner_arrays(inner))
    arrays.update(outer_arrays(net))
    arrays.update(optimizer_arrays(names, opt.state))
    meta = {
        "best_epoch": stopper.best_epoch,
        "best_val_loss": float(stopper.best_loss),
        "stopped_epoch": stopped,
        "adam_t": opt.state.t,
        "spec": spec_to_dict(net.spec),
        "rng": {"data": rng_state(data_rng), "dropout": rng_state(drop_rng)},
    }
    ckpt = Checkpoint(cfg.run_id(), session, stopper.best_epoch, cfg.digest(), arrays, meta)
    return TrainResult(net, mlog, stopper.best_epoch, stopped, ckpt, first_batch, snapshots, digests)



def spec_to_dict(spec: OuterSpec) -> dict:
    return {
        "kind": spec.kind,
        "input_shape": list(spec.input_shape),
        "classes": spec.classes,
        "widths": list(spec.widths),
        "arity": spec.arity,
        "activation": spec.activation,
        "dropout": spec.dropout,
        "layer_norm": spec.layer_norm,
    }


def spec_from_dict(d: dict) -> OuterSpec:
    return OuterSpec(
        kind=d["kind"], input_shape=tuple(d["input_shape"]), classes=d["classes"], widths=tuple(d["widths"]),
        arity=d["arity"], activation=d["activation"], dropout=d["dropout"], layer_norm=d["layer_norm"],
    )


def net_from_checkpoint(ckpt: Checkpoint) -> OuterNet:
    spec = spec_from_dict(ckpt.meta["spec"])
    inner = inner_from_checkpoint(ckpt) if spec.activation == "inner" else None
    net = OuterNet.build(spec, ad.make_rng(0), inner)
    load_outer_state(net, ckpt)
    return net.eval()


# ---------------------------------------------------------------------------
# sessions II and III


def _input_shape(data: LabeledSet, cfg: RunConfig):
    shape = data.images.shape[1:]
    return shape if cfg["model.kind"] == "conv" else (int(np.prod(shape)),)


def run_session2(cfg: RunConfig, inner_ckpt: Checkpoint, train: LabeledSet, val: LabeledSet, test: LabeledSet,
                 snapshot_dir=None) -> TrainResult:
    """Jointly train the pretrained inner net and a fresh outer net."""
    inner = inner_from_checkpoint(inner_ckpt)
    if inner.arity != cfg["model.arity"]:
        raise ArityMismatchError(f"inner checkpoint arity {inner.arity} != configured arity {cfg['model.arity']}")
    spec = cfg.outer_spec(_input_shape(train, cfg), classes=10)
    net = OuterNet.build(spec, stream(cfg["run.seed"], "session2-init"), inner)
    return train_epochs(
        net, net.parameters(), train, val, test, cfg, "session2",
        cfg["session2.max_epochs"], cfg["session2.early_stop"], cfg["session2.patience"], snapshot_dir,
    )


def run_session3(cfg: RunConfig, frozen_ckpt: Checkpoint, train: LabeledSet, val: LabeledSet, test: LabeledSet,
                 epoch_hook=None) -> TrainResult:
    """Re-initialize the outer net and train it against the frozen inner net."""
    inner = inner_from_checkpoint(frozen_ckpt)
    if inner.arity != cfg["model.arity"]:
        raise ArityMismatchError(f"inner checkpoint arity {inner.arity} != configured arity {cfg['model.arity']}")
    inner.set_trainable(False)
    spec = cfg.outer_spec(_input_shape(train, cfg), classes=10)
    net = OuterNet.build(spec, stream(cfg["run.seed"], "session3-init"), inner)
    return train_epochs(
        net, net.outer_parameters(), train, val, test, cfg, "session3",
        cfg["session3.max_epochs"], cfg["session3.early_stop"], cfg["session3.patience"],
        frozen_inner=True, epoch_hook=epoch_hook,
    )


def train_plain(cfg: RunConfig, spec: OuterSpec, train, val, test, session: str = "baseline-relu") -> TrainResult:
    net = OuterNet.build(spec, stream(cfg["run.seed"], "session2-init"), None)
    return train_epochs(
        net, net.parameters(), train, val, test, cfg, session,
        cfg["session2.max_epochs"], cfg["session2.early_stop"], cfg["session2.patience"],
    )


@dataclass
class BaselineResults:
    relu: TrainResult
    one_arg: TrainResult
    one_arg_pretrain: Session1Result
    relu_beta: int
    param_counts: dict


def run_baselines(cfg: RunConfig, train, val, test) -> BaselineResults:
    """Train the parameter-matched ReLU net and the 1-argument inner-net net."""
    spec = cfg.outer_spec(_input_shape(train, cfg), classes=10)
    if spec.activation != "inner":
        spec = replace(spec, activation="inner")
    match = match_baseline(spec)
    relu = train_plain(cfg, match.spec, train, val, test)
    cfg1 = cfg.copy()
    cfg1.set("model.arity", 1)
    cfg1.set("model.activation", "inner")
    s1 = run_session1(cfg1)
    one = run_session2(cfg1, s1.checkpoint, train, val, test)
    counts = {
        "proposed": match.proposed_params,
        "relu": relu.net.num_params(),
        "one_arg": one.net.num_params(),
    }
    return BaselineResults(relu, one, s1, match.beta, counts)


def aligned_logs(logs: dict[str, MetricLog]) -> tuple[list[str], list[list]]:
    """One row per epoch with every run's columns side by side (blank when absent)."""
    names = list(logs)
    header = ["epoch"] + [f"{n}.{c}" for n in names for c in ("train_loss", "val_loss", "val_acc", "test_acc")]
    epochs = sorted({r["epoch"] for lg in logs.values() for r in lg.rows})
    rows = []
    for e in epochs:
        row = [e]
        for n in names:
            match = [r for r in logs[n].rows if r["epoch"] == e]
            if match:
                r = match[0]
                row.extend([r["train_loss"], r["val_loss"], r["val_acc"], r["test_acc"]])
            else:
                row.extend([""] * 4)
        rows.append(row)
    return header, rows
