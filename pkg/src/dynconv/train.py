"""Minibatch SGD training loop with momentum, LR schedules, and CSV logging.

Conventions:

* momentum update: ``v <- momentum * v + g``; ``p <- p - lr * v``.
* ``step`` schedule: ``lr = base * gamma ** (epoch // step_size)``;
  ``cosine``: ``lr = base * 0.5 * (1 + cos(pi * epoch / epochs))`` — both
  evaluated at the 0-based index of the epoch being trained.
* The metrics CSV has header ``epoch,train_loss,train_acc,val_loss,val_acc,lr``.
  Epoch 0 is an evaluation-only row taken before any update; training rows
  follow, one per completed epoch.  With ``epochs = 0`` the file contains the
  header and the initial row only.
* A non-finite training loss aborts the run: the offending epoch/step is
  recorded, rows collected so far are still written, and no further updates
  are applied.
* ``workers > 1`` opts into data parallelism: each batch is split into
  ``workers`` shards; forwards run in shard order (so batch-norm statistics
  update exactly as for sequential micro-batches), backwards run
  concurrently on independent tapes, and shard gradients merge in fixed
  shard-then-parameter order weighted by shard size.  Results are
  deterministic for a given worker count but differ across counts (batch
  normalization sees shard-sized batches).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .config import RunConfig
from .task import Dataset

CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,lr"


def lr_at(cfg: RunConfig, epoch: int) -> float:
    if cfg.schedule == "step":
        return cfg.lr * cfg.gamma ** (epoch // cfg.step_size)
    span = max(cfg.epochs, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / span))


class SGD:
    def __init__(self, params: list[ad.Parameter], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {id(p): np.zeros_like(p.value) for p in params}

    def step(self, grads: dict[ad.Parameter, np.ndarray], lr: float) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            v = self.momentum * self.velocity[id(p)] + g
            self.velocity[id(p)] = v
            p.value = p.value - lr * v


def evaluate(graph, data: Dataset, batch: int = 64) -> tuple[float, float]:
    """(mean loss, accuracy) over a dataset in inference mode."""
    total_loss, correct = 0.0, 0
    for x, y in data.batches(batch):
        logits = ad.value_of(graph.forward(x, train=False))
        total_loss += float(ad.cross_entropy(logits, y)) * len(y)
        correct += int((np.argmax(logits, axis=1) == y).sum())
    n = len(data)
    return total_loss / n, correct / n


@dataclass
class TrainResult:
    rows: list[tuple] = field(default_factory=list)
    aborted: bool = False
    abort_epoch: int | None = None
    abort_step: int | None = None
    final_train_acc: float = 0.0
    final_val_acc: float = 0.0

    def csv_text(self) -> str:
        lines = [CSV_HEADER]
        for epoch, tl, ta, vl, va, lr in self.rows:
            lines.append(
                f"{epoch},{tl:.6f},{ta:.6f},{vl:.6f},{va:.6f},{lr:.8g}"
            )
        return "\n".join(lines) + "\n"


def _batch_grads(graph, x, y, workers: int):
    """(mean loss, correct count, merged gradients) for one training batch.

    With ``workers > 1`` the batch is sharded; see the module docstring for
    the determinism contract.
    """
    pieces = [i for i in np.array_split(np.arange(len(y)), workers) if len(i)]
    losses, logits_vals, sizes = [], [], []
    for idx in pieces:
        tape = ad.Tape()
        logits = graph.forward(tape.leaf(x[idx]), train=True, tape=tape)
        losses.append(ad.cross_entropy(logits, y[idx]))
        logits_vals.append(ad.value_of(logits))
        sizes.append(len(idx))

    if len(losses) == 1:
        grad_maps = [ad.backward(losses[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(losses)) as pool:
            grad_maps = list(pool.map(ad.backward, losses))

    total = len(y)
    value = sum(float(ad.value_of(l)) * n / total for l, n in zip(losses, sizes))
    correct = sum(
        int((np.argmax(lv, axis=1) == y[idx]).sum())
        for lv, idx in zip(logits_vals, pieces)
    )
    merged: dict[ad.Parameter, np.ndarray] = {}
    for grads, n in zip(grad_maps, sizes):
        w = n / total
        for p, g in grads.items():
            merged[p] = merged[p] + w * g if p in merged else w * g
    return value, correct, merged


def train(
    graph,
    train_set: Dataset,
    val_set: Dataset,
    cfg: RunConfig,
    csv_path: str | Path | None = None,
) -> TrainResult:
    result = TrainResult()
    opt = SGD(graph.parameters(), momentum=cfg.momentum)

    def record(epoch: int, tl: float, ta: float, lr: float) -> None:
        vl, va = evaluate(graph, val_set, cfg.batch)
        result.rows.append((epoch, tl, ta, vl, va, lr))
        result.final_train_acc, result.final_val_acc = ta, va

    tl0, ta0 = evaluate(graph, train_set, cfg.batch)
    record(0, tl0, ta0, lr_at(cfg, 0))

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        order = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, epoch))
        ).permutation(len(train_set))
        loss_sum, correct, step = 0.0, 0, 0
        try:
            for x, y in train_set.batches(cfg.batch, order):
                value, batch_correct, grads = _batch_grads(graph, x, y, cfg.workers)
                if not math.isfinite(value):
                    raise T.NonFiniteError("training loss is not finite")
                opt.step(grads, lr)
                loss_sum += value * len(y)
                correct += batch_correct
                step += 1
            record(epoch + 1, loss_sum / len(train_set), correct / len(train_set), lr)
        except T.NonFiniteError:
            result.aborted = True
            result.abort_epoch, result.abort_step = epoch + 1, step
            if csv_path is not None:
                Path(csv_path).write_text(result.csv_text())
            return result

    if csv_path is not None:
        Path(csv_path).write_text(result.csv_text())
    return result


SWEEP_ARMS = ("static", "dcd", "vanilla_tau1", "vanilla_tau30")


def _arm_model(arm: str, seed: int, task_kw: dict):
    from .task import build_task_model

    common = dict(
        channels=task_kw.get("channels", 8),
        num_classes=task_kw.get("num_classes", 4),
        resolution=task_kw.get("size", 16),
        seed=seed,
    )
    if arm == "static":
        return build_task_model(kind="static", **common)
    if arm == "dcd":
        return build_task_model(kind="dcd", **common)
    if arm == "vanilla_tau1":
        return build_task_model(kind="vanilla", tau=1.0, **common)
    if arm == "vanilla_tau30":
        return build_task_model(kind="vanilla", tau=30.0, **common)
    raise ValueError(f"unknown sweep arm {arm!r}; known: {SWEEP_ARMS}")


def run_sweep(
    out_dir: str | Path,
    seeds: tuple[int, ...] = (0, 1, 2),
    arms: tuple[str, ...] = SWEEP_ARMS,
    cfg: RunConfig | None = None,
    task_kw: dict | None = None,
) -> dict[str, list[float]]:
    """Train every (arm, seed) pair on the context-gated task.

    Writes one metrics CSV per run plus ``summary.csv`` with the final
    validation accuracy of each run; returns arm -> per-seed accuracies.
    """
    from .task import make_context_gated

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg or RunConfig(epochs=20, lr=0.2, batch=32)
    task_kw = dict(task_kw or {})
    results: dict[str, list[float]] = {arm: [] for arm in arms}
    summary = ["arm,seed,final_val_acc"]
    for arm in arms:
        for seed in seeds:
            train_set, val_set = make_context_gated(seed=seed, **task_kw)
            model = _arm_model(arm, seed, task_kw)
            run_cfg = RunConfig(
                lr=cfg.lr, momentum=cfg.momentum, schedule=cfg.schedule,
                step_size=cfg.step_size, gamma=cfg.gamma, batch=cfg.batch,
                epochs=cfg.epochs, seed=seed, workers=cfg.workers,
            )
            res = train(model, train_set, val_set, run_cfg,
                        csv_path=out / f"{arm}_seed{seed}.csv")
            results[arm].append(res.final_val_acc)
            summary.append(f"{arm},{seed},{res.final_val_acc:.6f}")
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    return results
