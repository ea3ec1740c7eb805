"""Training and clean-vs-contaminated evaluation loops."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import DivergenceError, FrozenError
from ..graph import AdjacencyState, spectral_report
from ..layer import (
    ExpertSet,
    MoELayer,
    RoutingMode,
    SGDMomentum,
    cross_entropy_loss,
    load_balance_report,
    mse_loss,
    save_checkpoint,
)
from ..router import RouterParams
from .contamination import contaminate
from .io import METRICS_COLUMNS, TRAINING_COLUMNS, write_csv
from .manifest import RunManifest
from .tasks import Split, SyntheticTask, TaskKind, generate_task


def build_layer(manifest: RunManifest, task: SyntheticTask) -> MoELayer:
    """Initialize a layer from the manifest seed; Baseline and Symphony runs with equal seeds share init."""
    rng = np.random.default_rng(np.random.SeedSequence([int(manifest.seed), 1]))
    p = task.params
    experts = ExpertSet.init(manifest.n_experts, p.dim, manifest.hidden, p.out_dim, rng)
    router = RouterParams.init(manifest.router_kind, manifest.n_experts, p.dim, rng, scale=manifest.router_init_scale)
    adjacency = None
    if manifest.mode is RoutingMode.SYMPHONY:
        adjacency = AdjacencyState(manifest.n_experts, beta=manifest.beta, norm_mode=manifest.norm_mode)
    return MoELayer(experts, router, manifest.k, manifest.mode, adjacency, manifest.renormalize, manifest.aux_weight)


def task_loss(task: SyntheticTask, y, target):
    if task.params.kind is TaskKind.REGION_CLASSIFICATION:
        return cross_entropy_loss(y, target)
    return mse_loss(y, target)


def split_loss(layer: MoELayer, task: SyntheticTask, split: Split, x=None) -> float:
    out = layer.forward(split.x if x is None else x)
    return task_loss(task, out.y, split.y)[0]


def layer_rho(layer: MoELayer) -> float:
    # Baseline routing is symphony routing with A = I, whose rho is 1.
    if layer.adjacency is None or layer.adjacency.bootstrapping:
        return 1.0
    return spectral_report(layer.adjacency.A, layer.adjacency.norm_mode).rho


@dataclass
class TrainResult:
    layer: MoELayer
    task: SyntheticTask
    curve: list[dict]
    initial_train_loss: float
    final_train_loss: float
    snapshots: list[Path] = field(default_factory=list)


def _dump_divergence(out_dir: Optional[Path], layer: MoELayer, xb, yb, epoch, step) -> Optional[Path]:
    if out_dir is None:
        return None
    d = Path(out_dir) / "diagnostics"
    d.mkdir(parents=True, exist_ok=True)
    np.savetxt(d / "last_batch_x.txt", xb)
    np.savetxt(d / "last_batch_y.txt", np.atleast_2d(yb))
    if layer.adjacency is not None:
        layer.adjacency.save(d / "adjacency.txt")
    (d / "where.txt").write_text(f"epoch {epoch} step {step}\n")
    return d


def train(manifest: RunManifest, out_dir=None, task: Optional[SyntheticTask] = None,
          snapshots: bool = True) -> TrainResult:
    """Minibatch SGD over the train split; adjacency EMA once per batch in symphony mode.

    With ``out_dir`` set, writes ``training.csv``, one adjacency snapshot per
    epoch (symphony only) and a ``model/`` checkpoint.
    """
    manifest.validate()
    task = task or generate_task(manifest.task, manifest.task_seed)
    layer = build_layer(manifest, task)
    opt = SGDMomentum(manifest.optimizer.lr, manifest.optimizer.momentum, manifest.optimizer.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([int(manifest.seed), 2]))
    out_dir = None if out_dir is None else Path(out_dir)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    run_hash = manifest.digest()
    symphony = layer.mode is RoutingMode.SYMPHONY

    train_split = task.train
    n = train_split.x.shape[0]
    bs = manifest.optimizer.batch_size
    initial = split_loss(layer, task, train_split)
    curve, snaps = [], []
    for epoch in range(1, manifest.optimizer.epochs + 1):
        order = rng.permutation(n)
        t0 = time.perf_counter()
        n_batches = 0
        aux_total = 0.0
        for step, start in enumerate(range(0, n, bs)):
            sel = order[start : start + bs]
            xb, yb = train_split.x[sel], train_split.y[sel]
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected below
                out = layer.forward(xb, training=True)
                loss, dy = task_loss(task, out.y, yb)
            if not np.isfinite(loss) or not np.all(np.isfinite(out.y)):
                dump = _dump_divergence(out_dir, layer, xb, yb, epoch, step)
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}", dump)
            with np.errstate(over="ignore", invalid="ignore"):
                grads, _ = layer.backward(dy)
                opt.step(layer.parameters(), grads)
            if symphony:
                layer.adjacency.normalize_and_ema()
            aux_total += out.aux_loss
            n_batches += 1
        wall = (time.perf_counter() - t0) / max(n_batches, 1)
        train_l = split_loss(layer, task, train_split)
        if not np.isfinite(train_l):
            dump = _dump_divergence(out_dir, layer, train_split.x[:bs], train_split.y[:bs], epoch, -1)
            raise DivergenceError(f"non-finite training loss after epoch {epoch}", dump)
        valid_out = layer.forward(task.valid.x)
        curve.append(dict(
            run_hash=run_hash, epoch=epoch, train_loss=train_l,
            valid_loss=task_loss(task, valid_out.y, task.valid.y)[0],
            aux_loss=aux_total / max(n_batches, 1),
            entropy_ratio=load_balance_report(valid_out.selections, layer.n_experts).entropy_ratio,
            rho=layer_rho(layer), wall_time_per_batch=wall,
        ))
        if out_dir is not None and symphony and snapshots:
            path = out_dir / f"adjacency_epoch{epoch:03d}.txt"
            layer.adjacency.save(path)
            snaps.append(path)

    if layer.adjacency is not None:
        layer.adjacency.freeze()
    if out_dir is not None:
        write_csv(out_dir / "training.csv", TRAINING_COLUMNS, curve)
        save_checkpoint(layer, out_dir / "model", extra={"seed": manifest.seed, "task_seed": manifest.task_seed,
                                                         "run_hash": run_hash})
    return TrainResult(layer, task, curve, initial, curve[-1]["train_loss"], snaps)


def evaluate(layer: MoELayer, task: SyntheticTask, epsilon_grid: Sequence[float], seeds: Sequence[int],
             noise_kind="uniform-ball", split: str = "test", run_hash: str = "",
             epsilon_is_fraction: bool = True) -> list[dict]:
    """Loss and routing metrics on a contaminated split for every (epsilon, seed) cell.

    ``epsilon_grid`` is in units of the domain diameter unless
    ``epsilon_is_fraction`` is False. The adjacency must be frozen and its
    digest is checked to be unchanged afterwards.
    """
    if layer.adjacency is not None and not layer.adjacency.frozen:
        raise FrozenError("evaluation requires a frozen adjacency")
    before = layer.state_digest()
    data = getattr(task, split)
    rho = layer_rho(layer)
    rows = []
    for frac in epsilon_grid:
        eps = float(frac) * task.diameter if epsilon_is_fraction else float(frac)
        for seed in seeds:
            x = contaminate(data.x, eps, noise_kind, seed=np.random.SeedSequence([int(seed), 7]).generate_state(1)[0],
                            centers=task.centers)
            t0 = time.perf_counter()
            out = layer.forward(x)
            wall = time.perf_counter() - t0
            loss = task_loss(task, out.y, data.y)[0]
            lb = load_balance_report(out.selections, layer.n_experts)
            rows.append(dict(
                run_hash=run_hash, mode=layer.mode.value, split=split, epsilon=eps,
                epsilon_frac=float(frac) if epsilon_is_fraction else eps / task.diameter, seed=int(seed),
                loss=loss, entropy_ratio=lb.entropy_ratio, cv=lb.cv, frequency=lb.frequency.tolist(),
                rho=rho, wall_time_per_batch=wall,
            ))
    if layer.state_digest() != before:
        raise FrozenError("adjacency changed during evaluation")
    return rows


def write_metrics(path, rows) -> Path:
    return write_csv(path, METRICS_COLUMNS, rows)
