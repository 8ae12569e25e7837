"""Three-phase training: QAT warmup, alternating gate/weight search, fine-tune.

Phases:

1. warmup: the network trains normally with everything fake-quantized at
   the maximum supported precision; gate logits stay frozen. The result
   is reusable across searches with different regularization strengths.
2. search: within each epoch, the first ~20% of the shuffled batches
   update only the gate logits on task loss + lambda * regularizer; the
   remaining batches update only weights and clips on task loss. The
   softmax temperature is annealed once at the end of every epoch, and a
   validation-loss early stop ends the phase.
3. fine-tune: gates are discretized (argmax) and frozen; only weights and
   clips train. Reported metrics come from the discretized model.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .cost import CostLUT, LayerCostContext, exact_model_energy, exact_model_size, total_reg
from .data import Dataset
from .errors import ConfigError, DivergenceError
from .fileio import atomic_write_bytes, load_npz, save_npz
from .gates import GateState, PrecisionAssignment, PrecisionSet
from .model import LayerSpec, Network
from .optim import SGD, Adam
from .tensor import Tensor, cross_entropy_logits, mse_loss

CURVE_COLUMNS = ["epoch", "task_loss", "reg", "total", "val_score", "tau"]


@dataclass
class TrainConfig:
    epochs_warmup: int = 20
    epochs_finetune: int = 10
    max_search_epochs: int = 60
    batch_size: int = 32
    lambda_reg: float = 0.0
    reg_mode: str = "size"
    lr_w: float = 0.01
    lr_theta: float = 0.01
    lr_clip: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    patience: int = 10
    gate_split: float = 0.2
    val_fraction: float = 0.1
    loss: str = "ce"
    tau_init: float = 5.0
    anneal_rate: float = 0.0045

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_reg}")
        if not 0.0 < self.gate_split < 1.0:
            raise ConfigError(f"gate split must be in (0, 1), got {self.gate_split}")
        if self.reg_mode not in ("size", "energy"):
            raise ConfigError(f"reg_mode must be size|energy, got {self.reg_mode!r}")
        if self.loss not in ("ce", "mse"):
            raise ConfigError(f"loss must be ce|mse, got {self.loss!r}")


@dataclass
class LossBreakdown:
    task: float
    reg: float
    total: float

    @classmethod
    def of(cls, task: float, reg: float, lam: float) -> "LossBreakdown":
        return cls(task=task, reg=reg, total=task + lam * reg)


@dataclass
class SearchResult:
    lambda_reg: float
    assignment: PrecisionAssignment
    val_score: float
    size_bits: int
    energy_uj: float | None
    curves: list[dict] = field(default_factory=list)
    search_epochs: int = 0


def _task_loss(logits: Tensor, y: np.ndarray, kind: str) -> Tensor:
    if kind == "ce":
        return cross_entropy_logits(logits, y)
    k = logits.data.shape[1]
    return mse_loss(logits, np.eye(k)[y])


def _check_finite(loss: Tensor, where: str):
    val = float(loss.data)
    if not np.isfinite(val):
        raise DivergenceError(f"non-finite loss ({val}) during {where}")


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
             *, gates: GateState | None = None,
             assignment: PrecisionAssignment | None = None) -> tuple[float, float]:
    """(task loss, score) on one split; score is accuracy for ce, -mse else."""
    if gates is not None:
        logits = net.forward_search(x, gates, cfg.reg_mode)
    elif assignment is not None:
        logits = net.forward_fixed(x, assignment)
    else:
        logits = net.forward_float(x)
    loss = float(_task_loss(logits, y, cfg.loss).data)
    if cfg.loss == "ce":
        score = float((logits.data.argmax(axis=1) == y).mean())
    else:
        score = -loss
    return loss, score


def warmup(net: Network, data: Dataset, cfg: TrainConfig,
           rng: np.random.Generator | None = None, p_max: int = 8) -> list[dict]:
    """Train W and clips with everything quantized at p_max; gates untouched."""
    rng = rng or np.random.default_rng(cfg.seed)
    opt_w = SGD(net.weight_params(), cfg.lr_w, cfg.momentum)
    opt_clip = SGD(net.clip_params(), cfg.lr_clip)
    uniform = net.uniform_assignment(p_max)
    curves = []
    for epoch in range(cfg.epochs_warmup):
        for bi, idx in enumerate(_batch_indices(len(data.x_train), cfg.batch_size, rng)):
            opt_w.zero_grad()
            opt_clip.zero_grad()
            logits = net.forward_fixed(data.x_train[idx], uniform)
            loss = _task_loss(logits, data.y_train[idx], cfg.loss)
            _check_finite(loss, f"warmup epoch {epoch} batch {bi}")
            loss.backward()
            opt_w.step()
            opt_clip.step()
            net.project_clips()
        val_loss, val_score = evaluate(net, data.x_val, data.y_val, cfg, assignment=uniform)
        curves.append({"epoch": epoch, "task_loss": val_loss, "reg": 0.0,
                       "total": val_loss, "val_score": val_score, "tau": cfg.tau_init})
    return curves


def search_epoch(net: Network, gates: GateState, data: Dataset, cfg: TrainConfig,
                 opt_w: SGD, opt_clip: SGD, opt_theta: Adam,
                 lut: CostLUT | None, rng: np.random.Generator,
                 epoch: int = 0, on_batch=None) -> LossBreakdown:
    """One alternating epoch; anneals tau once at the end.

    The gate phase covers round(gate_split * n_batches) batches of the
    epoch's fresh shuffle; the remainder trains weights and clips.
    """
    batches = _batch_indices(len(data.x_train), cfg.batch_size, rng)
    n_gate = int(round(cfg.gate_split * len(batches)))
    task_sum = 0.0
    for bi, idx in enumerate(batches):
        gate_phase = bi < n_gate
        opt_w.zero_grad()
        opt_clip.zero_grad()
        opt_theta.zero_grad()
        logits = net.forward_search(data.x_train[idx], gates, cfg.reg_mode)
        task = _task_loss(logits, data.y_train[idx], cfg.loss)
        if gate_phase:
            loss = task + total_reg(net, gates, cfg.reg_mode, lut) * cfg.lambda_reg
            _check_finite(loss, f"search epoch {epoch} gate batch {bi}")
            loss.backward()
            opt_theta.step()
        else:
            _check_finite(task, f"search epoch {epoch} weight batch {bi}")
            task.backward()
            opt_w.step()
            opt_clip.step()
            net.project_clips()
        task_sum += float(task.data)
        if on_batch is not None:
            on_batch("gate" if gate_phase else "weight", bi)
    reg_value = float(total_reg(net, gates, cfg.reg_mode, lut).data)
    gates.anneal(cfg.anneal_rate)
    return LossBreakdown.of(task_sum / len(batches), reg_value, cfg.lambda_reg)


def early_stop(history: list[float], patience: int = 10) -> bool:
    """True when the last `patience` values show no improvement over the best before."""
    if len(history) < patience + 1:
        return False
    best = min(history[:-patience])
    return min(history[-patience:]) >= best


def finetune(net: Network, assignment: PrecisionAssignment, data: Dataset,
             cfg: TrainConfig, rng: np.random.Generator | None = None) -> list[dict]:
    """Weight/clip training on the frozen, discretized assignment."""
    rng = rng or np.random.default_rng(cfg.seed + 1)
    opt_w = SGD(net.weight_params(), cfg.lr_w, cfg.momentum)
    opt_clip = SGD(net.clip_params(), cfg.lr_clip)
    curves = []
    for epoch in range(cfg.epochs_finetune):
        for bi, idx in enumerate(_batch_indices(len(data.x_train), cfg.batch_size, rng)):
            opt_w.zero_grad()
            opt_clip.zero_grad()
            logits = net.forward_fixed(data.x_train[idx], assignment)
            loss = _task_loss(logits, data.y_train[idx], cfg.loss)
            _check_finite(loss, f"finetune epoch {epoch} batch {bi}")
            loss.backward()
            opt_w.step()
            opt_clip.step()
            net.project_clips()
        val_loss, val_score = evaluate(net, data.x_val, data.y_val, cfg,
                                       assignment=assignment)
        curves.append({"epoch": epoch, "task_loss": val_loss, "reg": 0.0,
                       "total": val_loss, "val_score": val_score, "tau": 0.0})
    return curves


def warmup_fingerprint(layers: list[LayerSpec], input_shape: tuple,
                       data: Dataset, cfg: TrainConfig) -> str:
    """Cache key for warmup checkpoints: architecture + dataset + seed."""
    h = hashlib.sha256()
    h.update(json.dumps([asdict(s) for s in layers], sort_keys=True).encode())
    h.update(json.dumps(list(input_shape)).encode())
    h.update(np.ascontiguousarray(data.x_train).tobytes())
    h.update(np.ascontiguousarray(data.y_train).tobytes())
    h.update(json.dumps([cfg.seed, cfg.epochs_warmup, cfg.batch_size,
                         cfg.lr_w, cfg.lr_clip, cfg.momentum, cfg.loss]).encode())
    return h.hexdigest()[:16]


def run_search(layers: list[LayerSpec], input_shape: tuple, data: Dataset,
               cfg: TrainConfig, p_x: PrecisionSet, p_w: PrecisionSet,
               lut: CostLUT | None = None, tied: bool = False,
               warmup_state: dict | None = None,
               on_batch=None) -> tuple[SearchResult, dict, dict]:
    """Full pipeline for one lambda: (result, warmup_state, final_state).

    `warmup_state` lets callers share one warmup across a lambda sweep;
    when None, warmup runs here and the produced state is returned. The
    final state holds the fine-tuned weights/clips for checkpointing.
    """
    if cfg.reg_mode == "energy" and lut is None:
        raise ConfigError("energy mode requires a cost LUT")
    net = Network(layers, input_shape, seed=cfg.seed)
    streams = [np.random.default_rng(s) for s in
               np.random.SeedSequence(cfg.seed).spawn(3)]
    warmup_rng, search_rng, ft_rng = streams

    curves: list[dict] = []
    if warmup_state is None:
        warmup(net, data, cfg, rng=warmup_rng)
        warmup_state = net.state_dict()
    else:
        net.load_state(warmup_state)

    gates = GateState(net.layer_channels(), p_x, p_w, tau=cfg.tau_init, tied=tied)
    opt_w = SGD(net.weight_params(), cfg.lr_w, cfg.momentum)
    opt_clip = SGD(net.clip_params(), cfg.lr_clip)
    opt_theta = Adam(gates.parameters(include_delta=(cfg.reg_mode == "energy")),
                     cfg.lr_theta)
    history: list[float] = []
    epochs_run = 0
    for epoch in range(cfg.max_search_epochs):
        breakdown = search_epoch(net, gates, data, cfg, opt_w, opt_clip, opt_theta,
                                 lut, search_rng, epoch=epoch, on_batch=on_batch)
        val_loss, val_score = evaluate(net, data.x_val, data.y_val, cfg, gates=gates)
        curves.append({"epoch": epoch, "task_loss": breakdown.task, "reg": breakdown.reg,
                       "total": breakdown.total, "val_score": val_score,
                       "tau": gates.tau})
        history.append(val_loss)
        epochs_run = epoch + 1
        if early_stop(history, cfg.patience):
            break

    assignment = gates.discretize()
    finetune(net, assignment, data, cfg, rng=ft_rng)
    _, val_score = evaluate(net, data.x_val, data.y_val, cfg, assignment=assignment)
    size_bits = exact_model_size(layers, assignment)
    energy = None
    if lut is not None:
        contexts = {i: LayerCostContext.of(net, i) for i in net.searchable_indices()}
        energy = exact_model_energy(contexts, assignment, lut, p_x, p_w)
    result = SearchResult(lambda_reg=cfg.lambda_reg, assignment=assignment,
                          val_score=val_score, size_bits=size_bits, energy_uj=energy,
                          curves=curves, search_epochs=epochs_run)
    return result, warmup_state, net.state_dict()


def ensure_warmup_state(layers: list[LayerSpec], input_shape: tuple, data: Dataset,
                        cfg: TrainConfig, directory=None) -> dict[str, np.ndarray]:
    """Warmup once per (architecture, dataset, seed); cache as npz when a
    directory is given so a lambda sweep shares a single warmup."""
    path = None
    if directory is not None:
        key = warmup_fingerprint(layers, input_shape, data, cfg)
        path = os.path.join(os.fspath(directory), f"warmup_{key}.npz")
        if os.path.exists(path):
            return load_npz(path)
    net = Network(layers, input_shape, seed=cfg.seed)
    # same stream as run_search's in-process warmup: bit-identical results
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[0])
    warmup(net, data, cfg, rng=rng)
    state = net.state_dict()
    if path is not None:
        save_npz(state, path)
    return state


# -- persistence -----------------------------------------------------------------


def write_curves_csv(rows: list[dict], path):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CURVE_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in CURVE_COLUMNS})
    atomic_write_bytes(path, buf.getvalue().encode())


def save_checkpoint(state: dict[str, np.ndarray], path):
    """npz checkpoint; float64 arrays round-trip bit-exactly."""
    save_npz(state, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return load_npz(path)
