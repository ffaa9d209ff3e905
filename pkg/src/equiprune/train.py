"""Loss, optimizer, and the retraining / fine-tuning loop.

The objective is a weighted sum of the mean squared per-atom energy error
and the mean squared per-component force error. Forces are gradients, so
the parameter gradient of the force term is a gradient-of-gradient; the
tape supports that directly. Optimization is Adam with decoupled weight
decay, global-norm gradient clipping, an EMA shadow copy of the weights,
and plateau-based learning-rate reduction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward
from .model import AtomicSystem, ModelParams, Prediction, build_energy_graph, make_batch, predict_batch

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "loss",
    "train_loop",
    "evaluate",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    energy_weight: float = 1.0
    force_weight: float = 10.0
    lr: float = 0.005
    weight_decay: float = 1e-8
    ema_decay: float = 0.995
    clip_norm: float = 100.0
    batch_size: int = 16
    lr_patience: int = 5
    lr_factor: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.energy_weight < 0 or self.force_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("EMA decay must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainReport:
    mode: str
    losses: list[float] = field(default_factory=list)
    mae_energy: list[float] = field(default_factory=list)
    mae_force: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0
    final_params: ModelParams | None = None
    ema_params: ModelParams | None = None

    def curves_csv(self) -> str:
        lines = ["epoch,loss,mae_e_per_atom,mae_f"]
        for i, (lo, me, mf) in enumerate(zip(self.losses, self.mae_energy, self.mae_force)):
            lines.append(f"{i},{lo!r},{me!r},{mf!r}")
        return "\n".join(lines) + "\n"


def _require_labels(systems) -> None:
    for i, s in enumerate(systems):
        if s.energy is None or s.forces is None:
            raise ValueError(f"structure {i} is missing energy/force labels")


def loss(preds, refs, energy_weight: float, force_weight: float) -> float:
    """Weighted MSE: per-atom energy error over structures, per-component
    force error over all atoms."""
    preds = list(preds)
    refs = list(refs)
    _require_labels(refs)
    e_terms = []
    f_sq = 0.0
    n_comp = 0
    for p, r in zip(preds, refs):
        e_terms.append(((p.energy - r.energy) / r.n_atoms) ** 2)
        f_sq += float(((p.forces - r.forces) ** 2).sum())
        n_comp += 3 * r.n_atoms
    return energy_weight * float(np.mean(e_terms)) + force_weight * f_sq / n_comp


def _batch_loss_graph(tape: Tape, params: ModelParams, systems, config: TrainConfig):
    """Tape the training objective for one batch; returns (loss, stats, pvars)."""
    batch = make_batch(params.config, systems)
    e_struct, _, pos, _, pvars = build_energy_graph(tape, params, batch, trainable=True)
    (g_pos,) = backward(tape.reduce_sum(e_struct), [pos])
    forces = tape.scale(g_pos, -1.0)

    n_atoms = np.array(batch.sizes, dtype=np.float64)
    e_ref = tape.constant(np.array([s.energy for s in systems]))
    f_ref = tape.constant(np.concatenate([s.forces for s in systems], axis=0))
    de = tape.mul(e_struct - e_ref, tape.constant(1.0 / n_atoms))
    loss_e = tape.scale(tape.reduce_sum(tape.mul(de, de)), 1.0 / batch.n_structs)
    df = forces - f_ref
    loss_f = tape.scale(tape.reduce_sum(tape.mul(df, df)), 1.0 / (3.0 * int(n_atoms.sum())))
    total = tape.add(
        tape.scale(loss_e, config.energy_weight), tape.scale(loss_f, config.force_weight)
    )
    stats = {
        "abs_e_per_atom": np.abs((e_struct.value - e_ref.value) / n_atoms),
        "abs_f_sum": float(np.abs(df.value).sum()),
        "n_f_comp": df.value.size,
    }
    return total, stats, pvars


def _global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))


class _Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, names, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, tensors, grads, lr, weight_decay):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for name, p in tensors.items():
            g = grads[name]
            if self.m[name] is None:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.step_count)
            v_hat = self.v[name] / (1 - b2**self.step_count)
            out[name] = p - lr * m_hat / (np.sqrt(v_hat) + self.eps) - lr * weight_decay * p
        return out


def train_loop(params: ModelParams, data, config: TrainConfig, mode: str = "retrain") -> TrainReport:
    """Optimize on labeled structures; deterministic given the config seed.

    Reported per-epoch MAEs are over the training batches at the weights
    in effect when each batch was visited. The EMA shadow copy is what
    evaluation conventionally uses.
    """
    if mode not in ("retrain", "finetune"):
        raise ValueError("mode must be 'retrain' or 'finetune'")
    data = list(data)
    if not data:
        raise ValueError("training data must not be empty")
    _require_labels(data)

    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    tensors = {k: v.copy() for k, v in params.tensors.items()}
    ema = {k: v.copy() for k, v in tensors.items()}
    adam = _Adam(tensors.keys())
    report = TrainReport(mode=mode)
    lr = config.lr
    best_loss = np.inf
    stall = 0

    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        abs_e: list[float] = []
        abs_f_sum = 0.0
        n_f = 0
        n_seen = 0
        for start_i in range(0, len(data), config.batch_size):
            chunk = [data[i] for i in order[start_i : start_i + config.batch_size]]
            current = ModelParams(params.config, tensors)
            tape = Tape(dtype=params.config.dtype)
            total, stats, pvars = _batch_loss_graph(tape, current, chunk, config)
            value = float(total.value)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch)
            grad_vars = backward(total, list(pvars.values()))
            grads = {n: gv.value.copy() for n, gv in zip(pvars.keys(), grad_vars)}
            norm = _global_norm(grads)
            if norm > config.clip_norm:
                factor = config.clip_norm / norm
                grads = {n: g * factor for n, g in grads.items()}
            tensors = adam.step(tensors, grads, lr, config.weight_decay)
            d = config.ema_decay
            ema = {n: d * ema[n] + (1 - d) * tensors[n] for n in ema}
            epoch_loss += value * len(chunk)
            n_seen += len(chunk)
            abs_e.extend(stats["abs_e_per_atom"].tolist())
            abs_f_sum += stats["abs_f_sum"]
            n_f += stats["n_f_comp"]
        epoch_loss /= n_seen
        report.losses.append(epoch_loss)
        report.mae_energy.append(float(np.mean(abs_e)))
        report.mae_force.append(abs_f_sum / n_f)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            stall = 0
        else:
            stall += 1
            if stall > config.lr_patience:
                lr *= config.lr_factor
                stall = 0

    report.wall_seconds = time.perf_counter() - start
    report.final_params = ModelParams(params.config, tensors)
    report.ema_params = ModelParams(params.config, ema)
    return report


def evaluate(params: ModelParams, data, batch_size: int = 32) -> tuple[float, float]:
    """(energy MAE per atom, force MAE per component) over labeled data."""
    data = list(data)
    _require_labels(data)
    abs_e = []
    f_sum = 0.0
    n_f = 0
    for i in range(0, len(data), batch_size):
        chunk = data[i : i + batch_size]
        preds = predict_batch(params, chunk)
        for p, r in zip(preds, chunk):
            abs_e.append(abs(p.energy - r.energy) / r.n_atoms)
            f_sum += float(np.abs(p.forces - r.forces).sum())
            n_f += 3 * r.n_atoms
    return float(np.mean(abs_e)), f_sum / n_f
