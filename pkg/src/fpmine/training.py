"""Optimization loop, Adam, checkpoints, and the gradient-check harness.

Runs are deterministic: (seed, config) fixes the parameter init, the
batch stream, and therefore the final checkpoint bit-for-bit on one
thread. Checkpoints are written at epoch boundaries; a resumed run
replays the remaining epochs exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import SyntheticDataset, identity_split
from .encoders import EncoderConfig
from .errors import ConfigError, DataError, NumericalError
from .losses import LossWeights
from .model import Model, ModelFlags
from .numerics import GradTape, backward
from .sampling import balanced_batches

_CKPT_MAGIC = b"FPMCKPT1"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs beyond the dataset itself."""

    learning_rate: float = 0.001
    epochs: int = 45
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    flags: ModelFlags = field(default_factory=ModelFlags)
    weights: LossWeights = field(default_factory=LossWeights)
    balanced_sampling: bool = True
    val_fraction: float = 0.1
    val_every: int = 0              # epochs between validation passes; 0 = final only
    grad_clip_norm: float | None = None
    lr_decay_every: int | None = None  # optional step decay; None keeps the rate constant
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc["flags"] = ModelFlags(**doc["flags"])
        doc["weights"] = LossWeights(**doc["weights"])
        return cls(**doc)


def learnable_boundary_variant(config: TrainConfig, enabled: bool = True) -> TrainConfig:
    """Config copy with the trainable decision boundary toggled."""
    return replace(config, flags=replace(config.flags, learnable_boundary=enabled))


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, *, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    A zero gradient leaves both moments and the parameter exactly
    unchanged.
    """
    state.t += 1
    t = state.t
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / (1.0 - beta1 ** t)
        v_hat = state.v[name] / (1.0 - beta2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


@dataclass
class Checkpoint:
    """Everything needed to resume a run bit-exactly at an epoch boundary."""

    version: int
    encoder_config: EncoderConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    step: int
    epoch: int
    rng_state: dict


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: Model


def _current_lr(config: TrainConfig, epoch: int) -> float:
    if config.lr_decay_every is None or config.lr_decay_every < 1:
        return config.learning_rate
    return config.learning_rate * (config.lr_decay_factor ** (epoch // config.lr_decay_every))


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def train(dataset: SyntheticDataset, config: TrainConfig, *,
          start: Checkpoint | None = None) -> TrainResult:
    """Run (or resume) training; returns the checkpoint, log, and model.

    The log holds one JSON-ready record per step plus epoch/validation
    records. Aborts with NumericalError if the total loss goes non-finite.
    """
    from .evaluation import evaluate_retrieval  # local import: avoids a cycle

    train_idx, val_idx = identity_split(dataset, config.val_fraction, seed=config.seed)
    if train_idx.size == 0:
        raise ConfigError("empty training split")

    if start is None:
        params = None
        model = Model(dataset.config, config.flags, config.weights, params, seed=config.seed)
        state = AdamState.zeros_like(model.params)
        master = np.random.default_rng(config.seed)
        first_epoch = 0
        step = 0
    else:
        if start.encoder_config != dataset.config:
            raise ConfigError("checkpoint was trained with a different encoder config")
        model = Model(dataset.config, config.flags, config.weights,
                      {k: v.copy() for k, v in start.params.items()}, seed=config.seed)
        state = AdamState({k: v.copy() for k, v in start.adam_m.items()},
                          {k: v.copy() for k, v in start.adam_v.items()}, start.adam_t)
        master = np.random.default_rng(config.seed)
        master.bit_generator.state = start.rng_state
        first_epoch = start.epoch
        step = start.step

    log: list[dict] = []
    for epoch in range(first_epoch, config.epochs):
        epoch_seed = int(master.integers(2 ** 62))
        lr = _current_lr(config, epoch)
        for plan in balanced_batches(dataset, config.batch_size, epoch_seed,
                                     include=train_idx, balanced=config.balanced_sampling):
            tape = GradTape()
            total, report, bound = model.batch_loss(dataset, plan, tape)
            if not np.isfinite(report.total):
                raise NumericalError(
                    f"total loss became non-finite at step {step}: {report.to_json()}")
            grad_tensors = backward(total, tape)
            grads = {name: np.asarray(grad_tensors[leaf].data)
                     for name, leaf in bound.items()}
            if config.grad_clip_norm is not None:
                grads = _clip_gradients(grads, config.grad_clip_norm)
            model.params = adam_step(model.params, grads, state, lr=lr,
                                     beta1=config.beta1, beta2=config.beta2,
                                     eps=config.adam_eps)
            step += 1
            log.append({"type": "step", "step": step, "epoch": epoch, **report.to_json()})
        epoch_record = {"type": "epoch", "epoch": epoch, "step": step, "lr": lr}
        if config.flags.learnable_boundary:
            epoch_record["boundary_tau"] = float(model.params["boundary_tau"])
        log.append(epoch_record)
        run_val = (config.val_every > 0 and (epoch + 1) % config.val_every == 0
                   and val_idx.size > 0)
        if run_val:
            result = evaluate_retrieval(model, dataset, val_idx, config.flags.fusion())
            log.append({"type": "val", "epoch": epoch, "step": step,
                        "fusion": result.fusion, "r_at": result.r_at})

    checkpoint = Checkpoint(
        version=_CKPT_VERSION,
        encoder_config=dataset.config,
        train_config=config,
        params={k: v.copy() for k, v in model.params.items()},
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        adam_t=state.t,
        step=step,
        epoch=config.epochs,
        rng_state=master.bit_generator.state,
    )
    return TrainResult(checkpoint, log, model)


# ----------------------------------------------------------------- checkpoints

def _tensor_table(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    table = {}
    for prefix, group in (("param", ckpt.params), ("adam_m", ckpt.adam_m),
                          ("adam_v", ckpt.adam_v)):
        for name, arr in group.items():
            table[f"{prefix}/{name}"] = arr
    return table


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Versioned little-endian binary with a name-indexed tensor table."""
    header = {
        "version": ckpt.version,
        "encoder_config": asdict(ckpt.encoder_config),
        "train_config": ckpt.train_config.to_json(),
        "adam_t": ckpt.adam_t,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = bytearray()
    buf += _CKPT_MAGIC
    buf += struct.pack("<I", ckpt.version)
    buf += struct.pack("<Q", len(blob))
    buf += blob
    table = _tensor_table(ckpt)
    buf += struct.pack("<I", len(table))
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f8")
        nameb = name.encode("utf-8")
        buf += struct.pack("<H", len(nameb))
        buf += nameb
        buf += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<I", d)
        buf += arr.tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    off = 0

    def read(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"truncated checkpoint: {path}")
        out = blob[off:off + n]
        off += n
        return out

    if read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
        raise DataError(f"not a checkpoint file (bad magic): {path}")
    (version,) = struct.unpack("<I", read(4))
    if version != _CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", read(8))
    header = json.loads(read(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", read(4))
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2))
        name = read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", read(1))
        shape = tuple(struct.unpack("<I", read(4))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        table[name] = np.frombuffer(read(size * 8), dtype="<f8").reshape(shape).astype(np.float64)
    if off != len(blob):
        raise DataError(f"trailing bytes in checkpoint: {path}")

    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for full, arr in table.items():
        prefix, _, name = full.partition("/")
        if prefix not in groups or not name:
            raise DataError(f"unknown tensor entry {full!r} in checkpoint")
        groups[prefix][name] = arr
    rng_state = header["rng_state"]
    # JSON round-trips the PCG64 state ints losslessly (arbitrary precision)
    return Checkpoint(
        version=version,
        encoder_config=EncoderConfig(**header["encoder_config"]),
        train_config=TrainConfig.from_json(header["train_config"]),
        params=groups["param"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        adam_t=header["adam_t"],
        step=header["step"],
        epoch=header["epoch"],
        rng_state=rng_state,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    return Model(ckpt.encoder_config, ckpt.train_config.flags, ckpt.train_config.weights,
                 {k: v.copy() for k, v in ckpt.params.items()},
                 seed=ckpt.train_config.seed)


# ------------------------------------------------------------------ gradcheck

@dataclass(frozen=True)
class GradCheckReport:
    passed: bool
    tolerance: float
    max_rel_error: float
    worst_param: str
    coords_checked: int
    per_param: dict[str, float]

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "max_rel_error": self.max_rel_error,
            "worst_param": self.worst_param,
            "coords_checked": self.coords_checked,
            "per_param": self.per_param,
        }


def gradcheck(dataset: SyntheticDataset, config: TrainConfig, *, tolerance: float = 1e-5,
              coords_per_param: int = 4, h: float = 1e-5, seed: int = 0,
              attempts: int = 5) -> GradCheckReport:
    """Compare tape gradients of the batch loss against central differences.

    Random coordinates are sampled from every parameter group. Each
    coordinate is probed at a random offset from its current value, with
    the analytic gradient recomputed at the probe point; when a probe
    straddles a hinge/argmax kink (where one-sided differences disagree by
    construction) the coordinate is redrawn at a different offset, up to
    ``attempts`` times. A genuine gradient bug fails at every offset.
    """
    rng = np.random.default_rng(seed)
    model = Model(dataset.config, config.flags, config.weights, seed=config.seed)
    batch = min(config.batch_size, 2 * (len(dataset.samples) // 2), 8)
    plan = next(iter(balanced_batches(dataset, batch, seed,
                                      balanced=config.balanced_sampling)))

    def with_coord(name: str, flat_index: int, value: float) -> dict[str, np.ndarray]:
        probe = {k: v.copy() for k, v in model.params.items()}
        probe[name].reshape(-1)[flat_index] = value
        return probe

    def loss_at(params: dict[str, np.ndarray]) -> float:
        t, _, _ = Model(dataset.config, config.flags, config.weights, params,
                        seed=config.seed).batch_loss(dataset, plan, None)
        return t.item()

    def analytic_at(params: dict[str, np.ndarray], name: str, flat_index: int) -> float:
        probe_model = Model(dataset.config, config.flags, config.weights, params,
                            seed=config.seed)
        tape = GradTape()
        total, _, bound = probe_model.batch_loss(dataset, plan, tape)
        grads = backward(total, tape)
        return float(np.asarray(grads[bound[name]].data).reshape(-1)[flat_index])

    per_param: dict[str, float] = {}
    worst_name, worst = "", 0.0
    checked = 0
    for name, arr in model.params.items():
        size = arr.size
        picks = rng.choice(size, size=min(coords_per_param, size), replace=False)
        worst_here = 0.0
        for flat in picks:
            base = arr.reshape(-1)[int(flat)]
            best = np.inf
            for attempt in range(attempts):
                offset = 0.0 if attempt == 0 else float(rng.uniform(-0.03, 0.03))
                point = base + offset
                params = with_coord(name, int(flat), point)
                an = analytic_at(params, name, int(flat))
                up = loss_at(with_coord(name, int(flat), point + h))
                down = loss_at(with_coord(name, int(flat), point - h))
                fd = (up - down) / (2 * h)
                rel = float(abs(an - fd) / max(abs(an), abs(fd), 1e-8))
                best = min(best, rel)
                if best <= tolerance:
                    break
            worst_here = max(worst_here, best)
            checked += 1
        per_param[name] = worst_here
        if worst_here >= worst:
            worst, worst_name = worst_here, name
    return GradCheckReport(bool(worst <= tolerance), tolerance, worst, worst_name,
                           checked, per_param)
