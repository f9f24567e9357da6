"""Multi-task NLL training loop, AdamW with warmup+cosine schedule, checkpoints.

A run is deterministic given (config, dataset, seed): epoch shuffles and batch
boundaries derive statelessly from the seed, so resuming from a checkpoint
replays the exact uninterrupted trajectory.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, clip_global_norm, zero_grads
from .corpus import Tokenizer, derive_seed
from .model import ModelConfig, TransformerParams, forward, init_params, named_tensors, parameters
from .moe import collect_route_stats
from .tasks import ExpertMap, TaskRegistry, build_expert_map, format_prompt


class NumericalError(RuntimeError):
    """Training hit a non-finite loss; carries a dump of the offending batch."""


class CheckpointError(ValueError):
    """Checkpoint file is missing, malformed, or version-incompatible."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    epochs: int = 3
    grad_clip: float = 1.0
    batch_size_tokens: int = 4096
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    aux_loss_coeff: float = 0.0
    task_routing: bool = True  # False = ablation: plain top-2 routing in training

    def __post_init__(self) -> None:
        positive = {"learning_rate": self.learning_rate, "epochs": self.epochs,
                    "grad_clip": self.grad_clip, "batch_size_tokens": self.batch_size_tokens,
                    "adam_eps": self.adam_eps}
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.weight_decay < 0 or self.aux_loss_coeff < 0:
            raise ValueError("weight_decay and aux_loss_coeff must be non-negative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "learning_rate", "weight_decay", "warmup_ratio", "epochs", "grad_clip",
            "batch_size_tokens", "adam_beta1", "adam_beta2", "adam_eps", "seed",
            "aux_loss_coeff", "task_routing")}


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = config.warmup_ratio * total_steps
    if step < warmup:
        return config.learning_rate * step / warmup
    if total_steps == warmup:
        return config.learning_rate
    progress = (step - warmup) / (total_steps - warmup)
    return config.learning_rate * 0.5 * (1.0 + float(np.cos(np.pi * progress)))


class AdamState:
    """First/second moment estimates per named parameter plus the step count."""

    def __init__(self, named) -> None:
        self.m = {name: np.zeros_like(t.data) for name, t in named}
        self.v = {name: np.zeros_like(t.data) for name, t in named}
        self.t = 0


def adamw_step(named, state: AdamState, lr: float, config: TrainConfig) -> None:
    """Decoupled-weight-decay Adam update; a missing gradient counts as zero
    (experts that routed no tokens this step still decay their moments)."""
    state.t += 1
    bc1 = 1.0 - config.adam_beta1 ** state.t
    bc2 = 1.0 - config.adam_beta2 ** state.t
    for name, p in named:
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise ad.ShapeError(f"optimizer state for {name} has shape {m.shape}, param {p.data.shape}")
        g = p.grad
        if g is None:
            m *= config.adam_beta1
            v *= config.adam_beta2
        else:
            m *= config.adam_beta1
            m += (1.0 - config.adam_beta1) * g
            v *= config.adam_beta2
            v += (1.0 - config.adam_beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        p.data -= lr * (update + config.weight_decay * p.data)


# --- sample encoding and batching -------------------------------------------

@dataclass
class EncodedSample:
    ids: np.ndarray
    mask: np.ndarray
    task_expert: int
    task_name: str
    seed: int


def encode_samples(samples, tokenizer: Tokenizer, expert_map: ExpertMap,
                   max_seq_len: int) -> tuple[list[EncodedSample], int]:
    """Format prompts; overlong sequences are skipped and counted, not truncated."""
    encoded = []
    skipped = 0
    for s in samples:
        ids, mask = format_prompt(tokenizer, s.task, s.hypotheses, target=s.target)
        if len(ids) > max_seq_len:
            skipped += 1
            continue
        encoded.append(EncodedSample(ids, mask, expert_map.expert_for(s.task), s.task.name, s.seed))
    return encoded, skipped


def build_schedule(lengths, epochs: int, batch_size_tokens: int, seed: int) -> list[list[int]]:
    """All batches for the whole run, up front: per-epoch seeded shuffle, then
    greedy packing of raw sequence lengths up to the token budget."""
    batches: list[list[int]] = []
    n = len(lengths)
    for epoch in range(epochs):
        perm = np.random.default_rng(derive_seed(seed, _EPOCH_SALT, epoch)).permutation(n)
        current: list[int] = []
        current_tokens = 0
        for idx in perm:
            length = lengths[idx]
            if current and current_tokens + length > batch_size_tokens:
                batches.append(current)
                current, current_tokens = [], 0
            current.append(int(idx))
            current_tokens += length
        if current:
            batches.append(current)
    return batches


def make_batch_arrays(batch: list[EncodedSample], pad_id: int):
    """Pad to the longest sequence; targets are the next-token shift and the
    loss mask marks positions whose *target* is a target-span token."""
    b = len(batch)
    t = max(len(s.ids) for s in batch)
    ids = np.full((b, t), pad_id, dtype=np.int64)
    targets = np.full((b, t), pad_id, dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    for i, s in enumerate(batch):
        n = len(s.ids)
        ids[i, :n] = s.ids
        targets[i, :n - 1] = s.ids[1:]
        mask[i, :n - 1] = s.mask[1:]
    task_experts = np.array([s.task_expert for s in batch], dtype=np.int64)
    return ids, targets, mask, task_experts


def nll_loss(params: TransformerParams, config: ModelConfig, batch_arrays,
             task_routing: bool = True, aux_coeff: float = 0.0):
    """Mean NLL over target tokens; train-mode forced routing unless ablated.

    Returns (loss Tensor, per-layer RoutingDecisions, non-pad token mask).
    """
    ids, targets, mask, task_experts = batch_arrays
    if ids.shape[0] == 0:
        raise ValueError("empty batch")
    aux_terms: list | None = [] if aux_coeff > 0 else None
    if task_routing:
        logits, decisions = forward(params, config, ids, mode="train",
                                    task_experts=task_experts, aux_out=aux_terms)
    else:
        logits, decisions = forward(params, config, ids, mode="infer", top_k=2,
                                    aux_out=aux_terms)
    flat = ad.reshape(logits, (ids.size, config.vocab_size))
    loss = ad.cross_entropy(flat, targets.ravel(), mask.ravel())
    if aux_terms:
        aux = aux_terms[0]
        for term in aux_terms[1:]:
            aux = ad.add(aux, term)
        loss = ad.add(loss, aux * (aux_coeff / len(aux_terms)))
    return loss, decisions


# --- checkpoints -------------------------------------------------------------

MAGIC = b"NEKO"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

_EPOCH_SALT = 0x65  # 'e'
_MAP_SALT = 0x6D    # 'm'
_RNG_SALT = 0x72    # 'r'


@dataclass
class Checkpoint:
    """Everything needed to continue training or run inference."""

    config: ModelConfig
    dtype: str
    params: TransformerParams
    registry: TaskRegistry
    tokenizer: Tokenizer
    expert_map: ExpertMap
    train_config: TrainConfig
    opt: AdamState
    step: int = 0
    total_steps: int = 0
    rng: np.random.Generator | None = None

    def named_params(self):
        return list(named_tensors(self.params))


def new_run(config: ModelConfig, train_config: TrainConfig, registry: TaskRegistry,
            tokenizer: Tokenizer, dtype: str = "f32") -> Checkpoint:
    if config.vocab_size != tokenizer.vocab_size:
        raise ValueError(f"config vocab {config.vocab_size} != tokenizer vocab {tokenizer.vocab_size}")
    params = init_params(config, seed=train_config.seed, dtype=dtype)
    expert_map = build_expert_map(registry, config.n_experts,
                                  seed=derive_seed(train_config.seed, _MAP_SALT))
    named = list(named_tensors(params))
    return Checkpoint(
        config=config, dtype=dtype, params=params, registry=registry,
        tokenizer=tokenizer, expert_map=expert_map, train_config=train_config,
        opt=AdamState(named), step=0, total_steps=0,
        rng=np.random.default_rng(derive_seed(train_config.seed, _RNG_SALT)),
    )


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    tag = _DTYPE_TAGS[arr.dtype]
    fh.write(struct.pack("<BI", tag, arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    tag, rank = struct.unpack("<BI", _read_exact(fh, 5))
    if tag not in _TAG_DTYPES:
        raise CheckpointError(f"unknown dtype tag {tag} for tensor {name!r}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    dtype = _TAG_DTYPES[tag]
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return name, data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = [(name, t.data) for name, t in ckpt.named_params()]
    entries += [(f"opt.m.{name}", ckpt.opt.m[name]) for name in ckpt.opt.m]
    entries += [(f"opt.v.{name}", ckpt.opt.v[name]) for name in ckpt.opt.v]
    header = {
        "model_config": ckpt.config.to_dict(),
        "dtype": ckpt.dtype,
        "tasks": ckpt.registry.names,
        "alphabet": ckpt.tokenizer.alphabet,
        "expert_map": ckpt.expert_map.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "total_steps": ckpt.total_steps,
        "adam_t": ckpt.opt.t,
        "rng_state": ckpt.rng.bit_generator.state,
        "n_tensors": len(entries),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, arr in entries:
            _write_tensor(fh, name, arr)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: malformed header: {exc}") from None
        tensors = dict(_read_tensor(fh) for _ in range(header["n_tensors"]))

    config = ModelConfig(**header["model_config"])
    dtype = header["dtype"]
    registry = TaskRegistry(header["tasks"])
    tokenizer = Tokenizer(header["tasks"], alphabet=header["alphabet"])
    params = init_params(config, seed=0, dtype=dtype)
    named = list(named_tensors(params))
    opt = AdamState(named)
    opt.t = int(header["adam_t"])
    for name, tensor in named:
        for store, key in ((None, name), (opt.m, f"opt.m.{name}"), (opt.v, f"opt.v.{name}")):
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key!r}")
            arr = tensors[key]
            if arr.shape != tensor.data.shape:
                raise CheckpointError(
                    f"{path}: tensor {key!r} has shape {arr.shape}, expected {tensor.data.shape}")
            if store is None:
                tensor.data = arr
            else:
                store[name] = arr
    rng = np.random.default_rng(0)
    rng.bit_generator.state = header["rng_state"]
    return Checkpoint(
        config=config, dtype=dtype, params=params, registry=registry,
        tokenizer=tokenizer, expert_map=ExpertMap.from_dict(header["expert_map"]),
        train_config=TrainConfig(**header["train_config"]), opt=opt,
        step=int(header["step"]), total_steps=int(header["total_steps"]), rng=rng,
    )


# --- the loop ----------------------------------------------------------------

def metrics_header(n_experts: int) -> list[str]:
    return ["step", "loss", "lr", "grad_norm", "tokens"] + [
        f"expert_load_{e}" for e in range(n_experts)]


@dataclass
class TrainResult:
    rows: list[dict]
    skipped_overlong: int


def train(ckpt: Checkpoint, samples, on_step=None) -> TrainResult:
    """Run (or resume) training over ``samples``; returns per-step metric rows.

    Each step: zero grads, forward with the task route, backward, global-norm
    clip, AdamW at the scheduled rate. Aborts on non-finite loss.
    """
    cfg = ckpt.train_config
    encoded, skipped = encode_samples(samples, ckpt.tokenizer, ckpt.expert_map,
                                      ckpt.config.max_seq_len)
    if not encoded:
        raise ValueError("no usable samples (all empty or overlong)")
    schedule = build_schedule([len(s.ids) for s in encoded], cfg.epochs,
                              cfg.batch_size_tokens, cfg.seed)
    total_steps = len(schedule)
    if ckpt.total_steps and ckpt.total_steps != total_steps:
        raise ValueError(f"checkpoint expects {ckpt.total_steps} total steps, dataset gives {total_steps}")
    ckpt.total_steps = total_steps
    named = ckpt.named_params()
    all_params = [t for _, t in named]
    pad_id = ckpt.tokenizer.pad_id
    n_experts = ckpt.config.n_experts
    rows: list[dict] = []

    for step in range(ckpt.step, total_steps):
        batch = [encoded[i] for i in schedule[step]]
        arrays = make_batch_arrays(batch, pad_id)
        lr = lr_at(step, total_steps, cfg)
        zero_grads(all_params)
        with Graph():
            loss, decisions = nll_loss(ckpt.params, ckpt.config, arrays,
                                       task_routing=cfg.task_routing,
                                       aux_coeff=cfg.aux_loss_coeff)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                dump = [(s.task_name, s.seed, len(s.ids)) for s in batch]
                raise NumericalError(
                    f"non-finite loss {loss_value} at step {step}; batch (task, seed, len): {dump}")
            ad.backward(loss)
        if cfg.task_routing:
            assert all(d.task_forced is not None for d in decisions)
        grad_norm = clip_global_norm([p for p in all_params if p.grad is not None], cfg.grad_clip)
        adamw_step(named, ckpt.opt, lr, cfg)
        ckpt.step = step + 1

        valid = (arrays[0] != pad_id).ravel()
        loads = np.zeros(n_experts, dtype=np.int64)
        for d in decisions:
            np.add.at(loads, d.indices[valid].ravel(), 1)
        loads = loads / max(loads.sum(), 1)
        row = {"step": step, "loss": loss_value, "lr": lr, "grad_norm": grad_norm,
               "tokens": int(valid.sum())}
        row.update({f"expert_load_{e}": float(loads[e]) for e in range(n_experts)})
        rows.append(row)
        if on_step is not None:
            on_step(row, ckpt)
    return TrainResult(rows=rows, skipped_overlong=skipped)


def route_stats_over(ckpt: Checkpoint, samples, top_k: int | None = None):
    """Inference-time routing statistics over a dataset, per task."""
    stream = []
    for sample in samples:
        ids, _ = format_prompt(ckpt.tokenizer, sample.task, sample.hypotheses,
                               target=sample.target)
        if len(ids) > ckpt.config.max_seq_len:
            continue
        _, decisions = forward(ckpt.params, ckpt.config, ids, mode="infer", top_k=top_k)
        stream.extend((sample.task, d) for d in decisions)
    return collect_route_stats(stream, n_experts=ckpt.config.n_experts)
