"""Optimisation, scheduling, checkpoints and the training loops.

All randomness in a run (batch order, MLM corruption, dropout) is derived from
``(seed, step, micro-batch)``, so a resumed run replays exactly the batches an
uninterrupted run would have seen.
"""

from __future__ import annotations

import configparser
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .distill import OBJECTIVES, DistillationConfig, DistillationError
from .models import ArchitectureDescriptor, EncoderModel, TaskHead, build_model
from .tensor import Tensor, no_grad
from .text import CorpusBatcher, Vocabulary

logger = logging.getLogger(__name__)


# -- schedule ---------------------------------------------------------------------


@dataclass
class ScheduleConfig:
    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError(f"need 0 <= warmup ({self.warmup_steps}) <= total ({self.total_steps})")


def lr_at_step(sched: ScheduleConfig, step: int) -> float:
    """Linear warmup to ``base_lr`` then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    if sched.total_steps == sched.warmup_steps:
        return 0.0 if step == sched.total_steps and sched.total_steps > 0 else sched.base_lr
    return sched.base_lr * (sched.total_steps - step) / (sched.total_steps - sched.warmup_steps)


def scaled_warmup(full_warmup: int, steps: int, full_steps: int, floor: int = 10) -> int:
    """Shrink a full-scale warmup in proportion to a shorter run, never below ``floor``."""
    return min(steps, max(floor, round(full_warmup * steps / full_steps)))


# -- AdamW --------------------------------------------------------------------------


def default_no_decay(name: str) -> bool:
    return name.endswith(".bias") or name.endswith(".gain") or "norm" in name


@dataclass
class OptimizerState:
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: Callable[[str], bool] = default_no_decay


def adamw_step(params: Sequence[Tuple[str, Tensor]], grads: Dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[name]
        if state.weight_decay and not state.no_decay(name):
            p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


# -- run configuration ----------------------------------------------------------------


@dataclass
class RunConfig:
    seed: int = 0
    lr: float = 5e-4
    batch: int = 16
    accumulation: int = 1
    epochs: int = 3
    warmup: Optional[int] = None
    max_steps: Optional[int] = None
    max_len: int = 256
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    full_warmup: int = 5000
    full_steps: int = 100000
    eval_interval: int = 0
    checkpoint_interval: int = 0
    mlm_rate: float = 0.15
    mlm_mask_frac: float = 0.8
    mlm_random_frac: float = 0.1
    lowercase: bool = False

    def total_steps(self, batches_per_epoch: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return math.ceil(batches_per_epoch / self.accumulation) * self.epochs

    def schedule(self, batches_per_epoch: int) -> ScheduleConfig:
        total = self.total_steps(batches_per_epoch)
        warmup = self.warmup if self.warmup is not None else scaled_warmup(self.full_warmup, total, self.full_steps)
        return ScheduleConfig(self.lr, min(warmup, total), total)

    def optimizer(self) -> OptimizerState:
        return OptimizerState(betas=(self.beta1, self.beta2), eps=self.adam_eps, weight_decay=self.weight_decay)

    def to_dict(self) -> Dict[str, str]:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = "" if v is None else (str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v))
        return out

    @classmethod
    def from_dict(cls, values: Dict[str, str]) -> "RunConfig":
        cfg = cls()
        for key, raw in values.items():
            if not hasattr(cfg, key):
                raise KeyError(f"unknown run config key {key!r}")
            default = getattr(cls(), key)
            raw = str(raw).strip()
            if key in ("warmup", "max_steps"):
                value = None if raw in ("", "none", "None") else int(raw)
            elif isinstance(default, bool):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                value = int(raw)
            else:
                value = float(raw)
            setattr(cfg, key, value)
        return cfg


# -- checkpoints -------------------------------------------------------------------

MAGIC = b"CLDK"
FORMAT_VERSION = 1
TRAILER = b"END!"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    desc: ArchitectureDescriptor
    tensors: Dict[str, np.ndarray]
    meta: Dict[str, str] = field(default_factory=dict)
    vocab: Optional[List[str]] = None

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def group(self, prefix: str) -> Dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def model_arrays(self) -> Dict[str, np.ndarray]:
        return self.group("model.")

    def build_model(self, dtype=None) -> EncoderModel:
        arrays = self.model_arrays()
        if dtype is None:
            dtype = next(iter(arrays.values())).dtype.type if arrays else np.float32
        model = build_model(self.desc, 0, dtype)
        model.load_arrays(arrays)
        return model

    def load_into(self, model: EncoderModel) -> None:
        if model.desc != self.desc:
            raise CheckpointError("descriptor mismatch: checkpoint was saved for a different architecture")
        model.load_arrays(self.model_arrays())

    def vocabulary(self) -> Optional[Vocabulary]:
        return Vocabulary(self.vocab) if self.vocab else None


def make_checkpoint(model: EncoderModel, step: int = 0, seed: int = 0, extra: Optional[Dict[str, np.ndarray]] = None,
                    optimizer: Optional[OptimizerState] = None, meta: Optional[Dict[str, str]] = None,
                    vocab: Optional[Vocabulary] = None) -> Checkpoint:
    tensors = {"model." + k: v.data.copy() for k, v in model.params.items()}
    for k, v in (extra or {}).items():
        tensors[k] = np.array(v)
    info = {"step": str(step), "seed": str(seed)}
    if optimizer is not None:
        info["optimizer_step"] = str(optimizer.step)
        for k, v in optimizer.exp_avg.items():
            tensors["optim.m." + k] = v.copy()
        for k, v in optimizer.exp_avg_sq.items():
            tensors["optim.v." + k] = v.copy()
    info.update(meta or {})
    return Checkpoint(model.desc, tensors, info, list(vocab.tokens) if vocab is not None else None)


def restore_optimizer(ckpt: Checkpoint, state: OptimizerState) -> OptimizerState:
    state.step = int(ckpt.meta.get("optimizer_step", 0))
    state.exp_avg = {k: v.copy() for k, v in ckpt.group("optim.m.").items()}
    state.exp_avg_sq = {k: v.copy() for k, v in ckpt.group("optim.v.").items()}
    return state


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt``: magic, version, key-value header, vocab, named tensors, trailer."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["architecture"] = ckpt.desc.to_dict()
    cp["meta"] = {k: str(v) for k, v in sorted(ckpt.meta.items())}
    buf = io.StringIO()
    cp.write(buf)
    header = buf.getvalue().encode("utf-8")
    vocab = "\n".join(ckpt.vocab).encode("utf-8") if ckpt.vocab else b""

    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    out.write(header)
    out.write(struct.pack("<I", len(vocab)))
    out.write(vocab)
    out.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        le = arr.dtype.newbyteorder("<")
        if le not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<BB", _DTYPE_CODES[le], arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    out.write(TRAILER)
    Path(path).write_bytes(out.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.read(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    version, header_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(r.read(header_len).decode("utf-8"))
    desc = ArchitectureDescriptor.from_dict(dict(cp["architecture"]))
    meta = dict(cp["meta"]) if "meta" in cp else {}
    (vocab_len,) = r.unpack("<I")
    vocab = r.read(vocab_len).decode("utf-8").split("\n") if vocab_len else None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.read(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        tensors[name] = np.frombuffer(r.read(n * dtype.itemsize), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.read(4) != TRAILER:
        raise CheckpointError(f"{path}: missing end marker (truncated or corrupt)")
    return Checkpoint(desc, tensors, meta, vocab)


# -- generic loop -----------------------------------------------------------------------


@dataclass
class TrainResult:
    log: List[dict]
    checkpoint: Checkpoint


def _log_record(step: int, loss: float, components: Dict[str, float], lr: float) -> dict:
    return {"step": step, "loss": loss, "components": components, "lr": lr}


def write_log(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_log(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def _micro_position(step: int, j: int, accumulation: int, batches_per_epoch: int) -> Tuple[int, int]:
    micro = step * accumulation + j
    return micro // batches_per_epoch, micro % batches_per_epoch


def _run_loop(named: List[Tuple[str, Tensor]], micro_loss, batches_per_epoch: int, run_cfg: RunConfig,
              optimizer: OptimizerState, start_step: int, on_step=None) -> List[dict]:
    """Shared optimisation loop.

    ``micro_loss(epoch, index, step, j)`` returns ``(loss, components, weight)``
    where ``weight`` is the number of loss units (e.g. labelled tokens) the
    micro-batch contributes; accumulated gradients are unit-weighted averages.
    """
    sched = run_cfg.schedule(batches_per_epoch)
    log: List[dict] = []
    for step in range(start_step, sched.total_steps):
        results = []
        for j in range(run_cfg.accumulation):
            epoch, index = _micro_position(step, j, run_cfg.accumulation, batches_per_epoch)
            results.append(micro_loss(epoch, index, step, j))
        units = sum(w for _, _, w in results)
        for _, p in named:
            p.grad = None
        loss_value = 0.0
        components: Dict[str, float] = {}
        for loss, comps, weight in results:
            share = weight / units if units else 1.0 / len(results)
            if loss is not None and loss.requires_grad:
                T.backward(loss * share)
            loss_value += (loss.item() if loss is not None else 0.0) * share
            for k, v in comps.items():
                components[k] = components.get(k, 0.0) + v * share
        grads = {name: p.grad for name, p in named if p.grad is not None}
        if run_cfg.clip_norm:
            clip_grad_norm(grads, run_cfg.clip_norm)
        lr = lr_at_step(sched, step)
        adamw_step(named, grads, optimizer, lr)
        log.append(_log_record(step + 1, loss_value, components, lr))
        if on_step is not None:
            on_step(step + 1)
    for _, p in named:
        p.grad = None
    return log


def _checkpoint_hook(run_cfg: RunConfig, out_dir, build: Callable[[int], Checkpoint]):
    if out_dir is None or not run_cfg.checkpoint_interval:
        return None

    def hook(step: int) -> None:
        if step % run_cfg.checkpoint_interval == 0:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(build(step), Path(out_dir) / f"checkpoint-{step}.ckpt")

    return hook


# -- MLM (continual) pre-training ----------------------------------------------------------


def mlm_loss(model: EncoderModel, batch, rng=None) -> Tensor:
    out = model.forward(batch.input_ids, batch.attention_mask, batch.token_type_ids, rng)
    V = out.logits.shape[-1]
    return T.cross_entropy(out.logits.reshape(-1, V), batch.labels.reshape(-1))


def pretrain_mlm(model: EncoderModel, corpus: CorpusBatcher, run_cfg: RunConfig, out_dir=None,
                 resume: Optional[Checkpoint] = None) -> TrainResult:
    """Masked-LM training; starting from a trained checkpoint makes it continual learning."""
    named = model.named_parameters()
    optimizer = run_cfg.optimizer()
    start = 0
    if resume is not None:
        resume.load_into(model)
        restore_optimizer(resume, optimizer)
        start = resume.step
    model.train()

    def micro_loss(epoch, index, step, j):
        batch = corpus.batch(epoch, index)
        rng = np.random.default_rng([run_cfg.seed, step, j, 1])
        loss = mlm_loss(model, batch, rng)
        return loss, {"mlm": loss.item()}, int((batch.labels != T.IGNORE_INDEX).sum())

    def build(step):
        return make_checkpoint(model, step, run_cfg.seed, optimizer=optimizer,
                               meta={"kind": "mlm"}, vocab=corpus.vocab)

    log = _run_loop(named, micro_loss, len(corpus), run_cfg, optimizer, start,
                    _checkpoint_hook(run_cfg, out_dir, build))
    model.eval()
    ckpt = build(run_cfg.total_steps(len(corpus)))
    if out_dir is not None:
        _finish(out_dir, log, ckpt)
    return TrainResult(log, ckpt)


def _finish(out_dir, log, ckpt: Checkpoint) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_log(log, out / "log.jsonl")
    save_checkpoint(ckpt, out / "final.ckpt")


@no_grad()
def evaluate_mlm(model: EncoderModel, batches) -> float:
    """Token-weighted masked-LM loss over ``batches`` (no dropout)."""
    was = model.training
    model.eval()
    total = count = 0.0
    for batch in batches:
        n = int((batch.labels != T.IGNORE_INDEX).sum())
        if n:
            total += mlm_loss(model, batch).item() * n
            count += n
    model.train(was)
    return total / count if count else 0.0


# -- distillation pre-training ---------------------------------------------------------------


class IncompatibleObjective(DistillationError):
    pass


def objective_errors(objective: str, student: ArchitectureDescriptor, teacher: ArchitectureDescriptor) -> List[str]:
    errs = []
    if objective not in OBJECTIVES:
        return [f"unknown objective {objective!r}; choose from {sorted(OBJECTIVES)}"]
    if student.vocab_size != teacher.vocab_size:
        errs.append(f"student vocab {student.vocab_size} differs from teacher vocab {teacher.vocab_size}")
    if objective == "eq1":
        if student.hidden != teacher.hidden:
            errs.append(f"eq1 needs equal hidden widths (student {student.hidden}, teacher {teacher.hidden})")
    else:
        if objective == "recursive" and not student.recursive:
            errs.append("recursive objective needs a recursive student")
        if objective == "eq2" and student.recursive:
            errs.append("eq2 needs a non-recursive student; use the recursive objective")
        if teacher.depth % student.depth:
            errs.append(f"teacher depth {teacher.depth} is not divisible by student depth {student.depth}")
        if student.heads != teacher.heads:
            errs.append(f"attention alignment needs equal head counts ({student.heads} vs {teacher.heads})")
    return errs


def distill_pretrain(student: EncoderModel, teacher: EncoderModel, corpus: CorpusBatcher,
                     distill_cfg: DistillationConfig, run_cfg: RunConfig, objective: str = "eq1",
                     out_dir=None) -> TrainResult:
    errs = objective_errors(objective, student.desc, teacher.desc)
    if errs:
        raise IncompatibleObjective("; ".join(errs))
    loss_fn = OBJECTIVES[objective]
    if objective != "eq1" and not distill_cfg.projections and student.desc.hidden != teacher.desc.hidden:
        distill_cfg.build_projections(student.desc, teacher.desc, run_cfg.seed, student.dtype)
    named = student.named_parameters() + [(f"proj.{k}", p.weight) for k, p in distill_cfg.projections.items()]
    optimizer = run_cfg.optimizer()
    teacher.eval()
    student.train()

    def micro_loss(epoch, index, step, j):
        batch = corpus.batch(epoch, index)
        with no_grad():
            t_out = teacher.forward(batch.input_ids, batch.attention_mask, batch.token_type_ids)
        rng = np.random.default_rng([run_cfg.seed, step, j, 2])
        s_out = student.forward(batch.input_ids, batch.attention_mask, batch.token_type_ids, rng)
        loss, comps = loss_fn(s_out, t_out, batch, distill_cfg)
        return loss, comps, 1

    def build(step):
        extra = {f"proj.{k}": p.weight.data for k, p in distill_cfg.projections.items()}
        meta = {"kind": "distill", "objective": objective}
        meta.update({f"distill.{k}": v for k, v in distill_cfg.to_dict().items()})
        return make_checkpoint(student, step, run_cfg.seed, extra=extra, optimizer=optimizer, meta=meta,
                               vocab=corpus.vocab)

    log = _run_loop(named, micro_loss, len(corpus), run_cfg, optimizer, 0,
                    _checkpoint_hook(run_cfg, out_dir, build))
    student.eval()
    ckpt = build(run_cfg.total_steps(len(corpus)))
    if out_dir is not None:
        _finish(out_dir, log, ckpt)
    return TrainResult(log, ckpt)


# -- fine-tuning -----------------------------------------------------------------------------


def finetune(model: EncoderModel, head: TaskHead, dataset, run_cfg: RunConfig, out_dir=None,
             vocab: Optional[Vocabulary] = None):
    """Train encoder and head with cross-entropy, then evaluate on ``dataset.eval``.

    Returns ``(TrainResult, MetricsReport)``.
    """
    from .tasks import evaluate_task, task_loss

    if head.num_labels != len(dataset.labels):
        raise ValueError(f"label-space mismatch: head has {head.num_labels} labels, "
                         f"dataset has {len(dataset.labels)}")
    if head.kind != dataset.head_kind:
        raise ValueError(f"head kind {head.kind} does not match dataset kind {dataset.head_kind}")
    train = dataset.train
    n = len(train)
    per_epoch = -(-n // run_cfg.batch)
    named = model.named_parameters() + head.named_parameters()
    optimizer = run_cfg.optimizer()
    model.train()

    def micro_loss(epoch, index, step, j):
        order = np.random.default_rng([run_cfg.seed, epoch, 0]).permutation(n)
        rows = order[index * run_cfg.batch:(index + 1) * run_cfg.batch]
        rng = np.random.default_rng([run_cfg.seed, step, j, 3])
        loss, units = task_loss(model, head, train.subset(rows), rng)
        return loss, {"task": loss.item()}, units

    log = _run_loop(named, micro_loss, per_epoch, run_cfg, optimizer, 0) if n else []
    model.eval()
    report = evaluate_task(model, head, dataset)
    extra = {k: v.data for k, v in head.params.items()}
    ckpt = make_checkpoint(model, run_cfg.total_steps(per_epoch), run_cfg.seed, extra=extra,
                           meta={"kind": "finetune", "task": dataset.task, "head_kind": head.kind,
                                 "labels": ",".join(dataset.labels)}, vocab=vocab)
    if out_dir is not None:
        _finish(out_dir, log, ckpt)
    return TrainResult(log, ckpt), report
