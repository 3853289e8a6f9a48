"""BERT-style encoders: the teacher shape plus the three student shapes.

One class covers all of them. A descriptor with ``recursive=True`` stores a
single transformer layer and applies it ``recursion_depth`` times, with a
distinct pair of bottleneck adapters per application. ``embedding_size`` below
``hidden`` factorises the token embeddings through an E→h projection.

Weights are stored as ``[in, out]`` so a linear layer is ``x @ W + b``.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_FILL = -1e9
INIT_STD = 0.02


class DescriptorError(ValueError):
    pass


@dataclass
class ArchitectureDescriptor:
    vocab_size: int
    hidden: int
    layers: int
    heads: int
    mlp_expansion: int = 4
    max_positions: int = 512
    embedding_size: Optional[int] = None
    recursive: bool = False
    recursion_depth: int = 1
    adapter_bottleneck: int = 0
    dropout: float = 0.1
    segment_embeddings: bool = False
    layer_norm_eps: float = 1e-12

    def __post_init__(self) -> None:
        if self.embedding_size is None:
            self.embedding_size = self.hidden

    @property
    def E(self) -> int:
        return self.embedding_size

    @property
    def factorized(self) -> bool:
        return self.embedding_size < self.hidden

    @property
    def depth(self) -> int:
        """Number of layer applications (N, or R for recursive encoders)."""
        return self.recursion_depth if self.recursive else self.layers

    @property
    def intermediate(self) -> int:
        return self.hidden * self.mlp_expansion

    def errors(self) -> List[str]:
        errs = []
        for name in ("vocab_size", "hidden", "layers", "heads", "mlp_expansion", "max_positions", "embedding_size"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be positive")
        if self.heads >= 1 and self.hidden % self.heads:
            errs.append(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.embedding_size > self.hidden:
            errs.append(f"embedding_size {self.embedding_size} exceeds hidden {self.hidden}")
        if self.recursive:
            if self.layers != 1:
                errs.append("recursive encoders store exactly one layer (layers = 1)")
            if self.recursion_depth < 1:
                errs.append("recursion_depth must be >= 1")
        elif self.adapter_bottleneck:
            errs.append("adapters are only supported on recursive encoders")
        if self.adapter_bottleneck < 0:
            errs.append("adapter_bottleneck must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            errs.append("dropout must be in [0, 1)")
        return errs

    def validate(self) -> "ArchitectureDescriptor":
        errs = self.errors()
        if errs:
            raise DescriptorError("invalid descriptor: " + "; ".join(errs))
        return self

    # -- key-value serialisation -----------------------------------------------

    def to_dict(self) -> Dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = str(v).lower() if isinstance(v, bool) else str(v)
        return out

    @classmethod
    def from_dict(cls, values: Dict[str, str]) -> "ArchitectureDescriptor":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise DescriptorError(f"unknown descriptor key {key!r}")
            raw = str(raw).strip()
            if key in ("recursive", "segment_embeddings"):
                kwargs[key] = raw.lower() in ("1", "true", "yes", "on")
            elif key in ("dropout", "layer_norm_eps"):
                kwargs[key] = float(raw)
            elif key == "embedding_size" and raw.lower() in ("", "none"):
                kwargs[key] = None
            else:
                kwargs[key] = int(raw)
        missing = [k for k in ("vocab_size", "hidden", "layers", "heads") if k not in kwargs]
        if missing:
            raise DescriptorError(f"descriptor missing key(s): {', '.join(missing)}")
        return cls(**kwargs)

    def save(self, path) -> None:
        cp = configparser.ConfigParser()
        cp["architecture"] = self.to_dict()
        with open(path, "w", encoding="utf-8") as fh:
            cp.write(fh)

    @classmethod
    def load(cls, path) -> "ArchitectureDescriptor":
        cp = configparser.ConfigParser()
        if not cp.read(path, encoding="utf-8"):
            raise FileNotFoundError(path)
        if "architecture" not in cp:
            raise DescriptorError(f"{path}: missing [architecture] section")
        return cls.from_dict(dict(cp["architecture"]))


# Cased clinical teacher lineage: students share its vocabulary.
TEACHER_VOCAB = 28996

PRESETS = {
    "teacher": ArchitectureDescriptor(TEACHER_VOCAB, 768, 12, 12, segment_embeddings=True),
    "distil": ArchitectureDescriptor(TEACHER_VOCAB, 768, 6, 12),
    "tiny": ArchitectureDescriptor(TEACHER_VOCAB, 312, 4, 12),
    "minialbert": ArchitectureDescriptor(TEACHER_VOCAB, 768, 1, 12, embedding_size=312, recursive=True,
                                         recursion_depth=6, adapter_bottleneck=64),
}


def preset(name: str) -> ArchitectureDescriptor:
    try:
        d = PRESETS[name]
    except KeyError:
        raise DescriptorError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ArchitectureDescriptor(**asdict(d))


def count_parameters(desc: ArchitectureDescriptor) -> int:
    """Closed-form count of the deployable parameters of ``build_model(desc)``.

    embeddings  V·E + P·E (+ 2·E segment) + 2·E norm (+ E·h projection when E < h)
    per layer   4(h² + h) attention, h·F + F + F·h + h MLP, 2·2h norms; F = h·expansion
    adapters    R · 2 · (h·A + A + A·h + h)        (recursive only)
    MLM head    h·E + E transform, 2·E norm, V output bias; decoder tied to the embedding table
    """
    desc.validate()
    V, P, h, E, F = desc.vocab_size, desc.max_positions, desc.hidden, desc.E, desc.intermediate
    emb = V * E + P * E + 2 * E
    if desc.segment_embeddings:
        emb += 2 * E
    if desc.factorized:
        emb += E * h
    layer = 4 * (h * h + h) + (h * F + F + F * h + h) + 2 * (2 * h)
    adapters = 0
    if desc.recursive and desc.adapter_bottleneck:
        A = desc.adapter_bottleneck
        adapters = desc.recursion_depth * 2 * (h * A + A + A * h + h)
    head = h * E + E + 2 * E + V
    return emb + desc.layers * layer + adapters + head


# -- model ----------------------------------------------------------------------


def _truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


@dataclass
class ModelOutputs:
    logits: Optional[Tensor] = None
    last_hidden: Optional[Tensor] = None
    per_layer_hidden: List[Tensor] = field(default_factory=list)
    per_layer_attention: List[Tensor] = field(default_factory=list)
    per_layer_scores: List[Tensor] = field(default_factory=list)
    embedding_output: Optional[Tensor] = None
    attention_mask: Optional[np.ndarray] = None
    recursive: bool = False


class EncoderModel:
    def __init__(self, desc: ArchitectureDescriptor, params: Dict[str, Tensor], dtype):
        self.desc = desc
        self.params = params
        self.dtype = dtype
        self.training = False

    # -- bookkeeping ---------------------------------------------------------------

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "EncoderModel":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def train(self, mode: bool = True) -> "EncoderModel":
        self.training = mode
        return self

    def eval(self) -> "EncoderModel":
        return self.train(False)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ValueError(f"parameter set mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, arr in arrays.items():
            p = self.params[k]
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=self.dtype)

    # -- forward ---------------------------------------------------------------------

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        out = x @ self.params[prefix + ".weight"]
        bias = self.params.get(prefix + ".bias")
        return out + bias if bias is not None else out

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[prefix + ".gain"], self.params[prefix + ".bias"], self.desc.layer_norm_eps)

    def _dropout(self, x: Tensor, rng) -> Tensor:
        if self.training and rng is not None:
            return T.dropout(x, self.desc.dropout, rng)
        return x

    def embed(self, input_ids: np.ndarray, token_type_ids: Optional[np.ndarray], rng=None) -> Tensor:
        B, L = input_ids.shape
        if L > self.desc.max_positions:
            raise ValueError(f"sequence length {L} exceeds max_positions {self.desc.max_positions}")
        p = self.params
        x = T.embedding_lookup(p["embeddings.word"], input_ids)
        x = x + p["embeddings.position"][np.arange(L)]
        if "embeddings.token_type" in p:
            types = np.zeros_like(input_ids) if token_type_ids is None else np.asarray(token_type_ids)
            x = x + T.embedding_lookup(p["embeddings.token_type"], types)
        x = self._norm(x, "embeddings.norm")
        x = self._dropout(x, rng)
        if self.desc.factorized:
            x = x @ p["embeddings.projection"]
        return x

    def _adapter(self, x: Tensor, prefix: str) -> Tensor:
        hidden = T.gelu(self._linear(x, prefix + ".down"))
        return x + self._linear(hidden, prefix + ".up")

    def _block(self, x: Tensor, layer: int, adapter: Optional[int], mask_add: np.ndarray, rng):
        d = self.desc
        B, L, h = x.shape
        H = d.heads
        hd = h // H
        pre = f"layers.{layer}"

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, L, H, hd).transpose(0, 2, 1, 3)

        q = heads(self._linear(x, pre + ".attention.query"))
        k = heads(self._linear(x, pre + ".attention.key"))
        v = heads(self._linear(x, pre + ".attention.value"))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        probs = T.softmax(scores + mask_add, axis=-1)
        ctx = self._dropout(probs, rng) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, L, h)
        attn_out = self._dropout(self._linear(ctx, pre + ".attention.output"), rng)
        if adapter is not None:
            attn_out = self._adapter(attn_out, f"adapters.{adapter}.attention")
        x = self._norm(x + attn_out, pre + ".attention_norm")

        mid = T.gelu(self._linear(x, pre + ".mlp.up"))
        mlp_out = self._dropout(self._linear(mid, pre + ".mlp.down"), rng)
        if adapter is not None:
            mlp_out = self._adapter(mlp_out, f"adapters.{adapter}.mlp")
        x = self._norm(x + mlp_out, pre + ".mlp_norm")
        return x, probs, scores

    def encode(self, input_ids, attention_mask=None, token_type_ids=None, rng=None) -> ModelOutputs:
        input_ids = np.asarray(input_ids, dtype=np.int64)
        if input_ids.ndim == 1:
            input_ids = input_ids[None, :]
        B, L = input_ids.shape
        if attention_mask is None:
            attention_mask = np.ones((B, L), dtype=np.int64)
        attention_mask = np.asarray(attention_mask).reshape(B, L)
        if token_type_ids is not None:
            token_type_ids = np.asarray(token_type_ids).reshape(B, L)
        mask_add = np.where(attention_mask[:, None, None, :] > 0, 0.0, MASK_FILL).astype(self.dtype)

        d = self.desc
        emb = self.embed(input_ids, token_type_ids, rng)
        x = emb
        out = ModelOutputs(embedding_output=emb, attention_mask=attention_mask, recursive=d.recursive)
        for i in range(d.depth):
            layer = 0 if d.recursive else i
            adapter = i if (d.recursive and d.adapter_bottleneck) else None
            x, probs, scores = self._block(x, layer, adapter, mask_add, rng)
            out.per_layer_hidden.append(x)
            out.per_layer_attention.append(probs)
            out.per_layer_scores.append(scores)
        out.last_hidden = x
        return out

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        p = self.params
        t = T.gelu(self._linear(hidden, "mlm.transform"))
        t = self._norm(t, "mlm.norm")
        return t @ p["embeddings.word"].transpose(1, 0) + p["mlm.bias"]

    def forward(self, input_ids, attention_mask=None, token_type_ids=None, rng=None) -> ModelOutputs:
        out = self.encode(input_ids, attention_mask, token_type_ids, rng)
        out.logits = self.mlm_logits(out.last_hidden)
        return out

    __call__ = forward


def _batch_fields(batch):
    if isinstance(batch, dict):
        return batch["input_ids"], batch.get("attention_mask"), batch.get("token_type_ids")
    return (getattr(batch, "input_ids", None) if hasattr(batch, "input_ids") else batch.ids,
            getattr(batch, "attention_mask", None), getattr(batch, "token_type_ids", None))


def forward(model: EncoderModel, batch, rng=None) -> ModelOutputs:
    ids, mask, types = _batch_fields(batch)
    return model.forward(ids, mask, types, rng)


def build_model(desc: ArchitectureDescriptor, rng_seed: int = 0, dtype=np.float32) -> EncoderModel:
    """Allocate and initialise every parameter of ``desc``.

    Weights ~ truncated normal(0, 0.02) cut at two standard deviations, biases
    zero, layer-norm gains one. The MLM decoder reuses the word embedding table.
    """
    desc.validate()
    rng = np.random.default_rng(rng_seed)
    V, P, h, E, F = desc.vocab_size, desc.max_positions, desc.hidden, desc.E, desc.intermediate
    params: Dict[str, Tensor] = {}

    def weight(name, *shape):
        params[name] = Tensor(_truncated_normal(rng, shape, INIT_STD, dtype), requires_grad=True, name=name)

    def zeros(name, n):
        params[name] = Tensor(np.zeros(n, dtype=dtype), requires_grad=True, name=name)

    def linear(prefix, n_in, n_out, bias=True):
        weight(prefix + ".weight", n_in, n_out)
        if bias:
            zeros(prefix + ".bias", n_out)

    def norm(prefix, n):
        params[prefix + ".gain"] = Tensor(np.ones(n, dtype=dtype), requires_grad=True, name=prefix + ".gain")
        zeros(prefix + ".bias", n)

    weight("embeddings.word", V, E)
    weight("embeddings.position", P, E)
    if desc.segment_embeddings:
        weight("embeddings.token_type", 2, E)
    norm("embeddings.norm", E)
    if desc.factorized:
        weight("embeddings.projection", E, h)

    for i in range(desc.layers):
        pre = f"layers.{i}"
        for part in ("query", "key", "value", "output"):
            linear(f"{pre}.attention.{part}", h, h)
        norm(pre + ".attention_norm", h)
        linear(pre + ".mlp.up", h, F)
        linear(pre + ".mlp.down", F, h)
        norm(pre + ".mlp_norm", h)

    if desc.recursive and desc.adapter_bottleneck:
        A = desc.adapter_bottleneck
        for r in range(desc.recursion_depth):
            for site in ("attention", "mlp"):
                linear(f"adapters.{r}.{site}.down", h, A)
                linear(f"adapters.{r}.{site}.up", A, h)

    linear("mlm.transform", h, E)
    norm("mlm.norm", E)
    zeros("mlm.bias", V)
    return EncoderModel(desc, params, dtype)


def init_student_from_teacher(student: EncoderModel, teacher: EncoderModel,
                              layer_indices: Optional[Sequence[int]] = None) -> None:
    """Copy embeddings, the MLM head and a subset of teacher layers into ``student``.

    Student layer i receives teacher layer ``layer_indices[i]`` (0-based); the
    default takes every second teacher layer. If the teacher has segment
    embeddings and the student does not, segment 0 is folded into the position
    table so single-segment inputs embed identically.
    """
    s, t = student.desc, teacher.desc
    if s.hidden != t.hidden or s.E != t.E:
        raise DescriptorError(f"dimension mismatch: student width {s.hidden}/{s.E} vs teacher {t.hidden}/{t.E}")
    if s.recursive or t.recursive:
        raise DescriptorError("teacher-subset initialisation needs non-recursive encoders")
    if s.vocab_size != t.vocab_size or s.mlp_expansion != t.mlp_expansion or s.heads != t.heads:
        raise DescriptorError("student and teacher differ in vocabulary, heads or MLP expansion")
    if layer_indices is None:
        stride = t.layers // s.layers
        layer_indices = [i * stride for i in range(s.layers)]
    layer_indices = list(layer_indices)
    if len(layer_indices) != s.layers:
        raise DescriptorError(f"need {s.layers} layer indices, got {len(layer_indices)}")
    if any(b <= a for a, b in zip(layer_indices, layer_indices[1:])):
        raise DescriptorError("layer indices must be strictly increasing")
    if layer_indices and (layer_indices[0] < 0 or layer_indices[-1] >= t.layers):
        raise DescriptorError(f"layer indices must lie in [0, {t.layers})")
    if s.max_positions > t.max_positions:
        raise DescriptorError("student max_positions exceeds the teacher's")

    sp, tp = student.params, teacher.params

    def copy(dst: str, src: str) -> None:
        sp[dst].data = np.array(tp[src].data, dtype=student.dtype)

    for name in sp:
        if name.startswith("layers."):
            _, idx, rest = name.split(".", 2)
            copy(name, f"layers.{layer_indices[int(idx)]}.{rest}")
        elif name == "embeddings.position":
            pos = tp[name].data[: s.max_positions]
            if "embeddings.token_type" in tp and "embeddings.token_type" not in sp:
                pos = pos + tp["embeddings.token_type"].data[0]
            sp[name].data = np.array(pos, dtype=student.dtype)
        else:
            copy(name, name)


# -- task heads -------------------------------------------------------------------

HEAD_KINDS = ("token_classification", "sequence_classification", "sentence_pair_classification")


class TaskHead:
    def __init__(self, kind: str, hidden: int, num_labels: int, rng_seed: int = 0,
                 dropout: float = 0.1, dtype=np.float32):
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}")
        if num_labels < 1:
            raise ValueError("num_labels must be >= 1")
        rng = np.random.default_rng(rng_seed)
        self.kind = kind
        self.num_labels = num_labels
        self.dropout = dropout
        self.params = {
            "head.weight": Tensor(_truncated_normal(rng, (hidden, num_labels), INIT_STD, dtype), requires_grad=True),
            "head.bias": Tensor(np.zeros(num_labels, dtype=dtype), requires_grad=True),
        }

    def named_parameters(self):
        return list(self.params.items())

    def __call__(self, hidden: Tensor, training: bool = False, rng=None) -> Tensor:
        if self.kind != "token_classification":
            hidden = hidden[:, 0, :]
        if training and rng is not None:
            hidden = T.dropout(hidden, self.dropout, rng)
        return hidden @ self.params["head.weight"] + self.params["head.bias"]


def forward_task_head(model: EncoderModel, head: TaskHead, batch, rng=None) -> Tensor:
    """Logits [B, L, C] for token heads and [B, C] for sequence heads."""
    ids, mask, types = _batch_fields(batch)
    out = model.encode(ids, mask, types, rng)
    return head(out.last_hidden, training=model.training, rng=rng)
