"""Distillation objectives.

* ``eq1_loss``: output-distribution KL + last-hidden cosine alignment + MLM.
* ``eq2_loss``: layer-to-layer MSE on embeddings, attention maps and hidden
  states, plus soft cross-entropy on the output distribution.
* ``recursive_distill_loss``: ``eq2_loss`` with each recursion of a shared-layer
  student standing in for a student layer.

Teacher outputs are always read as constants, so teacher parameters never
receive gradient. Padding positions are excluded from every term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .models import ArchitectureDescriptor, ModelOutputs
from .tensor import Tensor

ATTENTION_TARGETS = ("scores", "probabilities")
LAYER_TERMS = ("embed", "att", "hid", "out")
EQ1_DEFAULT_LAMBDAS = (0.5, 0.25, 0.25)


class DistillationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerMapping:
    """Uniform student→teacher layer map g(l) = l·M/N (1-based)."""

    student_layers: int
    teacher_layers: int

    def __post_init__(self) -> None:
        n, m = self.student_layers, self.teacher_layers
        if n < 1 or m < 1:
            raise DistillationError("layer counts must be positive")
        if m % n:
            raise DistillationError(f"teacher depth {m} is not divisible by student depth {n}")

    def __call__(self, l: int) -> int:
        return map_layer(self, l)

    def indices(self) -> List[int]:
        return [self(l) for l in range(1, self.student_layers + 1)]


def map_layer(mapping: LayerMapping, l: int) -> int:
    if not 1 <= l <= mapping.student_layers:
        raise DistillationError(f"student layer {l} outside [1, {mapping.student_layers}]")
    return l * (mapping.teacher_layers // mapping.student_layers)


class Projection:
    """Learned linear bridge between student and teacher widths (training only)."""

    def __init__(self, h_s: int, h_t: int, rng_seed: int = 0, identity: bool = False, dtype=np.float32):
        if h_s < 1 or h_t < 1:
            raise ValueError("projection widths must be positive")
        if identity:
            if h_s != h_t:
                raise ValueError("identity initialisation needs equal widths")
            w = np.eye(h_s, dtype=dtype)
        else:
            w = np.random.default_rng(rng_seed).normal(0.0, 0.02, (h_s, h_t)).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight


def make_projection(h_s: int, h_t: int, rng_seed: int = 0, identity: bool = False, dtype=np.float32) -> Projection:
    return Projection(h_s, h_t, rng_seed, identity, dtype)


@dataclass
class DistillationConfig:
    lambdas: Optional[Tuple[float, ...]] = None
    temperature: float = 2.0
    attention_target: str = "scores"
    projections: Dict[str, Projection] = field(default_factory=dict)
    # term families the layer-to-layer objectives include; the rest get weight 0
    terms: Tuple[str, ...] = LAYER_TERMS

    def __post_init__(self) -> None:
        self.terms = tuple(self.terms)
        unknown = set(self.terms) - set(LAYER_TERMS)
        if unknown or not self.terms:
            raise DistillationError(f"terms must be a nonempty subset of {LAYER_TERMS}")
        if self.temperature <= 0:
            raise DistillationError("temperature must be > 0")
        if self.attention_target not in ATTENTION_TARGETS:
            raise DistillationError(f"attention_target must be one of {ATTENTION_TARGETS}")
        if self.lambdas is not None:
            self.lambdas = tuple(float(x) for x in self.lambdas)
            if any(x < 0 for x in self.lambdas) or not any(x > 0 for x in self.lambdas):
                raise DistillationError("lambdas must be >= 0 with at least one positive")

    def eq1_lambdas(self) -> Tuple[float, float, float]:
        lam = self.lambdas or EQ1_DEFAULT_LAMBDAS
        if len(lam) != 3:
            raise DistillationError(f"the output/align/MLM objective takes 3 lambdas, got {len(lam)}")
        return lam

    def eq2_lambdas(self, n_layers: int) -> Tuple[float, ...]:
        lam = self.lambdas or (1.0,) * (n_layers + 2)
        if len(lam) != n_layers + 2:
            raise DistillationError(f"layer-to-layer objective with {n_layers} student layers takes "
                                    f"{n_layers + 2} lambdas, got {len(lam)}")
        return lam

    def build_projections(self, student: ArchitectureDescriptor, teacher: ArchitectureDescriptor,
                          rng_seed: int = 0, dtype=np.float32, identity: bool = False) -> List[Tensor]:
        """Create the per-alignment projections needed when widths differ."""
        self.projections = {}
        if student.hidden != teacher.hidden or identity:
            for i, key in enumerate(["embed"] + [f"hidden.{l}" for l in range(1, student.depth + 1)]):
                self.projections[key] = make_projection(student.hidden, teacher.hidden, rng_seed + i,
                                                        identity=identity, dtype=dtype)
        return self.parameters()

    def parameters(self) -> List[Tensor]:
        return [p.weight for p in self.projections.values()]

    def to_dict(self) -> Dict[str, str]:
        return {
            "lambdas": "" if self.lambdas is None else ",".join(repr(x) for x in self.lambdas),
            "temperature": repr(self.temperature),
            "mapping": "uniform",
            "attention_target": self.attention_target,
        }

    @classmethod
    def from_dict(cls, values: Dict[str, str]) -> "DistillationConfig":
        raw = values.get("lambdas", "").strip()
        lambdas = tuple(float(x) for x in raw.split(",")) if raw else None
        if values.get("mapping", "uniform").strip() != "uniform":
            raise DistillationError("only the uniform layer mapping is supported")
        return cls(lambdas=lambdas, temperature=float(values.get("temperature", 2.0)),
                   attention_target=values.get("attention_target", "scores").strip())


# -- helpers ----------------------------------------------------------------------


def _content_rows(mask: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.asarray(mask).reshape(-1) > 0)


def _rows(x: Tensor, rows: np.ndarray) -> Tensor:
    return x.reshape(-1, x.shape[-1])[rows]


def _const_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    return Tensor(x.data.reshape(-1, x.shape[-1])[rows])


def _batch_mask(batch, out: ModelOutputs) -> np.ndarray:
    mask = getattr(batch, "attention_mask", None)
    if mask is None and isinstance(batch, dict):
        mask = batch.get("attention_mask")
    if mask is None:
        mask = out.attention_mask
    return np.asarray(mask)


def soft_cross_entropy(student_logits: Tensor, teacher_logits: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Mean over rows of −Σ softmax(t/T)·log_softmax(s/T); ``teacher_logits`` is constant."""
    target = T.softmax(Tensor(teacher_logits / temperature)).data
    logq = T.log_softmax(student_logits * (1.0 / temperature), axis=-1)
    return (logq * (-target)).sum() * (1.0 / target.shape[0])


def kl_from_logits(teacher_logits: np.ndarray, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """KL(softmax(t/T) ∥ softmax(s/T)) averaged over rows, computed in log space.

    Written as Σ p·(log p − log q) so identical logits give exactly 0.
    """
    logq = T.log_softmax(student_logits * (1.0 / temperature), axis=-1)
    scaled = Tensor(np.asarray(teacher_logits, dtype=student_logits.dtype)) * (1.0 / temperature)
    logp = T.log_softmax(scaled, axis=-1).data
    return ((Tensor(logp) - logq) * np.exp(logp)).sum() * (1.0 / logp.shape[0])


def _attention_pairs(mask: np.ndarray, heads: int) -> Tuple[np.ndarray, ...]:
    m = mask > 0
    pair = m[:, None, :, None] & m[:, None, None, :]
    pair = np.broadcast_to(pair, (m.shape[0], heads, m.shape[1], m.shape[1]))
    return np.nonzero(pair)


# -- objectives ---------------------------------------------------------------------


def eq1_loss(student_out: ModelOutputs, teacher_out: ModelOutputs, batch, cfg: DistillationConfig):
    """λ1·T²·KL(teacher ∥ student) + λ2·cosine(h_s, h_t) + λ3·MLM.

    Returns ``(total, components)`` where components holds the unweighted terms.
    """
    s_logits, t_logits = student_out.logits, teacher_out.logits
    if s_logits.shape[-1] != t_logits.shape[-1]:
        raise DistillationError(f"vocabulary mismatch: {s_logits.shape[-1]} vs {t_logits.shape[-1]}")
    if student_out.last_hidden.shape[-1] != teacher_out.last_hidden.shape[-1]:
        raise DistillationError(f"hidden width mismatch: {student_out.last_hidden.shape[-1]} vs "
                                f"{teacher_out.last_hidden.shape[-1]}")
    lam = cfg.eq1_lambdas()
    temp = cfg.temperature
    rows = _content_rows(_batch_mask(batch, student_out))

    l_output = kl_from_logits(t_logits.data.reshape(-1, t_logits.shape[-1])[rows],
                              _rows(s_logits, rows), temp) * (temp * temp)
    l_align = T.cosine_embedding_loss(_rows(student_out.last_hidden, rows),
                                      _const_rows(teacher_out.last_hidden, rows))
    labels = batch.labels if hasattr(batch, "labels") else batch["labels"]
    l_mlm = T.cross_entropy(s_logits.reshape(-1, s_logits.shape[-1]), np.asarray(labels).reshape(-1))

    terms = [(lam[0], l_output), (lam[1], l_align), (lam[2], l_mlm)]
    total = _weighted_sum(terms)
    components = {"output": l_output.item(), "align": l_align.item(), "mlm": l_mlm.item()}
    return total, components


def _weighted_sum(terms: Sequence[Tuple[float, Tensor]]) -> Tensor:
    total = None
    for weight, term in terms:
        if weight == 0:
            continue
        piece = term * weight
        total = piece if total is None else total + piece
    if total is None:
        raise DistillationError("every loss term has weight 0")
    return total


def _layer_to_layer(student_out: ModelOutputs, teacher_out: ModelOutputs, batch, cfg: DistillationConfig):
    n = len(student_out.per_layer_hidden)
    m = len(teacher_out.per_layer_hidden)
    mapping = LayerMapping(n, m)
    lam = cfg.eq2_lambdas(n)
    on = {k: 1.0 if k in cfg.terms else 0.0 for k in LAYER_TERMS}
    mask = _batch_mask(batch, student_out)
    rows = _content_rows(mask)

    def bridge(key: str, x: Tensor, target_width: int) -> Tensor:
        proj = cfg.projections.get(key)
        if proj is not None:
            return proj(x)
        if x.shape[-1] != target_width:
            raise DistillationError(f"missing projection {key!r} for width {x.shape[-1]} -> {target_width}")
        return x

    t_width = teacher_out.embedding_output.shape[-1]
    l_embed = T.mse(bridge("embed", _rows(student_out.embedding_output, rows), t_width),
                    _const_rows(teacher_out.embedding_output, rows))
    terms = [(on["embed"] * lam[0], l_embed)]
    components: Dict[str, float] = {"embed": l_embed.item()}

    use_scores = cfg.attention_target == "scores"
    s_maps = student_out.per_layer_scores if use_scores else student_out.per_layer_attention
    t_maps = teacher_out.per_layer_scores if use_scores else teacher_out.per_layer_attention
    heads = s_maps[0].shape[1]
    if t_maps[0].shape[1] != heads:
        raise DistillationError(f"attention head mismatch: student {heads} vs teacher {t_maps[0].shape[1]}")
    pairs = _attention_pairs(mask, heads)

    att_total = hid_total = 0.0
    for l in range(1, n + 1):
        tl = mapping(l) - 1
        l_att = T.mse(s_maps[l - 1][pairs], Tensor(t_maps[tl].data[pairs]))
        hid_t = teacher_out.per_layer_hidden[tl]
        l_hid = T.mse(bridge(f"hidden.{l}", _rows(student_out.per_layer_hidden[l - 1], rows), hid_t.shape[-1]),
                      _const_rows(hid_t, rows))
        terms += [(on["att"] * lam[l], l_att), (on["hid"] * lam[l], l_hid)]
        components[f"att.{l}"] = l_att.item()
        components[f"hid.{l}"] = l_hid.item()
        att_total += l_att.item()
        hid_total += l_hid.item()

    s_logits, t_logits = student_out.logits, teacher_out.logits
    l_out = soft_cross_entropy(_rows(s_logits, rows), t_logits.data.reshape(-1, t_logits.shape[-1])[rows],
                               cfg.temperature)
    terms.append((on["out"] * lam[n + 1], l_out))
    components.update(att=att_total, hid=hid_total, out=l_out.item())
    return _weighted_sum(terms), components


def eq2_loss(student_out: ModelOutputs, teacher_out: ModelOutputs, batch, cfg: DistillationConfig):
    """λ0·MSE(embeddings) + Σ_l λ_l·[MSE(att_l, att_g(l)) + MSE(hid_l, hid_g(l))] + λ_{N+1}·soft CE.

    Returns ``(total, components)``.
    """
    return _layer_to_layer(student_out, teacher_out, batch, cfg)


def recursive_distill_loss(student_out: ModelOutputs, teacher_out: ModelOutputs, batch, cfg: DistillationConfig):
    if not student_out.recursive:
        raise DistillationError("recursive objective needs a recursive (shared-layer) student")
    return _layer_to_layer(student_out, teacher_out, batch, cfg)


OBJECTIVES = {"eq1": eq1_loss, "eq2": eq2_loss, "recursive": recursive_distill_loss}
