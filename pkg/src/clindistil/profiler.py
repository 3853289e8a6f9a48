"""Efficiency profiling: parameter counts, multiply-accumulates, latency and size."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .models import ArchitectureDescriptor, EncoderModel, build_model, count_parameters, preset
from .tensor import count_macs, no_grad

DEFAULT_SEQ_LEN = 256
TIE_TOLERANCE = 0.02


def mac_terms(desc: ArchitectureDescriptor, seq_len: int, batch: int = 1,
              include_mlm_head: bool = False) -> Dict[str, int]:
    """Multiply-accumulates of one forward pass, split by term.

    Per applied layer: Q/K/V/output projections 4·L·h², attention scores and
    value mixing 2·L²·h (heads·L²·(h/heads) each), MLP 2·L·h·F, adapters
    2·2·L·h·A. Plus the E→h embedding projection (L·E·h) when factorised and,
    optionally, the MLM head (L·h·E transform + L·E·V decoder). Lookups,
    norms, activations and bias adds perform no multiply-accumulates.
    """
    desc.validate()
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    L, h, E, F, n = seq_len, desc.hidden, desc.E, desc.intermediate, desc.depth
    terms = {
        "embedding_projection": L * E * h if desc.factorized else 0,
        "attention_projections": n * 4 * L * h * h,
        "attention_mixing": n * 2 * L * L * h,
        "mlp": n * 2 * L * h * F,
        "adapters": n * 2 * 2 * L * h * desc.adapter_bottleneck if desc.recursive else 0,
        "mlm_head": (L * h * E + L * E * desc.vocab_size) if include_mlm_head else 0,
    }
    return {k: v * batch for k, v in terms.items()}


def analytic_macs(desc: ArchitectureDescriptor, seq_len: int = DEFAULT_SEQ_LEN, batch: int = 1,
                  include_mlm_head: bool = False) -> int:
    return sum(mac_terms(desc, seq_len, batch, include_mlm_head).values())


def analytic_gmacs(desc: ArchitectureDescriptor, seq_len: int = DEFAULT_SEQ_LEN, batch: int = 1,
                   include_mlm_head: bool = False) -> float:
    return analytic_macs(desc, seq_len, batch, include_mlm_head) / 1e9


@no_grad()
def instrumented_macs(model: Union[EncoderModel, ArchitectureDescriptor], seq_len: int, batch: int = 1,
                      include_mlm_head: bool = False, seed: int = 0) -> int:
    """Run a real forward pass and count the MACs its matrix kernels perform."""
    if isinstance(model, ArchitectureDescriptor):
        model = build_model(model, seed, np.float32)
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, model.desc.vocab_size, size=(batch, seq_len))
    with count_macs() as counter:
        out = model.encode(ids)
        if include_mlm_head:
            model.mlm_logits(out.last_hidden)
    return counter.total


@dataclass
class BottleneckProfile:
    """Profile-only descriptor for a MobileBERT-style bottleneck encoder.

    Never built; parameters are declared rather than counted.
    """

    name: str = "mobile"
    declared_params: int = 25_000_000
    layers: int = 24
    hidden: int = 512
    bottleneck: int = 128
    ffn_stacks: int = 4
    ffn_inner: int = 512
    embedding_size: int = 128
    trigram_embedding: bool = True

    def mac_terms(self, seq_len: int, batch: int = 1) -> Dict[str, int]:
        L, h, b, n = seq_len, self.hidden, self.bottleneck, self.layers
        emb_in = 3 * self.embedding_size if self.trigram_embedding else self.embedding_size
        terms = {
            "embedding_projection": L * emb_in * h,
            # input and shared key/query bottlenecks h→b, value from the wide input h→b
            "bottlenecks": n * (2 * L * h * b + L * h * b),
            "attention_projections": n * (2 * L * b * b + L * b * b),
            "attention_mixing": n * 2 * L * L * b,
            "mlp": n * self.ffn_stacks * 2 * L * b * self.ffn_inner,
            "output_bottleneck": n * L * b * h,
        }
        return {k: v * batch for k, v in terms.items()}

    def macs(self, seq_len: int, batch: int = 1) -> int:
        return sum(self.mac_terms(seq_len, batch).values())


def model_size(params: Union[int, ArchitectureDescriptor]) -> Tuple[int, float]:
    """Deployable size at 4 bytes per parameter: (bytes, MiB)."""
    n = count_parameters(params) if isinstance(params, ArchitectureDescriptor) else int(params)
    nbytes = n * 4
    return nbytes, nbytes / 2 ** 20


@no_grad()
def measure_latency(model: EncoderModel, seq_len: int = DEFAULT_SEQ_LEN, batch: int = 1,
                    warmup_runs: int = 2, measured_runs: int = 10, seed: int = 0) -> Tuple[float, float]:
    """Mean and sample std (ms) of wall-clock encoder forward passes."""
    if measured_runs < 2:
        raise ValueError("measured_runs must be >= 2")
    ids = np.random.default_rng(seed).integers(0, model.desc.vocab_size, size=(batch, seq_len))
    was = model.training
    model.eval()
    for _ in range(warmup_runs):
        model.encode(ids)
    times = []
    for _ in range(measured_runs):
        start = time.perf_counter()
        model.encode(ids)
        times.append((time.perf_counter() - start) * 1e3)
    model.train(was)
    return statistics.fmean(times), statistics.stdev(times)


@dataclass
class EfficiencyRecord:
    name: str
    params: int
    gmacs: Optional[float]
    size_mib: float
    seq_len: int
    latency_ms: Optional[float] = None
    latency_std: Optional[float] = None

    @property
    def size_bytes(self) -> int:
        return self.params * 4


def profile(name: str, desc: Union[ArchitectureDescriptor, BottleneckProfile], seq_len: int = DEFAULT_SEQ_LEN,
            latency_runs: int = 0, warmup_runs: int = 2, seed: int = 0,
            include_mlm_head: bool = False) -> EfficiencyRecord:
    if isinstance(desc, BottleneckProfile):
        params = desc.declared_params
        gmacs = desc.macs(seq_len) / 1e9 if desc.layers else None
        return EfficiencyRecord(name, params, gmacs, model_size(params)[1], seq_len)
    params = count_parameters(desc)
    rec = EfficiencyRecord(name, params, analytic_gmacs(desc, seq_len, include_mlm_head=include_mlm_head),
                           model_size(params)[1], seq_len)
    if latency_runs:
        model = build_model(desc, seed, np.float32)
        rec.latency_ms, rec.latency_std = measure_latency(model, seq_len, 1, warmup_runs, latency_runs, seed)
    return rec


REFERENCE_MODELS = {
    "ClinicalBioBERT": "teacher",
    "DistilClinicalBERT": "distil",
    "TinyClinicalBERT": "tiny",
    "ClinicalMobileBERT": "mobile",
    "ClinicalMiniALBERT": "minialbert",
}


def reference_model_records(seq_len: int = DEFAULT_SEQ_LEN, latency_runs: int = 0) -> List[EfficiencyRecord]:
    out = []
    for name, key in REFERENCE_MODELS.items():
        desc = BottleneckProfile() if key == "mobile" else preset(key)
        out.append(profile(name, desc, seq_len, latency_runs=latency_runs if key != "mobile" else 0))
    return out


def best_marks(values: Sequence[Optional[float]], tol: float = TIE_TOLERANCE) -> List[bool]:
    """Mark the minimum of a column; values within ``tol`` (relative) of it tie."""
    present = [v for v in values if v is not None]
    if not present:
        return [False] * len(values)
    best = min(present)
    return [v is not None and v <= best * (1 + tol) + 1e-12 for v in values]


COLUMNS = (("latency_ms", "Latency (ms)"), ("gmacs", "GMACs"), ("size_mib", "Size (MiB)"))


def emit_efficiency_table(records: Sequence[EfficiencyRecord], records_path=None) -> str:
    """Aligned text table (``*`` marks the best, less is better) plus optional TSV companion."""
    if not records:
        raise ValueError("need at least one record")
    marks = {key: best_marks([getattr(r, key) for r in records]) for key, _ in COLUMNS}

    def cell(rec, key, i):
        v = getattr(rec, key)
        if v is None:
            return "-"
        if key == "latency_ms":
            text = f"{v:.2f} ± {rec.latency_std:.2f}"
        elif key == "gmacs":
            text = f"{v:.3f}"
        else:
            text = f"{v:.1f}"
        return text + ("*" if marks[key][i] else "")

    header = ["Model", "#Params"] + [label for _, label in COLUMNS]
    rows = [[r.name, f"{r.params / 1e6:.1f}M" if r.params >= 100_000 else str(r.params)] + [cell(r, key, i) for key, _ in COLUMNS]
            for i, r in enumerate(records)]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip() for row in rows]
    lines.append(f"(* best per column, ties within {TIE_TOLERANCE:.0%}; GMACs at batch 1, seq_len {records[0].seq_len})")
    if records_path is not None:
        write_records(records, records_path, marks)
    return "\n".join(lines) + "\n"


def write_records(records: Sequence[EfficiencyRecord], path, marks=None) -> None:
    fields = ["name", "params", "gmacs", "latency_ms", "latency_std", "size_mib", "size_bytes", "seq_len"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(fields + (["best"] if marks else []))
        for i, r in enumerate(records):
            row = [r.name, r.params, _fmt(r.gmacs), _fmt(r.latency_ms), _fmt(r.latency_std),
                   _fmt(r.size_mib), r.size_bytes, r.seq_len]
            if marks:
                row.append(",".join(k for k, _ in COLUMNS if marks[k][i]))
            w.writerow(row)


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))
