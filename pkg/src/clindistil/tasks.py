"""Task adapters (NER, RE, NLI, CLS), metrics and corner-case mining."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import tensor as T
from .models import EncoderModel, TaskHead
from .tensor import IGNORE_INDEX, no_grad
from .text import Vocabulary, encode, wordpiece_tokenize, wordpiece_word

I2B2_2012_CLASSES = ("PR", "TR", "TE", "CD", "EV", "OC", "NO")
RE_LABELS = ("TrIP", "TrWP", "TrCP", "TrAP", "TrNAP", "TeRP", "TeCP", "PIP", "No Relations")
NLI_LABELS = ("entailment", "contradiction", "neutral")
ICN_LABELS = ("Malignancy", "No Malignancy", "Possible Malignancy")
CONCEPT_KINDS = ("problem", "treatment", "test")
TASK_METRICS = {"ner": "exact_f1", "re": "micro_f1", "nli": "accuracy", "cls": "macro_f1"}
TASK_HEADS = {"ner": "token_classification", "re": "sequence_classification",
              "nli": "sentence_pair_classification", "cls": "sequence_classification"}

Span = Tuple[int, int, str]


class DataFormatError(ValueError):
    pass


def load_label_file(path) -> List[str]:
    """One label per line (e.g. a PHI inventory); blank lines ignored."""
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def bio_tags(classes: Sequence[str]) -> List[str]:
    return ["O"] + [f"{p}-{c}" for c in classes for p in ("B", "I")]


# -- BIO handling ---------------------------------------------------------------------


def repair_bio(labels: Sequence[str]) -> Tuple[List[str], int]:
    """Turn every I-X not preceded by B-X/I-X into B-X; returns (labels, repairs)."""
    out, fixes, prev = [], 0, "O"
    for tag in labels:
        if tag.startswith("I-") and prev[2:] != tag[2:]:
            tag = "B-" + tag[2:]
            fixes += 1
        out.append(tag)
        prev = tag
    return out, fixes


def spans_from_bio(labels: Sequence[str]) -> Set[Span]:
    """Maximal (start, end, class) spans with exclusive end."""
    spans: Set[Span] = set()
    start, cls = None, None
    for i, tag in enumerate(list(labels) + ["O"]):
        continues = tag.startswith("I-") and cls == tag[2:]
        if start is not None and not continues:
            spans.add((start, i, cls))
            start, cls = None, None
        if tag.startswith("B-") or (tag.startswith("I-") and not continues):
            start, cls = i, tag[2:]
    return spans


def bio_from_spans(spans: Iterable[Span], length: int) -> List[str]:
    labels = ["O"] * length
    for start, end, cls in sorted(spans):
        labels[start] = "B-" + cls
        for i in range(start + 1, end):
            labels[i] = "I-" + cls
    return labels


# -- metrics ------------------------------------------------------------------------------


def _prf(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def exact_f1(gold, pred) -> Tuple[float, float, float]:
    """Micro-aggregated exact-match span precision, recall and F1.

    ``gold``/``pred`` are either one span set or a per-sentence list of sets.
    """
    if isinstance(gold, (set, frozenset)):
        gold, pred = [gold], [pred]
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sentences but {len(pred)} predicted")
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        g, p = set(g), set(p)
        hit = len(g & p)
        tp += hit
        fp += len(p) - hit
        fn += len(g) - hit
    return _prf(tp, fp, fn)


def per_class_counts(gold: Sequence, pred: Sequence) -> Dict[object, Tuple[int, int, int]]:
    counts: Dict[object, List[int]] = {}
    for g, p in zip(gold, pred):
        counts.setdefault(g, [0, 0, 0])
        counts.setdefault(p, [0, 0, 0])
        if g == p:
            counts[g][0] += 1
        else:
            counts[p][1] += 1
            counts[g][2] += 1
    return {k: tuple(v) for k, v in counts.items()}


def classification_metrics(gold: Sequence, pred: Sequence, scheme: str = "accuracy") -> float:
    """accuracy | micro_f1 | macro_f1 for single-label classification.

    Macro-F1 averages over classes seen in gold or pred; a class that is
    predicted but never gold contributes F1 = 0.
    """
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(pred)} predicted")
    if not gold:
        return 0.0
    if scheme == "accuracy":
        return sum(g == p for g, p in zip(gold, pred)) / len(gold)
    counts = per_class_counts(gold, pred)
    if scheme == "micro_f1":
        tp = sum(c[0] for c in counts.values())
        fp = sum(c[1] for c in counts.values())
        fn = sum(c[2] for c in counts.values())
        return _prf(tp, fp, fn)[2]
    if scheme == "macro_f1":
        return float(np.mean([_prf(*c)[2] for c in counts.values()]))
    raise ValueError(f"unknown scheme {scheme!r}")


def confusion_matrix(gold: Sequence, pred: Sequence, label_order: Sequence) -> np.ndarray:
    """Counts with rows = gold label and columns = predicted label."""
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(pred)} predicted")
    index = {lab: i for i, lab in enumerate(label_order)}
    out = np.zeros((len(label_order), len(label_order)), dtype=np.int64)
    for g, p in zip(gold, pred):
        if g not in index or p not in index:
            raise ValueError(f"unknown label {g if g not in index else p!r}")
        out[index[g], index[p]] += 1
    return out


# -- corner cases -----------------------------------------------------------------------


@dataclass
class PredictionSet:
    model: str
    labels: List[str]

    def __len__(self) -> int:
        return len(self.labels)


def mine_corner_cases(predictions: Sequence) -> List[int]:
    """Indices where at least two of the models predict different labels."""
    sets = [p.labels if isinstance(p, PredictionSet) else list(p) for p in predictions]
    if len(sets) < 2:
        raise ValueError("corner-case mining needs at least two prediction sets")
    n = len(sets[0])
    if any(len(s) != n for s in sets):
        raise ValueError(f"prediction sets differ in length: {[len(s) for s in sets]}")
    return [i for i, labs in enumerate(zip(*sets)) if len(set(labs)) > 1]


def read_predictions(path, model: Optional[str] = None) -> PredictionSet:
    """Prediction TSV with header ``index<TAB>label``."""
    rows = _read_tsv(path, ("index", "label"))
    rows.sort(key=lambda r: int(r["index"]))
    if [int(r["index"]) for r in rows] != list(range(len(rows))):
        raise DataFormatError(f"{path}: indices must cover 0..n-1 exactly once")
    return PredictionSet(model or Path(path).stem, [r["label"] for r in rows])


def write_predictions(labels: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["index", "label"])
        for i, lab in enumerate(labels):
            w.writerow([i, lab])


# -- reports ------------------------------------------------------------------------------


@dataclass
class MetricsReport:
    task: str
    metric: str
    value: float
    n: int
    scores: Dict[str, float] = field(default_factory=dict)
    label_order: List[str] = field(default_factory=list)
    confusion: Optional[np.ndarray] = None
    predictions: List = field(default_factory=list)

    def records(self) -> List[dict]:
        recs = [{"task": self.task, "metric": self.metric, "value": self.value, "n": self.n}]
        for name, val in sorted(self.scores.items()):
            if name != self.metric:
                recs.append({"task": self.task, "metric": name, "value": val, "n": self.n})
        return recs


REPORT_FIELDS = ("task", "metric", "value", "n")


def write_report(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for rec in records:
            w.writerow([rec["task"], rec["metric"], f"{rec['value']:.6f}", rec["n"]])


def read_report(path) -> List[dict]:
    return [{"task": r["task"], "metric": r["metric"], "value": float(r["value"]), "n": int(r["n"])}
            for r in _read_tsv(path, REPORT_FIELDS)]


# -- raw datasets -------------------------------------------------------------------------


@dataclass
class NerDataset:
    sentences: List[Tuple[List[str], List[str]]]
    classes: List[str]

    def __len__(self) -> int:
        return len(self.sentences)


def load_conll(path, label_set: Sequence[str]) -> NerDataset:
    """Read ``token<TAB>tag`` lines with blank-line sentence breaks.

    ``label_set`` lists entity classes; tags must be O, B-X or I-X for X in it.
    Dangling I-X tags are repaired to B-X with a warning.
    """
    classes = list(label_set)
    allowed = set(bio_tags(classes))
    sentences, tokens, tags = [], [], []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            if tokens:
                sentences.append((tokens, tags))
                tokens, tags = [], []
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) < 2:
            raise DataFormatError(f"{path}:{lineno}: expected token<TAB>label")
        token, tag = parts[0], parts[-1].strip()
        if tag not in allowed:
            raise DataFormatError(f"{path}:{lineno}: unknown label {tag!r}")
        tokens.append(token)
        tags.append(tag)
    if tokens:
        sentences.append((tokens, tags))
    repaired = []
    for i, (toks, labs) in enumerate(sentences):
        fixed, n = repair_bio(labs)
        if n:
            warnings.warn(f"{path}: sentence {i}: repaired {n} dangling I- tag(s) to B-")
        repaired.append((toks, fixed))
    return NerDataset(repaired, classes)


@dataclass
class ReExample:
    text: str
    spans: List[Tuple[int, int, str]]   # byte offsets into UTF-8 text, end exclusive
    label: str = "No Relations"

    def validate(self) -> None:
        raw = self.text.encode("utf-8")
        ordered = sorted(self.spans)
        for start, end, kind in ordered:
            if kind not in CONCEPT_KINDS:
                raise DataFormatError(f"unknown concept kind {kind!r}")
            if not 0 <= start < end <= len(raw):
                raise DataFormatError(f"span ({start}, {end}) outside text of {len(raw)} bytes")
        for (s1, e1, _), (s2, e2, _) in zip(ordered, ordered[1:]):
            if s2 < e1:
                raise DataFormatError(f"overlapping spans ({s1}, {e1}) and ({s2}, {e2})")


def blue_re_preprocess(ex: ReExample) -> str:
    """Replace each concept span by ``@<kind>$``, left to right."""
    ex.validate()
    raw = ex.text.encode("utf-8")
    pieces, cursor = [], 0
    for start, end, kind in sorted(ex.spans):
        pieces.append(raw[cursor:start])
        pieces.append(f"@{kind}$".encode("utf-8"))
        cursor = end
    pieces.append(raw[cursor:])
    return b"".join(pieces).decode("utf-8")


@dataclass
class PairExample:
    sentence1: str
    sentence2: str
    label: str


@dataclass
class ClsExample:
    text: str
    label: str


def _read_tsv(path, required: Sequence[str]) -> List[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise DataFormatError(f"{path}: missing column(s) {', '.join(missing)}")
        return list(reader)


def _check_label(label: str, labels: Sequence[str], path, row: int) -> str:
    if label not in labels:
        raise DataFormatError(f"{path}: row {row}: unknown label {label!r}")
    return label


def load_pairs(path, labels: Sequence[str] = NLI_LABELS) -> List[PairExample]:
    rows = _read_tsv(path, ("sentence1", "sentence2", "label"))
    return [PairExample(r["sentence1"], r["sentence2"], _check_label(r["label"], labels, path, i + 2))
            for i, r in enumerate(rows)]


def load_cls(path, labels: Sequence[str] = ICN_LABELS) -> List[ClsExample]:
    rows = _read_tsv(path, ("text", "label"))
    return [ClsExample(r["text"], _check_label(r["label"], labels, path, i + 2)) for i, r in enumerate(rows)]


def load_re(path, labels: Sequence[str] = RE_LABELS) -> List[ReExample]:
    cols = ("text", "start1", "end1", "kind1", "start2", "end2", "kind2", "label")
    out = []
    for i, r in enumerate(_read_tsv(path, cols)):
        ex = ReExample(r["text"], [(int(r["start1"]), int(r["end1"]), r["kind1"]),
                                   (int(r["start2"]), int(r["end2"]), r["kind2"])],
                       _check_label(r["label"], labels, path, i + 2))
        ex.validate()
        out.append(ex)
    return out


# -- encoded task data ------------------------------------------------------------------------


@dataclass
class TaskData:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    token_type_ids: np.ndarray
    labels: np.ndarray                        # [n] or [n, L] (token tasks)
    word_positions: Optional[List[List[int]]] = None   # first-subword position of each kept word
    gold_tags: Optional[List[List[str]]] = None        # word-level gold BIO tags

    def __len__(self) -> int:
        return len(self.input_ids)

    def subset(self, rows) -> "TaskData":
        rows = np.asarray(rows, dtype=np.int64)
        positions = gold = None
        if self.word_positions is not None:
            positions = [self.word_positions[i] for i in rows]
            gold = [self.gold_tags[i] for i in rows]
        return TaskData(self.input_ids[rows], self.attention_mask[rows], self.token_type_ids[rows],
                        self.labels[rows], positions, gold)


@dataclass
class TaskDataset:
    task: str
    labels: List[str]
    train: TaskData
    eval: TaskData

    @property
    def head_kind(self) -> str:
        return TASK_HEADS[self.task]

    @property
    def metric(self) -> str:
        return TASK_METRICS[self.task]


def encode_ner(data: NerDataset, vocab: Vocabulary, max_len: int) -> TaskData:
    """Label the first subword of each word; continuations get the ignore index."""
    tags = bio_tags(data.classes)
    tag_id = {t: i for i, t in enumerate(tags)}
    ids, masks, types, labels, positions, gold = [], [], [], [], [], []
    for words, word_tags in data.sentences:
        pieces, row_labels, pos = [], [], []
        for word, tag in zip(words, word_tags):
            sub = wordpiece_word(word, vocab)
            if len(pieces) + len(sub) > max_len - 2:
                break
            pos.append(len(pieces) + 1)
            row_labels += [tag_id[tag]] + [IGNORE_INDEX] * (len(sub) - 1)
            pieces += sub
        enc = encode(pieces, None, vocab, max_len)
        lab = [IGNORE_INDEX] + row_labels
        lab += [IGNORE_INDEX] * (max_len - len(lab))
        ids.append(enc.ids)
        masks.append(enc.attention_mask)
        types.append(enc.token_type_ids)
        labels.append(lab)
        positions.append(pos)
        gold.append(list(word_tags))
    return TaskData(np.array(ids, dtype=np.int64), np.array(masks, dtype=np.int64),
                    np.array(types, dtype=np.int64), np.array(labels, dtype=np.int64), positions, gold)


def encode_sequences(texts_a: Sequence[str], texts_b: Optional[Sequence[str]], labels: Sequence[str],
                     label_order: Sequence[str], vocab: Vocabulary, max_len: int,
                     lowercase: bool = False) -> TaskData:
    index = {lab: i for i, lab in enumerate(label_order)}
    ids, masks, types = [], [], []
    for i, a in enumerate(texts_a):
        b = None if texts_b is None else wordpiece_tokenize(texts_b[i], vocab, lowercase=lowercase)
        enc = encode(wordpiece_tokenize(a, vocab, lowercase=lowercase), b, vocab, max_len)
        ids.append(enc.ids)
        masks.append(enc.attention_mask)
        types.append(enc.token_type_ids)
    return TaskData(np.array(ids, dtype=np.int64).reshape(len(texts_a), max_len),
                    np.array(masks, dtype=np.int64).reshape(len(texts_a), max_len),
                    np.array(types, dtype=np.int64).reshape(len(texts_a), max_len),
                    np.array([index[lab] for lab in labels], dtype=np.int64))


def make_task_dataset(task: str, train, eval_, vocab: Vocabulary, max_len: int,
                      labels: Optional[Sequence[str]] = None) -> TaskDataset:
    """Encode raw examples for ``task`` ∈ {ner, re, nli, cls}."""
    if task == "ner":
        tags = bio_tags(train.classes)
        return TaskDataset(task, tags, encode_ner(train, vocab, max_len), encode_ner(eval_, vocab, max_len))
    if task == "re":
        order = list(labels or RE_LABELS)

        def enc(xs):
            return encode_sequences([blue_re_preprocess(x) for x in xs], None, [x.label for x in xs], order, vocab, max_len)
    elif task == "nli":
        order = list(labels or NLI_LABELS)

        def enc(xs):
            return encode_sequences([x.sentence1 for x in xs], [x.sentence2 for x in xs], [x.label for x in xs],
                                    order, vocab, max_len)
    elif task == "cls":
        order = list(labels or ICN_LABELS)

        def enc(xs):
            return encode_sequences([x.text for x in xs], None, [x.label for x in xs], order, vocab, max_len)
    else:
        raise ValueError(f"unknown task {task!r}")
    return TaskDataset(task, order, enc(train), enc(eval_))


# -- model-side helpers -----------------------------------------------------------------------


def task_loss(model: EncoderModel, head: TaskHead, data: TaskData, rng=None):
    """Cross-entropy of the head over ``data``; returns (loss, labelled units)."""
    out = model.encode(data.input_ids, data.attention_mask, data.token_type_ids, rng)
    logits = head(out.last_hidden, training=model.training, rng=rng)
    labels = data.labels.reshape(-1)
    if logits.shape[-1] != head.num_labels:
        raise ValueError("label-count mismatch between head and logits")
    loss = T.cross_entropy(logits.reshape(-1, head.num_labels), labels)
    return loss, int((labels != IGNORE_INDEX).sum())


@no_grad()
def predict(model: EncoderModel, head: TaskHead, data: TaskData, label_names: Sequence[str],
            chunk: int = 64) -> List:
    """Sequence tasks: one label per example. Token tasks: repaired word-level tags."""
    preds: List = []
    for start in range(0, len(data), chunk):
        part = data.subset(np.arange(start, min(start + chunk, len(data))))
        out = model.encode(part.input_ids, part.attention_mask, part.token_type_ids)
        best = head(out.last_hidden).data.argmax(axis=-1)
        if head.kind == "token_classification":
            for row, pos, gold in zip(best, part.word_positions, part.gold_tags):
                tags = [label_names[row[p]] for p in pos] + ["O"] * (len(gold) - len(pos))
                preds.append(repair_bio(tags)[0])
        else:
            preds.extend(label_names[i] for i in best)
    return preds


def evaluate_task(model: EncoderModel, head: TaskHead, dataset: TaskDataset) -> MetricsReport:
    data = dataset.eval
    preds = predict(model, head, data, dataset.labels)
    if dataset.task == "ner":
        gold_spans = [spans_from_bio(g) for g in data.gold_tags]
        pred_spans = [spans_from_bio(p) for p in preds]
        p, r, f = exact_f1(gold_spans, pred_spans)
        flat_gold = [t for g in data.gold_tags for t in g]
        flat_pred = [t for q in preds for t in q]
        return MetricsReport("ner", "exact_f1", f, len(data), {"precision": p, "recall": r, "exact_f1": f},
                             list(dataset.labels), confusion_matrix(flat_gold, flat_pred, dataset.labels), preds)
    gold = [dataset.labels[i] for i in data.labels]
    scores = {s: classification_metrics(gold, preds, s) for s in ("accuracy", "micro_f1", "macro_f1")}
    return MetricsReport(dataset.task, dataset.metric, scores[dataset.metric], len(data), scores,
                         list(dataset.labels), confusion_matrix(gold, preds, dataset.labels), preds)
