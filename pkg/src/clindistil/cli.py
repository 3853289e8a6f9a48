"""Command-line entry point.

Subcommands: pretrain, distill, finetune, evaluate, profile, mine-corners.
Settings come from an optional INI-style ``--config`` file with sections
``[run]``, ``[distill]``, ``[architecture]`` and ``[paths]``; command-line flags
override the file. Exit status is 0 on success, 2 for usage errors, 3 for
configuration errors and 1 for failures while running.
"""

from __future__ import annotations

import argparse
import configparser
import io
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .distill import DistillationConfig, DistillationError
from .models import (ArchitectureDescriptor, DescriptorError, TaskHead, build_model, init_student_from_teacher,
                     preset)
from .profiler import BottleneckProfile, emit_efficiency_table, reference_model_records, profile
from .tasks import (ICN_LABELS, NLI_LABELS, RE_LABELS, TASK_HEADS, MetricsReport, PredictionSet, evaluate_task,
                    load_cls, load_conll, load_label_file, load_pairs, load_re, make_task_dataset,
                    mine_corner_cases, read_predictions, write_predictions, write_report)
from .text import CorpusBatcher, MlmSettings, Vocabulary, load_vocab, read_corpus
from .training import (Checkpoint, RunConfig, evaluate_mlm, finetune, load_checkpoint, objective_errors,
                       pretrain_mlm, distill_pretrain)

log = logging.getLogger("clindistil")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
COMMANDS = ("pretrain", "distill", "finetune", "evaluate", "profile", "mine-corners")
TRAINING_COMMANDS = ("pretrain", "distill", "finetune")
DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(Exception):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class CliConfig:
    """Everything one command needs, merged from the config file and flags."""

    command: str
    out: Path
    run: RunConfig
    distill: DistillationConfig = field(default_factory=DistillationConfig)
    paths: Dict[str, str] = field(default_factory=dict)
    architecture: Optional[ArchitectureDescriptor] = None
    seed_given: bool = False
    objective: str = "eq1"
    task: Optional[str] = None
    dtype: str = "float32"
    init_from_teacher: bool = False
    predictions: List[str] = field(default_factory=list)
    presets: List[str] = field(default_factory=list)
    descs: List[str] = field(default_factory=list)
    reference_models: bool = False
    seq_len: int = 256
    latency_runs: int = 0


# -- config handling ----------------------------------------------------------------


def default_config_text() -> str:
    cp = configparser.ConfigParser(interpolation=None)
    run = RunConfig().to_dict()
    run["seed"] = ""
    cp["run"] = run
    cp["distill"] = DistillationConfig().to_dict()
    cp["architecture"] = preset("tiny").to_dict()
    cp["paths"] = {k: "" for k in ("corpus", "eval_corpus", "vocab", "model", "teacher", "resume",
                                   "train", "eval", "data", "labels")}
    buf = io.StringIO()
    buf.write("# seed is required for pretrain, distill and finetune\n")
    cp.write(buf)
    return buf.getvalue()


def _read_config_file(path: Optional[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    if path is None:
        return cp
    if not Path(path).is_file():
        raise ConfigError([f"config: file not found: {path}"])
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError([f"config: {exc}"]) from None
    unknown = [s for s in cp.sections() if s not in ("run", "distill", "architecture", "paths")]
    if unknown:
        raise ConfigError([f"config: unknown section(s) {', '.join(unknown)}"])
    return cp


def build_config(args: argparse.Namespace) -> CliConfig:
    """Merge file and flags; raises ConfigError on unparsable values."""
    cp = _read_config_file(args.config)
    errors = []
    run_values = dict(cp["run"]) if "run" in cp else {}
    seed_given = bool(run_values.get("seed", "").strip())
    if not seed_given:
        run_values.pop("seed", None)
    if args.seed is not None:
        run_values["seed"] = str(args.seed)
        seed_given = True
    for key in ("lr", "batch", "accumulation", "epochs", "warmup", "max_steps", "max_len"):
        value = getattr(args, key, None)
        if value is not None:
            run_values[key] = str(value)
    try:
        run = RunConfig.from_dict(run_values)
    except (KeyError, ValueError) as exc:
        errors.append(f"run: {exc}")
        run = RunConfig()
    try:
        distill = DistillationConfig.from_dict(dict(cp["distill"]) if "distill" in cp else {})
    except (DistillationError, ValueError) as exc:
        errors.append(f"distill: {exc}")
        distill = DistillationConfig()

    architecture = None
    desc_path = getattr(args, "student_desc", None) or getattr(args, "desc_file", None)
    preset_name = getattr(args, "student_preset", None)
    try:
        if desc_path:
            if Path(desc_path).is_file():
                architecture = ArchitectureDescriptor.load(desc_path)
            else:
                errors.append(f"student_desc: file not found: {desc_path}")
        elif preset_name:
            architecture = preset(preset_name)
        elif "architecture" in cp:
            architecture = ArchitectureDescriptor.from_dict(dict(cp["architecture"]))
    except (DescriptorError, ValueError) as exc:
        errors.append(f"architecture: {exc}")

    paths = {k: v for k, v in (dict(cp["paths"]) if "paths" in cp else {}).items() if v.strip()}
    for key in ("corpus", "eval_corpus", "vocab", "model", "teacher", "resume", "train", "eval", "data", "labels"):
        value = getattr(args, key, None)
        if value:
            paths[key] = value
    if errors:
        raise ConfigError(errors)
    return CliConfig(
        command=args.command, out=Path(args.out), run=run, distill=distill, paths=paths,
        architecture=architecture, seed_given=seed_given,
        objective=getattr(args, "objective", None) or "eq1", task=getattr(args, "task", None),
        dtype=getattr(args, "dtype", None) or "float32",
        init_from_teacher=bool(getattr(args, "init_from_teacher", False)),
        predictions=list(getattr(args, "predictions", None) or []),
        presets=list(getattr(args, "preset", None) or []), descs=list(getattr(args, "desc", None) or []),
        reference_models=bool(getattr(args, "reference_models", False)),
        seq_len=getattr(args, "seq_len", 256) or 256, latency_runs=getattr(args, "latency_runs", 0) or 0,
    )


REQUIRED_PATHS = {
    "pretrain": ("corpus",),
    "distill": ("teacher", "corpus"),
    "finetune": ("model", "train", "eval"),
    "evaluate": ("model",),
    "profile": (),
    "mine-corners": (),
}


def validate_config(cfg: CliConfig) -> List[str]:
    """Check every cross-field constraint; returns all violations (empty when valid)."""
    errors: List[str] = []
    if cfg.command in TRAINING_COMMANDS and not cfg.seed_given:
        errors.append("seed: a seed is required (set [run] seed or pass --seed)")
    for key in REQUIRED_PATHS.get(cfg.command, ()):
        if key not in cfg.paths:
            errors.append(f"{key}: required for {cfg.command}")
    for key, value in cfg.paths.items():
        if not Path(value).is_file():
            errors.append(f"{key}: file not found: {value}")
    for p in cfg.predictions:
        if not Path(p).is_file():
            errors.append(f"predictions: file not found: {p}")
    for p in cfg.descs:
        if not Path(p).is_file():
            errors.append(f"desc: file not found: {p}")
    if cfg.dtype not in DTYPES:
        errors.append(f"dtype: must be one of {sorted(DTYPES)}")
    if cfg.architecture is not None:
        errors += [f"architecture: {e}" for e in cfg.architecture.errors()]
    if cfg.run.batch < 1 or cfg.run.accumulation < 1 or cfg.run.epochs < 0:
        errors.append("run: batch and accumulation must be >= 1 and epochs >= 0")
    if cfg.run.lr < 0:
        errors.append("run: lr must be >= 0")

    if cfg.command == "pretrain":
        if cfg.architecture is None and "model" not in cfg.paths and "resume" not in cfg.paths:
            errors.append("architecture: pretrain needs a starting model, a resume checkpoint or a descriptor")
        if "model" not in cfg.paths and "resume" not in cfg.paths and "vocab" not in cfg.paths:
            errors.append("vocab: required when pre-training from scratch")
    elif cfg.command == "distill":
        if cfg.architecture is None:
            errors.append("student_desc: distill needs a student descriptor")
        teacher = _peek_desc(cfg.paths.get("teacher"))
        if teacher is not None and cfg.architecture is not None and not cfg.architecture.errors():
            errors += [f"objective: {e}" for e in objective_errors(cfg.objective, cfg.architecture, teacher)]
            if cfg.objective in ("eq2", "recursive") and not teacher.depth % cfg.architecture.depth:
                try:
                    cfg.distill.eq2_lambdas(cfg.architecture.depth)
                except DistillationError as exc:
                    errors.append(f"distill: {exc}")
            elif cfg.objective == "eq1":
                try:
                    cfg.distill.eq1_lambdas()
                except DistillationError as exc:
                    errors.append(f"distill: {exc}")
            if cfg.init_from_teacher and (cfg.architecture.hidden != teacher.hidden or cfg.architecture.recursive):
                errors.append("init_from_teacher: needs a non-recursive student of the teacher's width")
    elif cfg.command in ("finetune", "evaluate"):
        if cfg.task not in TASK_HEADS and (cfg.command == "finetune" or "data" in cfg.paths):
            errors.append(f"task: must be one of {sorted(TASK_HEADS)}")
        if cfg.command == "evaluate" and "data" not in cfg.paths and "corpus" not in cfg.paths:
            errors.append("data: evaluate needs --data (task file) or --corpus (masked-LM loss)")
        ckpt_meta = _peek_meta(cfg.paths.get("model"))
        if cfg.command == "evaluate" and "data" in cfg.paths and ckpt_meta is not None:
            kind = ckpt_meta.get("head_kind")
            if kind is None:
                errors.append("model: checkpoint carries no task head; fine-tune it first")
            elif cfg.task in TASK_HEADS and kind != TASK_HEADS[cfg.task]:
                errors.append(f"task: checkpoint head is {kind} but task {cfg.task} needs {TASK_HEADS[cfg.task]}")
    elif cfg.command == "mine-corners":
        if len(cfg.predictions) < 2:
            errors.append("predictions: need at least two prediction files")
    elif cfg.command == "profile":
        if not (cfg.presets or cfg.descs or cfg.reference_models or cfg.architecture is not None):
            errors.append("profile: give --desc, --preset, --reference-models or an [architecture] section")
        if cfg.seq_len < 1:
            errors.append("seq_len: must be >= 1")
        if cfg.latency_runs == 1:
            errors.append("latency_runs: need 0 or at least 2 runs")
    return errors


def _peek(path) -> Optional[Checkpoint]:
    if path is None or not Path(path).is_file():
        return None
    try:
        return load_checkpoint(path)
    except Exception:  # reported properly when the command runs
        return None


def _peek_desc(path) -> Optional[ArchitectureDescriptor]:
    ckpt = _peek(path)
    return None if ckpt is None else ckpt.desc


def _peek_meta(path) -> Optional[Dict[str, str]]:
    ckpt = _peek(path)
    return None if ckpt is None else ckpt.meta


# -- commands -----------------------------------------------------------------------


def _mlm_settings(run: RunConfig) -> MlmSettings:
    return MlmSettings(run.mlm_rate, run.mlm_mask_frac, run.mlm_random_frac)


def _batcher(cfg: CliConfig, path: str, vocab: Vocabulary, max_len: int, seed: int) -> CorpusBatcher:
    return CorpusBatcher(read_corpus(path), vocab, max_len, cfg.run.batch, seed, _mlm_settings(cfg.run),
                         lowercase=cfg.run.lowercase)


def _vocab_for(cfg: CliConfig, ckpt: Optional[Checkpoint]) -> Vocabulary:
    if "vocab" in cfg.paths:
        return load_vocab(cfg.paths["vocab"])
    vocab = ckpt.vocabulary() if ckpt is not None else None
    if vocab is None:
        raise ConfigError(["vocab: checkpoint has no embedded vocabulary; pass --vocab"])
    return vocab


def _max_len(cfg: CliConfig, desc: ArchitectureDescriptor) -> int:
    return min(cfg.run.max_len, desc.max_positions)


def _plot_log(cfg: CliConfig, result_log, title: str) -> None:
    if result_log:
        from .plotting import plot_loss_curves

        plot_loss_curves(result_log, cfg.out / "loss.png", title)


def cmd_pretrain(cfg: CliConfig) -> None:
    dtype = DTYPES[cfg.dtype]
    resume = load_checkpoint(cfg.paths["resume"]) if "resume" in cfg.paths else None
    start = load_checkpoint(cfg.paths["model"]) if "model" in cfg.paths else None
    if resume is not None:
        model = resume.build_model()
    elif start is not None:
        model = start.build_model()
    else:
        model = build_model(cfg.architecture, cfg.run.seed, dtype)
    vocab = _vocab_for(cfg, resume or start)
    if len(vocab) != model.desc.vocab_size:
        raise ConfigError([f"vocab: {len(vocab)} tokens but the model expects {model.desc.vocab_size}"])
    corpus = _batcher(cfg, cfg.paths["corpus"], vocab, _max_len(cfg, model.desc), cfg.run.seed)
    result = pretrain_mlm(model, corpus, cfg.run, cfg.out, resume=resume)
    records = [{"task": "mlm", "metric": "train_loss", "value": result.log[-1]["loss"] if result.log else float("nan"),
                "n": len(corpus.ids)}]
    if "eval_corpus" in cfg.paths:
        held = _batcher(cfg, cfg.paths["eval_corpus"], vocab, _max_len(cfg, model.desc), cfg.run.seed + 1)
        records.append({"task": "mlm", "metric": "eval_loss", "value": evaluate_mlm(model, held.epoch(0)),
                        "n": len(held.ids)})
    write_report(records, cfg.out / "report.tsv")
    _plot_log(cfg, result.log, "masked-LM pre-training")
    print(f"pretrain: {len(result.log)} steps, final loss {records[0]['value']:.4f} -> {cfg.out}")


def cmd_distill(cfg: CliConfig) -> None:
    t_ckpt = load_checkpoint(cfg.paths["teacher"])
    teacher = t_ckpt.build_model()
    vocab = _vocab_for(cfg, t_ckpt)
    desc = cfg.architecture
    if desc.vocab_size != len(vocab):
        raise ConfigError([f"architecture: vocab_size {desc.vocab_size} but the vocabulary has {len(vocab)} tokens"])
    student = build_model(desc, cfg.run.seed, teacher.dtype)
    if cfg.init_from_teacher:
        init_student_from_teacher(student, teacher)
    corpus = _batcher(cfg, cfg.paths["corpus"], vocab, _max_len(cfg, desc), cfg.run.seed)
    result = distill_pretrain(student, teacher, corpus, cfg.distill, cfg.run, cfg.objective, cfg.out)
    _plot_log(cfg, result.log, f"distillation ({cfg.objective})")
    final = result.log[-1]["loss"] if result.log else float("nan")
    print(f"distill[{cfg.objective}]: {len(result.log)} steps, final loss {final:.4f} -> {cfg.out}")


def _load_task_split(task: str, path: str, labels: Optional[List[str]]):
    if task == "ner":
        if labels is None:
            raise ConfigError(["labels: NER needs a label file listing its entity classes"])
        return load_conll(path, labels)
    if task == "re":
        return load_re(path, labels or RE_LABELS)
    if task == "nli":
        return load_pairs(path, labels or NLI_LABELS)
    return load_cls(path, labels or ICN_LABELS)


def _task_labels(cfg: CliConfig) -> Optional[List[str]]:
    return load_label_file(cfg.paths["labels"]) if "labels" in cfg.paths else None


def _emit_report(cfg: CliConfig, report: MetricsReport, tag: str) -> None:
    from .plotting import plot_confusion_matrix

    write_report(report.records(), cfg.out / "report.tsv")
    if report.predictions is not None:
        flat = report.predictions if cfg.task != "ner" else [" ".join(p) for p in report.predictions]
        write_predictions(flat, cfg.out / "predictions.tsv")
    if report.confusion is not None:
        plot_confusion_matrix(report.confusion, report.label_order, cfg.out / "confusion.png",
                              f"{cfg.task} ({tag})")
    print(f"{tag}: {cfg.task} {report.metric} = {report.value:.4f} (n={report.n}) -> {cfg.out}")


def cmd_finetune(cfg: CliConfig) -> None:
    ckpt = load_checkpoint(cfg.paths["model"])
    model = ckpt.build_model()
    vocab = _vocab_for(cfg, ckpt)
    labels = _task_labels(cfg)
    train = _load_task_split(cfg.task, cfg.paths["train"], labels)
    eval_ = _load_task_split(cfg.task, cfg.paths["eval"], labels)
    dataset = make_task_dataset(cfg.task, train, eval_, vocab, _max_len(cfg, model.desc), labels)
    head = TaskHead(dataset.head_kind, model.desc.hidden, len(dataset.labels), cfg.run.seed,
                    model.desc.dropout, model.dtype)
    cfg.out.mkdir(parents=True, exist_ok=True)
    result, report = finetune(model, head, dataset, cfg.run, cfg.out, vocab=vocab)
    _plot_log(cfg, result.log, f"fine-tuning ({cfg.task})")
    _emit_report(cfg, report, "finetune")


def cmd_evaluate(cfg: CliConfig) -> None:
    ckpt = load_checkpoint(cfg.paths["model"])
    model = ckpt.build_model()
    vocab = _vocab_for(cfg, ckpt)
    cfg.out.mkdir(parents=True, exist_ok=True)
    if "data" not in cfg.paths:
        corpus = _batcher(cfg, cfg.paths["corpus"], vocab, _max_len(cfg, model.desc), cfg.run.seed)
        loss = evaluate_mlm(model, corpus.epoch(0))
        write_report([{"task": "mlm", "metric": "loss", "value": loss, "n": len(corpus.ids)}],
                     cfg.out / "report.tsv")
        print(f"evaluate: mlm loss = {loss:.4f} -> {cfg.out}")
        return
    labels = ckpt.meta["labels"].split(",")
    head_arrays = ckpt.group("head.")
    head = TaskHead(ckpt.meta["head_kind"], model.desc.hidden, len(labels), 0, model.desc.dropout, model.dtype)
    for name, arr in head_arrays.items():
        head.params["head." + name].data = arr
    raw_labels = _task_labels(cfg)
    if cfg.task == "ner" and raw_labels is None:
        # recover the entity classes from the stored BIO tag list
        raw_labels = sorted({t[2:] for t in labels if t != "O"}, key=lambda c: labels.index("B-" + c))
    data = _load_task_split(cfg.task, cfg.paths["data"], raw_labels)
    dataset = make_task_dataset(cfg.task, data, data, vocab, _max_len(cfg, model.desc),
                                labels if cfg.task != "ner" else None)
    if list(dataset.labels) != labels:
        raise ConfigError([f"labels: data label space {dataset.labels} differs from the checkpoint's {labels}"])
    model.eval()
    _emit_report(cfg, evaluate_task(model, head, dataset), "evaluate")


def cmd_profile(cfg: CliConfig) -> None:
    records = []
    if cfg.reference_models:
        records += reference_model_records(cfg.seq_len, cfg.latency_runs)
    for name in cfg.presets:
        if name == "mobile":
            records.append(profile(name, BottleneckProfile(), cfg.seq_len))
        else:
            records.append(profile(name, preset(name), cfg.seq_len, latency_runs=cfg.latency_runs, seed=cfg.run.seed))
    for path in cfg.descs:
        records.append(profile(Path(path).stem, ArchitectureDescriptor.load(path), cfg.seq_len,
                               latency_runs=cfg.latency_runs, seed=cfg.run.seed))
    if not records and cfg.architecture is not None:
        records.append(profile("architecture", cfg.architecture, cfg.seq_len, latency_runs=cfg.latency_runs,
                               seed=cfg.run.seed))
    cfg.out.mkdir(parents=True, exist_ok=True)
    sys.stdout.write(emit_efficiency_table(records, cfg.out / "efficiency.tsv"))
    from .plotting import plot_efficiency

    plot_efficiency(records, cfg.out / "efficiency.png")


def cmd_mine_corners(cfg: CliConfig) -> None:
    sets: List[PredictionSet] = [read_predictions(p, Path(p).stem) for p in cfg.predictions]
    corners = mine_corner_cases(sets)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / "corner_cases.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(["index"] + [s.model for s in sets]) + "\n")
        for i in corners:
            fh.write("\t".join([str(i)] + [s.labels[i] for s in sets]) + "\n")
    write_report([{"task": "corners", "metric": "fraction", "value": len(corners) / max(len(sets[0]), 1),
                   "n": len(sets[0])}], cfg.out / "report.tsv")
    print(f"mine-corners: {len(corners)} of {len(sets[0])} items where the models disagree -> {cfg.out}")


HANDLERS = {
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "profile": cmd_profile,
    "mine-corners": cmd_mine_corners,
}


# -- argument parsing ------------------------------------------------------------------


def _common(parser: argparse.ArgumentParser, top: bool = False) -> None:
    default = None if top else argparse.SUPPRESS
    parser.add_argument("--config", default=default, help="INI-style config file")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--out", default=default, help="output directory (default: out)")
    parser.add_argument("--print-defaults", action="store_true", default=False if top else argparse.SUPPRESS,
                        help="print a config file with every default and exit")


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--accumulation", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--dtype", choices=sorted(DTYPES))


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clindistil", description="Compact clinical encoders: "
                                     "pre-train, distil, fine-tune, evaluate and profile.")
    _common(parser, top=True)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("pretrain", help="masked-LM (continual) pre-training")
    _common(p)
    _run_flags(p)
    p.add_argument("--corpus")
    p.add_argument("--eval-corpus", dest="eval_corpus")
    p.add_argument("--vocab")
    p.add_argument("--model", help="checkpoint to continue pre-training from")
    p.add_argument("--resume", help="mid-run checkpoint to resume")
    p.add_argument("--desc", dest="desc_file", help="architecture descriptor for a fresh model")
    p.add_argument("--preset", dest="student_preset", choices=sorted(("teacher", "distil", "tiny", "minialbert")))

    p = sub.add_parser("distill", help="distillation pre-training of a student")
    _common(p)
    _run_flags(p)
    p.add_argument("--objective", choices=("eq1", "eq2", "recursive"), default="eq1")
    p.add_argument("--teacher")
    p.add_argument("--student-desc", dest="student_desc")
    p.add_argument("--student-preset", dest="student_preset")
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--init-from-teacher", dest="init_from_teacher", action="store_true")

    for name, text in (("finetune", "fine-tune on a downstream task"), ("evaluate", "evaluate a checkpoint")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _run_flags(p)
        p.add_argument("--model")
        p.add_argument("--task", choices=sorted(TASK_HEADS))
        p.add_argument("--labels", help="label file (one label per line)")
        p.add_argument("--vocab")
        if name == "finetune":
            p.add_argument("--train")
            p.add_argument("--eval")
        else:
            p.add_argument("--data")
            p.add_argument("--corpus", help="score masked-LM loss on this corpus instead")

    p = sub.add_parser("profile", help="efficiency table: params, GMACs, latency, size")
    _common(p)
    p.add_argument("--desc", action="append", help="descriptor file (repeatable)")
    p.add_argument("--preset", action="append", choices=("teacher", "distil", "tiny", "minialbert", "mobile"))
    p.add_argument("--reference-models", dest="reference_models", action="store_true")
    p.add_argument("--seq-len", dest="seq_len", type=int, default=256)
    p.add_argument("--latency-runs", dest="latency_runs", type=int, default=0)

    p = sub.add_parser("mine-corners", help="items where at least two models disagree")
    _common(p)
    p.add_argument("predictions", nargs="+", help="prediction files (index<TAB>label)")
    return parser


def _normalise(args: argparse.Namespace) -> argparse.Namespace:
    for key, default in (("config", None), ("seed", None), ("out", "out"), ("print_defaults", False)):
        if getattr(args, key, None) is None:
            setattr(args, key, default)
    return args


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = _normalise(parser.parse_args(argv))
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.print_defaults:
        sys.stdout.write(default_config_text())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("clindistil: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = build_config(args)
        errors = validate_config(cfg)
        if errors:
            raise ConfigError(errors)
        HANDLERS[cfg.command](cfg)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and categorise
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
