import configparser
import hashlib
import subprocess
import sys
from pathlib import Path

import pytest

from clindistil.cli import (EXIT_CONFIG, EXIT_OK, EXIT_USAGE, CliConfig, build_config, default_config_text,
                            make_parser, run, validate_config)
from clindistil.models import ArchitectureDescriptor, preset
from clindistil.synthetic import lexical_ner, make_vocab, markov_corpus, separable_cls, word_list
from clindistil.tasks import read_predictions, read_report
from clindistil.training import RunConfig, load_checkpoint, read_log

WORDS = word_list("w", 20)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Toy workspace: vocabulary, corpus, descriptors and a briefly pre-trained teacher."""
    root = tmp_path_factory.mktemp("cli")
    filler, cues = word_list("f", 10), ["pos", "neg"]
    ents = {"PR": word_list("p", 4), "TR": word_list("t", 4)}
    vocab = make_vocab(WORDS, filler, cues, *ents.values())
    (root / "vocab.txt").write_text("\n".join(vocab.tokens) + "\n")
    (root / "corpus.txt").write_text("\n".join(markov_corpus(WORDS, 60, 0)) + "\n")
    V = len(vocab)
    ArchitectureDescriptor(V, 16, 4, 2, max_positions=16, dropout=0.0).save(root / "teacher.cfg")
    ArchitectureDescriptor(V, 8, 2, 2, max_positions=16, dropout=0.0).save(root / "tiny.cfg")
    ArchitectureDescriptor(V, 8, 1, 2, max_positions=16, recursive=True, recursion_depth=2,
                           adapter_bottleneck=2).save(root / "rec.cfg")
    preset("distil").save(root / "distil.cfg")
    code = run(["pretrain", "--desc", str(root / "teacher.cfg"), "--vocab", str(root / "vocab.txt"),
                "--corpus", str(root / "corpus.txt"), "--seed", "1", "--max-steps", "5", "--batch", "8",
                "--out", str(root / "teacher")])
    assert code == EXIT_OK

    def cls_file(name, seed):
        rows = separable_cls(filler, cues, ["Malignancy", "No Malignancy"], 12, seed)
        (root / name).write_text("text\tlabel\n" + "".join(f"{r.text}\t{r.label}\n" for r in rows))

    cls_file("cls_train.tsv", 0)
    cls_file("cls_dev.tsv", 1)
    (root / "cls_labels.txt").write_text("Malignancy\nNo Malignancy\n")
    for name, seed in (("ner_train.conll", 0), ("ner_dev.conll", 1)):
        data = lexical_ner(filler, ents, 8, seed)
        (root / name).write_text("\n\n".join("\n".join(f"{w}\t{t}" for w, t in zip(ws_, ts)) for ws_, ts in
                                             data.sentences) + "\n")
    (root / "ner_labels.txt").write_text("PR\nTR\n")
    return root


def _digest(paths):
    return {str(p): hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in paths}


# -- examples ---------------------------------------------------------------------------


def test_distill_end_to_end(ws, capsys):
    out = ws / "d_eq2"
    inputs = [ws / "teacher" / "final.ckpt", ws / "tiny.cfg", ws / "corpus.txt"]
    before = _digest(inputs)
    code = run(["distill", "--objective", "eq2", "--teacher", str(ws / "teacher" / "final.ckpt"),
                "--student-desc", str(ws / "tiny.cfg"), "--corpus", str(ws / "corpus.txt"), "--seed", "7",
                "--max-steps", "6", "--batch", "8", "--out", str(out)])
    assert code == EXIT_OK, capsys.readouterr().err
    assert _digest(inputs) == before
    log = read_log(out / "log.jsonl")
    assert len(log) == 6 and {"embed", "att", "hid", "out", "att.1", "hid.2"} <= set(log[0]["components"])
    ckpt = load_checkpoint(out / "final.ckpt")
    assert ckpt.desc == ArchitectureDescriptor.load(ws / "tiny.cfg") and ckpt.meta["objective"] == "eq2"
    assert (out / "loss.png").stat().st_size > 0


def test_distill_runs_are_byte_identical(ws):
    outs = []
    for tag in ("a", "b"):
        out = ws / f"det_{tag}"
        assert run(["distill", "--objective", "recursive", "--teacher", str(ws / "teacher" / "final.ckpt"),
                    "--student-desc", str(ws / "rec.cfg"), "--corpus", str(ws / "corpus.txt"), "--seed", "3",
                    "--max-steps", "4", "--batch", "8", "--out", str(out)]) == EXIT_OK
        outs.append(out)
    for name in ("log.jsonl", "final.ckpt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_missing_corpus_is_config_error(ws, capsys):
    code = run(["distill", "--teacher", str(ws / "teacher" / "final.ckpt"), "--student-desc", str(ws / "tiny.cfg"),
                "--corpus", str(ws / "nope.txt"), "--seed", "7", "--out", str(ws / "x")])
    assert code == EXIT_CONFIG
    assert "corpus" in capsys.readouterr().err


def test_seed_is_mandatory(ws, capsys):
    code = run(["distill", "--teacher", str(ws / "teacher" / "final.ckpt"), "--student-desc", str(ws / "tiny.cfg"),
                "--corpus", str(ws / "corpus.txt"), "--out", str(ws / "x")])
    assert code == EXIT_CONFIG and "seed" in capsys.readouterr().err


def test_profile_one_record(ws, capsys):
    out = ws / "prof"
    assert run(["profile", "--desc", str(ws / "distil.cfg"), "--seq-len", "256", "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    rows = (out / "efficiency.tsv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("distil\t65812036\t")
    assert "distil" in printed and "GMACs" in printed
    assert (out / "efficiency.png").stat().st_size > 0


def test_profile_reference_models(ws, capsys):
    assert run(["profile", "--reference-models", "--out", str(ws / "prof_all")]) == EXIT_OK
    assert len((ws / "prof_all" / "efficiency.tsv").read_text().splitlines()) == 6


def test_usage_errors(capsys):
    assert run([]) == EXIT_USAGE
    assert run(["train"]) == EXIT_USAGE
    assert run(["distill", "--objective", "eq9"]) == EXIT_USAGE
    assert run(["profile", "--seq-len", "abc"]) == EXIT_USAGE


def test_print_defaults(capsys):
    assert run(["--print-defaults"]) == EXIT_OK
    text = capsys.readouterr().out
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    assert set(cp.sections()) == {"run", "distill", "architecture", "paths"}
    assert {"seed", "lr", "batch", "accumulation", "epochs", "warmup", "eval_interval",
            "checkpoint_interval"} <= set(cp["run"])
    assert set(cp["distill"]) == {"lambdas", "temperature", "mapping", "attention_target"}
    assert text == default_config_text()


def test_config_file_and_flag_precedence(ws, tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("[run]\nseed = 5\nlr = 0.01\nbatch = 4\n[distill]\ntemperature = 3.0\n")
    args = make_parser().parse_args(["distill", "--config", str(cfg_file), "--lr", "0.02",
                                     "--student-desc", str(ws / "tiny.cfg"), "--out", str(tmp_path)])
    cfg = build_config(args)
    assert cfg.run.seed == 5 and cfg.run.lr == 0.02 and cfg.run.batch == 4 and cfg.distill.temperature == 3.0


def test_bad_config_value(ws, tmp_path, capsys):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("[run]\nseed = 5\nbatch = many\n")
    assert run(["profile", "--config", str(cfg_file), "--preset", "tiny", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "run" in capsys.readouterr().err


# -- validate_config ----------------------------------------------------------------------


def _distill_cfg(ws, student, objective, teacher_layers=12, tmp=None):
    from clindistil.models import build_model
    from clindistil.training import make_checkpoint, save_checkpoint

    path = tmp / f"t{teacher_layers}.ckpt"
    if not path.exists():
        save_checkpoint(make_checkpoint(build_model(ArchitectureDescriptor(50, 8, teacher_layers, 2))), path)
    return CliConfig(command="distill", out=tmp, run=RunConfig(seed=1), architecture=student, seed_given=True,
                     objective=objective, paths={"teacher": str(path), "corpus": str(ws / "corpus.txt")})


def test_validate_divisibility(ws, tmp_path):
    errs = validate_config(_distill_cfg(ws, ArchitectureDescriptor(50, 8, 5, 2), "eq2", tmp=tmp_path))
    assert any("divisible" in e for e in errs)


def test_validate_recursive_needs_recursive_student(ws, tmp_path):
    errs = validate_config(_distill_cfg(ws, ArchitectureDescriptor(50, 8, 6, 2), "recursive", tmp=tmp_path))
    assert any("recursive" in e for e in errs)


def test_validate_ok(ws, tmp_path):
    assert validate_config(_distill_cfg(ws, ArchitectureDescriptor(50, 8, 6, 2), "eq2", tmp=tmp_path)) == []


def test_validate_aggregates(ws, tmp_path):
    cfg = _distill_cfg(ws, ArchitectureDescriptor(40, 8, 5, 2), "eq2", tmp=tmp_path)
    cfg.seed_given = False
    cfg.paths["corpus"] = str(tmp_path / "missing.txt")
    errs = validate_config(cfg)
    assert len(errs) >= 4
    assert any(e.startswith("seed") for e in errs) and any(e.startswith("corpus") for e in errs)


# -- fine-tune / evaluate / mine-corners ---------------------------------------------------


@pytest.mark.parametrize("task, train, dev, labels", [
    ("cls", "cls_train.tsv", "cls_dev.tsv", "cls_labels.txt"),
    ("ner", "ner_train.conll", "ner_dev.conll", "ner_labels.txt"),
])
def test_finetune_then_evaluate(ws, task, train, dev, labels, capsys):
    out = ws / f"ft_{task}"
    model = ws / "teacher" / "final.ckpt"
    args = ["finetune", "--model", str(model), "--task", task, "--train", str(ws / train), "--eval", str(ws / dev),
            "--labels", str(ws / labels), "--seed", "2", "--epochs", "1", "--batch", "4", "--out", str(out)]
    assert run(args) == EXIT_OK, capsys.readouterr().err
    report = read_report(out / "report.tsv")
    assert report[0]["task"] == task and report[0]["metric"] == ("exact_f1" if task == "ner" else "macro_f1")
    assert len(read_predictions(out / "predictions.tsv")) == report[0]["n"]
    assert (out / "confusion.png").stat().st_size > 0 and (out / "loss.png").stat().st_size > 0

    eval_out = ws / f"ev_{task}"
    assert run(["evaluate", "--model", str(out / "final.ckpt"), "--task", task, "--data", str(ws / dev),
                "--out", str(eval_out)]) == EXIT_OK, capsys.readouterr().err
    assert read_report(eval_out / "report.tsv") == report
    # same config, same bytes
    assert run(["evaluate", "--model", str(out / "final.ckpt"), "--task", task, "--data", str(ws / dev),
                "--out", str(ws / f"ev2_{task}")]) == EXIT_OK
    assert (eval_out / "report.tsv").read_bytes() == (ws / f"ev2_{task}" / "report.tsv").read_bytes()


def test_evaluate_mlm_loss(ws):
    out = ws / "ev_mlm"
    assert run(["evaluate", "--model", str(ws / "teacher" / "final.ckpt"), "--corpus", str(ws / "corpus.txt"),
                "--out", str(out)]) == EXIT_OK
    rec = read_report(out / "report.tsv")[0]
    assert rec["task"] == "mlm" and rec["value"] > 0


def test_evaluate_head_mismatch(ws, capsys):
    code = run(["evaluate", "--model", str(ws / "teacher" / "final.ckpt"), "--task", "cls",
                "--data", str(ws / "cls_dev.tsv"), "--out", str(ws / "x")])
    assert code == EXIT_CONFIG and "head" in capsys.readouterr().err


def test_mine_corners(ws, tmp_path, capsys):
    for name, labels in (("a", "xxyz"), ("b", "xyyz"), ("c", "xxyy")):
        (tmp_path / f"{name}.tsv").write_text("index\tlabel\n" + "".join(f"{i}\t{l}\n" for i, l in enumerate(labels)))
    out = tmp_path / "mc"
    assert run(["mine-corners", *(str(tmp_path / f"{n}.tsv") for n in "abc"), "--out", str(out)]) == EXIT_OK
    lines = (out / "corner_cases.tsv").read_text().splitlines()
    assert lines == ["index\ta\tb\tc", "1\tx\ty\tx", "3\tz\tz\ty"]
    assert read_report(out / "report.tsv")[0]["value"] == 0.5
    assert run(["mine-corners", str(tmp_path / "a.tsv"), "--out", str(out)]) == EXIT_CONFIG


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "clindistil.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "mine-corners" in res.stdout
