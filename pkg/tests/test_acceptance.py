"""Acceptance criteria 1-12, each at its stated tolerance.

Every test ends in ``verdict(ok, detail)``, which prints a PASS/FAIL line and
asserts; the lines are repeated in the terminal summary.
"""

import copy
import time

import numpy as np

from clindistil import tensor as T
from clindistil.cli import run
from clindistil.distill import (DistillationConfig, eq1_loss, eq2_loss, kl_from_logits, recursive_distill_loss)
from clindistil.models import ArchitectureDescriptor, TaskHead, build_model, count_parameters, preset
from clindistil.plotting import smooth
from clindistil.profiler import (analytic_gmacs, analytic_macs, instrumented_macs, model_size,
                                 reference_model_records)
from clindistil.synthetic import lexical_ner, make_vocab, markov_corpus, separable_cls, topic_corpus, word_list
from clindistil.tasks import (PredictionSet, blue_re_preprocess, classification_metrics, confusion_matrix, exact_f1,
                              make_task_dataset, mine_corner_cases, spans_from_bio)
from clindistil.tensor import Tensor, grad_check, no_grad
from clindistil.text import CorpusBatcher
from clindistil.training import (OptimizerState, RunConfig, ScheduleConfig, adamw_step, distill_pretrain,
                                 evaluate_mlm, finetune, lr_at_step, make_checkpoint, pretrain_mlm, save_checkpoint)

from conftest import scaled_model, toy_batch, toy_desc
from test_tasks import _re, _random_tags, brute_exact, brute_spans
from test_tensor import PRIMITIVES, _primitive, t64

M = 1_000_000


def _within(value, target, rel):
    return abs(value - target) <= rel * target


# 1 ---------------------------------------------------------------------------------------


def test_criterion_01_parameter_budgets(verdict):
    t0 = time.perf_counter()
    counts = {k: count_parameters(preset(k)) for k in ("teacher", "distil", "tiny", "minialbert")}
    targets = {"teacher": 110 * M, "distil": 65 * M, "tiny": 15 * M, "minialbert": 18 * M}
    ok = {k: _within(counts[k], targets[k], 0.05) for k in counts}
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {counts[k] / M:.2f}M vs {targets[k] // M}M±5% {'ok' if ok[k] else 'MISS'}"
                       for k in counts)
    verdict(all(ok.values()) and elapsed < 1, f"{detail} ({elapsed:.3f}s)")


# 2 ---------------------------------------------------------------------------------------


def test_criterion_02_size_column(verdict):
    t0 = time.perf_counter()
    sizes = {k: model_size(preset(k))[1] for k in ("distil", "minialbert", "tiny")}
    checks = [("distil", 248, 0.05), ("minialbert", 68, 0.05), ("tiny", 52, 0.10)]
    ok = all(_within(sizes[k], want, rel) for k, want, rel in checks)
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {sizes[k]:.1f} MiB vs {want}±{rel:.0%}" for k, want, rel in checks)
    verdict(ok and elapsed < 1, f"{detail} ({elapsed:.3f}s)")


# 3 ---------------------------------------------------------------------------------------


def test_criterion_03_gmacs_ordering(verdict):
    t0 = time.perf_counter()
    g = {r.name: r.gmacs for r in reference_model_records(seq_len=256)}
    tiny, mobile, distil, mini, teacher = (g["TinyClinicalBERT"], g["ClinicalMobileBERT"], g["DistilClinicalBERT"],
                                           g["ClinicalMiniALBERT"], g["ClinicalBioBERT"])
    # "≈" between Distil and MiniALBERT: within 5% of each other
    close = abs(distil - mini) <= 0.05 * min(distil, mini)
    ok = tiny < mobile < min(distil, mini) and max(distil, mini) < teacher and close and tiny < 0.25 * teacher
    elapsed = time.perf_counter() - t0
    detail = (f"tiny {tiny:.2f} < mobile {mobile:.2f} < distil {distil:.2f} ≈ minialbert {mini:.2f} "
              f"< teacher {teacher:.2f}; tiny/teacher {tiny / teacher:.3f}")
    verdict(ok and elapsed < 1, f"{detail} ({elapsed:.3f}s)")


# 4 ---------------------------------------------------------------------------------------


def _random_descriptor(rng):
    heads, head_dim = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    hidden = heads * head_dim
    recursive = bool(rng.random() < 0.4)
    return ArchitectureDescriptor(
        int(rng.integers(5, 40)), hidden, 1 if recursive else int(rng.integers(1, 4)), heads,
        mlp_expansion=int(rng.integers(1, 5)), max_positions=16,
        embedding_size=int(rng.integers(1, hidden + 1)) if rng.random() < 0.4 else None,
        segment_embeddings=bool(rng.random() < 0.5), recursive=recursive,
        recursion_depth=int(rng.integers(1, 4)) if recursive else 1,
        adapter_bottleneck=int(rng.integers(0, 4)) if recursive else 0)


def test_criterion_04_gmacs_exactness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(60):
        desc, seq_len, batch = _random_descriptor(rng), int(rng.integers(1, 17)), int(rng.integers(1, 3))
        counted = instrumented_macs(desc, seq_len, batch)
        if analytic_macs(desc, seq_len, batch) != counted or analytic_gmacs(desc, seq_len, batch) != counted / 1e9:
            mismatches += 1
    elapsed = time.perf_counter() - t0
    verdict(mismatches == 0 and elapsed < 60, f"{60 - mismatches}/60 random descriptors exact ({elapsed:.1f}s)")


# 5 ---------------------------------------------------------------------------------------


OBJECTIVES = {
    # student (h≤16, N≤3, V≤50), teacher
    "eq1": (eq1_loss, dict(layers=2), dict(layers=3)),
    "eq2": (eq2_loss, dict(hidden=4, layers=3), dict(layers=3)),
    "recursive": (recursive_distill_loss, dict(layers=1, recursive=True, recursion_depth=3, adapter_bottleneck=3),
                  dict(layers=3)),
}


def _structural_zero(f, p, coords=3, step=1e-5):
    """True when the analytic gradient of ``p`` vanishes and central differences agree to rounding level.

    Relative error is 0/0 for such tensors (e.g. the attention key bias when only
    softmax outputs are compared: it shifts every score in a row equally).
    """
    p.zero_grad()
    T.backward(f(p))
    if p.grad is not None and np.max(np.abs(p.grad)) > 1e-12:
        return False
    flat = p.data.reshape(-1)
    for i in np.random.default_rng(0).choice(flat.size, min(coords, flat.size), replace=False):
        old = flat[i]
        flat[i] = old + step
        up = f(p).item()
        flat[i] = old - step
        down = f(p).item()
        flat[i] = old
        if abs(up - down) / (2 * step) > 1e-8:
            return False
    return True


def test_criterion_05_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst, zeros = {}, 0
    for name in PRIMITIVES:
        for seed in range(20):
            r = np.random.default_rng(seed)
            f, shape = _primitive(name, r)
            worst[name] = max(worst.get(name, 0.0), grad_check(f, t64(r.standard_normal(shape))))
    for name, (objective, s_kw, t_kw) in OBJECTIVES.items():
        for seed in range(20):
            teacher = scaled_model(toy_desc(vocab=40, **t_kw), 2 * seed)
            student = scaled_model(toy_desc(vocab=40, **s_kw), 2 * seed + 1)
            batch = toy_batch(40, seed=seed)
            cfg = DistillationConfig()
            if student.desc.hidden != teacher.desc.hidden:
                cfg.build_projections(student.desc, teacher.desc, rng_seed=seed, dtype=np.float64)
                for proj in cfg.projections.values():
                    proj.weight.data *= 10
            with no_grad():
                t_out = teacher(batch.input_ids, batch.attention_mask)
            f = lambda _: objective(student(batch.input_ids, batch.attention_mask), t_out, batch, cfg)[0]
            targets = list(student.params.values()) + [p.weight for p in cfg.projections.values()]
            for p in targets:
                if _structural_zero(f, p):
                    zeros += 1
                    continue
                worst[name] = max(worst.get(name, 0.0), grad_check(f, p, coords=3, seed=seed))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    detail = (f"{len(PRIMITIVES)} primitives + 3 objectives x 20 seeds, max rel err {max(worst.values()):.1e}, "
              f"{zeros} zero-gradient tensors matched to <1e-8 absolute"
              + (f", failing {sorted(bad)}" if bad else "") + f" ({elapsed:.0f}s)")
    verdict(not bad and elapsed < 300, detail)


# 6 ---------------------------------------------------------------------------------------


def test_criterion_06_mimicry_fixed_points(verdict):
    t0 = time.perf_counter()
    teacher = scaled_model(toy_desc(vocab=40, layers=3), 0)
    student = copy.deepcopy(teacher)
    batch = toy_batch(40, seed=1)
    t_out, s_out = (m(batch.input_ids, batch.attention_mask) for m in (teacher, student))
    _, c1 = eq1_loss(s_out, t_out, batch, DistillationConfig())
    eq1_ok = c1["output"] == 0.0 and c1["align"] == 0.0
    eq2_vals = {}
    for target in ("scores", "probabilities"):
        _, c2 = eq2_loss(s_out, t_out, batch, DistillationConfig(attention_target=target))
        eq2_vals.update({f"{target}:{k}": v for k, v in c2.items() if k.split(".")[0] in ("embed", "att", "hid")})
    eq2_ok = all(v == 0.0 for v in eq2_vals.values())
    elapsed = time.perf_counter() - t0
    detail = (f"eq1 output={c1['output']!r} align={c1['align']!r}; eq2 {len(eq2_vals)} alignment terms, "
              f"max {max(eq2_vals.values())!r} ({elapsed:.2f}s)")
    verdict(eq1_ok and eq2_ok and elapsed < 10, detail)


# 7 ---------------------------------------------------------------------------------------


def test_criterion_07_distillation_learning(verdict):
    t0 = time.perf_counter()
    words = word_list("w", 40)
    vocab = make_vocab(words)
    lines = markov_corpus(words, 500, 0)
    held = CorpusBatcher(markov_corpus(words, 100, 99), vocab, 16, 50, seed=99)
    teacher = build_model(ArchitectureDescriptor(len(vocab), 32, 4, 2, max_positions=16, dropout=0.0), 0, np.float64)
    pretrain_mlm(teacher, CorpusBatcher(lines, vocab, 16, 16, seed=0),
                 RunConfig(seed=0, lr=3e-3, epochs=1000, max_steps=1000, warmup=20, weight_decay=0.01))
    teacher.eval()
    t_logits = []
    with no_grad():
        for b in held.epoch(0):
            t_logits.append(teacher(b.input_ids, b.attention_mask).logits.data[b.attention_mask.astype(bool)])

    def held_kl(student):
        student.eval()
        vals = []
        with no_grad():
            for b, tl in zip(held.epoch(0), t_logits):
                sl = student(b.input_ids, b.attention_mask).logits.data[b.attention_mask.astype(bool)]
                vals.append(kl_from_logits(tl, Tensor(sl)).item())
        return float(np.mean(vals))

    ratios, wins = {"eq1": [], "eq2": []}, {"eq1": 0, "eq2": 0}
    for seed in range(20):
        for objective, hidden in (("eq1", 32), ("eq2", 16)):
            desc = ArchitectureDescriptor(len(vocab), hidden, 2, 2, max_positions=16, dropout=0.0)
            student, fresh = build_model(desc, seed + 1, np.float64), build_model(desc, seed + 1, np.float64)
            log = distill_pretrain(student, teacher, CorpusBatcher(lines, vocab, 16, 16, seed=seed),
                                   DistillationConfig(), RunConfig(seed=seed, lr=3e-3, epochs=1000, max_steps=300,
                                                                   warmup=20, weight_decay=0.01), objective).log
            curve = smooth([r["loss"] for r in log], 10)
            ratios[objective].append(curve[-1] / curve[9])
            wins[objective] += held_kl(student) < held_kl(fresh)
    elapsed = time.perf_counter() - t0
    reduced = {k: sum(r <= 0.5 for r in v) for k, v in ratios.items()}
    ok = all(n == 20 for n in reduced.values()) and all(w >= 19 for w in wins.values()) and elapsed < 600
    detail = "; ".join(f"{k}: loss ≥50% lower in {reduced[k]}/20 (worst end/base {max(ratios[k]):.2f}), "
                       f"held-out KL beats fresh in {wins[k]}/20" for k in ratios) + f" ({elapsed:.0f}s)"
    verdict(ok, detail)


# 8 ---------------------------------------------------------------------------------------


def test_criterion_08_continual_learning(verdict):
    t0 = time.perf_counter()
    words_a, words_b = word_list("a", 20), word_list("b", 20)
    assert not set(words_a) & set(words_b)
    vocab = make_vocab(words_a, words_b)
    desc = ArchitectureDescriptor(len(vocab), 16, 2, 2, max_positions=12, dropout=0.0)
    wins, gaps = 0, []
    for seed in range(20):
        model = build_model(desc, seed)
        corpus_a = CorpusBatcher(topic_corpus(words_a, 200, seed), vocab, 12, 16, seed=seed)
        corpus_b = CorpusBatcher(topic_corpus(words_b, 200, seed + 100), vocab, 12, 16, seed=seed)
        held_b = CorpusBatcher(topic_corpus(words_b, 60, seed + 200), vocab, 12, 20, seed=seed)
        a_only = pretrain_mlm(model, corpus_a, RunConfig(seed=seed, lr=3e-3, epochs=100, max_steps=150, warmup=10,
                                                         weight_decay=0.01)).checkpoint.build_model()
        pretrain_mlm(model, corpus_b, RunConfig(seed=seed, lr=3e-3, epochs=100, max_steps=100, warmup=10,
                                                weight_decay=0.01))
        loss_a, loss_ab = evaluate_mlm(a_only, held_b.epoch(0)), evaluate_mlm(model, held_b.epoch(0))
        wins += loss_ab < loss_a
        gaps.append(loss_a - loss_ab)
    elapsed = time.perf_counter() - t0
    verdict(wins >= 19 and elapsed < 300,
            f"A→B beats A-only on held-out B in {wins}/20 seeds, smallest gap {min(gaps):.3f} nats ({elapsed:.0f}s)")


# 9 ---------------------------------------------------------------------------------------


def test_criterion_09_finetuning_sanity(verdict):
    t0 = time.perf_counter()
    filler, cues = word_list("f", 30), ["pos", "neg"]
    ents = {"PR": word_list("p", 6), "TR": word_list("t", 6)}
    vocab = make_vocab(filler, cues, *ents.values())
    desc = ArchitectureDescriptor(len(vocab), 64, 2, 2, max_positions=16)
    # lowest of the fine-tuning learning rates that reaches the bar; batch 16, weight decay 0.01, 3 epochs
    cfg = RunConfig(seed=0, lr=5e-5, batch=16, epochs=3, weight_decay=0.01)

    labels = ["Malignancy", "No Malignancy"]
    cls = make_task_dataset("cls", separable_cls(filler, cues, labels, 3000, 1),
                            separable_cls(filler, cues, labels, 200, 2), vocab, 12, labels=labels)
    _, cls_report = finetune(build_model(desc, 0), TaskHead(cls.head_kind, 64, 2, 0), cls, cfg)
    ner = make_task_dataset("ner", lexical_ner(filler, ents, 3000, 1), lexical_ner(filler, ents, 200, 2), vocab, 16)
    _, ner_report = finetune(build_model(desc, 0), TaskHead(ner.head_kind, 64, len(ner.labels), 0), ner, cfg)
    acc, f1 = cls_report.scores["accuracy"], ner_report.scores["exact_f1"]
    elapsed = time.perf_counter() - t0
    verdict(acc >= 0.95 and f1 >= 0.9 and elapsed < 300,
            f"CLS eval accuracy {acc:.3f} (≥0.95), NER exact F1 {f1:.3f} (≥0.9) at lr 5e-5 ({elapsed:.0f}s)")


# 10 --------------------------------------------------------------------------------------


RE_ROWS = [
    ("was discharged to home to be followed for her coronary artery disease following two failed bypass graft "
     "procedure", [("coronary artery disease", "treatment"), ("two failed bypass graft procedure", "problem")],
     "was discharged to home to be followed medically for her @treatment$ following @problem$"),
    ("She has an elevated cholesterol controlled with Zocor",
     [("elevated cholesterol", "problem"), ("Zocor", "treatment")],
     "She has an @problem$ controlled with @treatment$"),
    ("Bactrim could be a cause of these abnormalities",
     [("Bactrim", "treatment"), ("these abnormalities", "problem")],
     "@treatment$ could be a cause of @problem$"),
    ("A lung biopsy was performed , revealing chorio carcinoma",
     [("lung biopsy", "test"), ("chorio carcinoma", "problem")],
     "A @test$ was performed , revealing @problem$"),
]


def _prf_oracle(gold, pred, scheme):
    classes = sorted(set(gold) | set(pred))
    if scheme == "accuracy":
        return sum(g == p for g, p in zip(gold, pred)) / len(gold)
    stats = [(sum(g == c and p == c for g, p in zip(gold, pred)), sum(p == c for p in pred),
              sum(g == c for g in gold)) for c in classes]
    if scheme == "micro_f1":
        tp, npred, ngold = (sum(s[i] for s in stats) for i in range(3))
        return 2 * tp / (npred + ngold)
    return sum(2 * tp / (np_ + ng) if np_ + ng else 0.0 for tp, np_, ng in stats) / len(classes)


def test_criterion_10_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    failures = {}

    def check(name, ok):
        failures[name] = failures.get(name, 0) + (not ok)

    for _ in range(1000):
        tags = _random_tags(rng, int(rng.integers(0, 21)))
        check("spans_from_bio", spans_from_bio(tags) == brute_spans(tags))

        gold = [spans_from_bio(_random_tags(rng, 8)) for _ in range(int(rng.integers(1, 5)))]
        pred = [spans_from_bio(_random_tags(rng, 8)) if rng.random() < 0.5 else set(g) for g in gold]
        check("exact_f1", np.allclose(exact_f1(gold, pred), brute_exact(gold, pred), rtol=0, atol=1e-12))

        n, k = int(rng.integers(1, 15)), int(rng.integers(1, 5))
        g_lab = [f"c{i}" for i in rng.integers(k, size=n)]
        p_lab = [f"c{i}" for i in rng.integers(k, size=n)]
        for scheme in ("accuracy", "micro_f1", "macro_f1"):
            check(scheme, abs(classification_metrics(g_lab, p_lab, scheme) - _prf_oracle(g_lab, p_lab, scheme)) < 1e-12)

        order = sorted(set(g_lab) | set(p_lab))
        want = np.zeros((len(order), len(order)), dtype=np.int64)
        for g, p in zip(g_lab, p_lab):
            want[order.index(g), order.index(p)] += 1
        check("confusion_matrix", np.array_equal(confusion_matrix(g_lab, p_lab, order), want))

        m, n = int(rng.integers(2, 5)), int(rng.integers(0, 12))
        sets = [[str(x) for x in rng.integers(3, size=n)] for _ in range(m)]
        want_c = [i for i in range(n) if len({s[i] for s in sets}) > 1]
        check("mine_corner_cases", mine_corner_cases([PredictionSet(f"m{j}", s) for j, s in enumerate(sets)]) == want_c)

    re_hits = [blue_re_preprocess(_re(raw, *mentions)) == want for raw, mentions, want in RE_ROWS]
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in failures.items() if v}
    detail = (f"7 metrics x 1000 instances, {sum(failures.values())} mismatches"
              + (f" {bad}" if bad else "") + f"; RE rows verbatim {sum(re_hits)}/4"
              + (f" (row(s) {[i + 1 for i, h in enumerate(re_hits) if not h]} differ)" if not all(re_hits) else "")
              + f" ({elapsed:.1f}s)")
    verdict(not bad and all(re_hits) and elapsed < 60, detail)


# 11 --------------------------------------------------------------------------------------


def test_criterion_11_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    words = word_list("w", 20)
    vocab = make_vocab(words)
    (tmp_path / "corpus.txt").write_text("\n".join(markov_corpus(words, 64, 0)) + "\n")
    teacher = build_model(ArchitectureDescriptor(len(vocab), 16, 4, 2, max_positions=16), 5)
    save_checkpoint(make_checkpoint(teacher, vocab=vocab), tmp_path / "teacher.ckpt")
    ArchitectureDescriptor(len(vocab), 8, 2, 2, max_positions=16).save(tmp_path / "student.cfg")
    (tmp_path / "run.cfg").write_text("[run]\ncheckpoint_interval = 5\n")
    outs = []
    for tag in ("first", "second"):
        out = tmp_path / tag
        code = run(["distill", "--objective", "eq2", "--teacher", str(tmp_path / "teacher.ckpt"),
                    "--student-desc", str(tmp_path / "student.cfg"), "--corpus", str(tmp_path / "corpus.txt"),
                    "--seed", "11", "--epochs", "2", "--batch", "8", "--config", str(tmp_path / "run.cfg"),
                    "--out", str(out)])
        assert code == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    same = [n for n in names if (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
    elapsed = time.perf_counter() - t0
    ok = "log.jsonl" in same and "final.ckpt" in same and same == names and elapsed < 300
    verdict(ok, f"{len(same)}/{len(names)} output files byte-identical ({', '.join(names)}) ({elapsed:.1f}s)")


# 12 --------------------------------------------------------------------------------------


def test_criterion_12_scheduler_optimizer(verdict):
    t0 = time.perf_counter()
    errs = []
    for base, warmup, total in ((5e-4, 5000, 100000), (5e-5, 50, 1000), (1.0, 10, 10), (2e-5, 0, 7), (1e-3, 1, 2)):
        s = ScheduleConfig(base, warmup, total)
        closed = lambda k: (base * k / warmup if k < warmup
                            else (0.0 if k == total else base) if total == warmup
                            else base * (total - k) / (total - warmup))
        points = {0, max(warmup - 1, 0), warmup, min(warmup + 1, total), (warmup + total) // 2, max(total - 1, 0),
                  total}
        errs += [abs(lr_at_step(s, k) - closed(k)) for k in points]
    lr_ok = max(errs) <= 1e-15 and lr_at_step(ScheduleConfig(5e-4, 5000, 100000), 5000) == 5e-4

    # decoupled decay: zero gradient multiplies by (1 - lr·wd) each step; Adam recursion by hand
    p = Tensor(np.array([2.0]), requires_grad=True)
    state, want, decay_err = OptimizerState(weight_decay=0.01), 2.0, 0.0
    for _ in range(5):
        adamw_step([("w", p)], {"w": np.zeros(1)}, state, 0.1)
        want *= 1 - 0.1 * 0.01
        decay_err = max(decay_err, abs(p.data[0] - want))
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = OptimizerState(weight_decay=0.01)
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    m, v, x, adam_err = np.zeros(2), np.zeros(2), p.data.copy(), 0.0
    for t, g in enumerate([np.array([0.5, 0.1]), np.array([-0.3, 0.2]), np.array([0.2, -0.7])], start=1):
        adamw_step([("w", p)], {"w": g}, state, lr)
        x = x * (1 - lr * 0.01)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        adam_err = max(adam_err, float(np.max(np.abs(p.data - x))))
    elapsed = time.perf_counter() - t0
    ok = lr_ok and decay_err <= 1e-12 and adam_err <= 1e-12 and elapsed < 1
    verdict(ok, f"lr max boundary error {max(errs):.1e}; decay error {decay_err:.1e}; Adam recursion error "
                f"{adam_err:.1e} ({elapsed:.3f}s)")
