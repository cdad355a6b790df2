"""Zero-shot evaluation, experiment arms, ablation curves and report tables."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from . import distill as K
from . import model as M
from . import train as T
from .config import ARM_NAMES, RunConfig, config_diff
from .data import NUM_CLASSES, encode_pairs
from .errors import DataError, InvariantError, StateError

log = logging.getLogger(__name__)

FOOTER = (
    "Desk-scale analog: claims are ordinal (arm orderings and signs of paired deltas over seeds). "
    "Absolute accuracies are not comparable to full-scale results."
)
RANDOM_INIT_NOTE = (
    "random_init approximates a separately distilled small multilingual model: random init, "
    "top-layer distillation, unfrozen embeddings (its true logit-distillation recipe is out of scope)."
)
# reference rows quoted from the published full-scale experiments
REFERENCE = {
    "table1": {"teacher": 70.5, "light": 70.3, "uniform": 68.2, "drop": 67.1, "random_init": 65.2},
    "table2": {"light": 70.3, "no_freeze": 69.7, "delta": 0.6},
    "table3": {"light": 70.3, "uniform": 68.6, "delta": 1.7},
}


# ------------------------------------------------------------------ accuracy


def predictions(model, examples, seq_len=None):
    if len(examples) == 0:
        raise DataError("cannot evaluate on an empty set")
    batch, _ = encode_pairs(examples, seq_len or model.config.max_seq_len)
    return M.predict_logits(model, batch).argmax(axis=1)


def accuracy(model, examples, seq_len=None):
    """Fraction of argmax predictions equal to the labels (dropout off)."""
    pred = predictions(model, examples, seq_len)
    labels = np.array([ex.label for ex in examples])
    return float((pred == labels).mean())


@dataclass(frozen=True)
class EvalReport:
    languages: tuple
    accuracies: tuple
    arm: str = ""
    seed: int = 0
    step: int | None = None

    def __post_init__(self):
        if len(self.languages) != len(self.accuracies):
            raise InvariantError("one accuracy per language expected")
        if len(self.languages) < 2:
            raise DataError("a zero-shot report needs the fine-tuning language and at least one other")

    @property
    def per_language(self):
        return dict(zip(self.languages, self.accuracies))

    @property
    def cross_lingual_avg(self):
        """Mean over languages other than the fine-tuning language (index 0)."""
        return float(np.mean(self.accuracies[1:]))

    @property
    def avg(self):
        return float(np.mean(self.accuracies))

    @property
    def english(self):
        return self.accuracies[0]


def zero_shot_report(model, languages, task_sets, arm="", seed=0, step=None):
    """Accuracy of a model fine-tuned on ``languages[0]`` on every language's test set."""
    missing = [lang for lang in languages if lang not in task_sets]
    if missing:
        raise DataError(f"no test set for language(s) {missing}")
    accs = tuple(accuracy(model, task_sets[lang]) for lang in languages)
    return EvalReport(tuple(languages), accs, arm, seed, step)


def mean_report(reports):
    """Cell-wise mean of reports over fine-tuning repeats."""
    first = reports[0]
    accs = tuple(float(np.mean([r.accuracies[i] for r in reports])) for i in range(len(first.languages)))
    return replace(first, accuracies=accs)


# ---------------------------------------------------------------------- arms

# keys each arm is allowed to change relative to `light`
FACTORS = {
    "light": (),
    "teacher": (),
    "drop": (),
    "uniform": ("distill.strategy",),
    "no_freeze": ("distill.freeze", "finetune.freeze"),
    "random_init": ("distill.freeze", "distill.init", "finetune.freeze"),
}


@dataclass(frozen=True)
class ExperimentArm:
    name: str
    config: RunConfig
    truncate: bool = True
    distill: bool = True

    @property
    def factors(self):
        return FACTORS[self.name]


def make_arm(name, base):
    """Derive arm ``name`` from the light configuration ``base``."""
    if name not in ARM_NAMES:
        raise StateError(f"unknown arm {name!r}")
    d, f = base.distill, base.finetune
    light = replace(base, distill=replace(d, init="teacher", strategy="top", freeze="embeddings"),
                    finetune=replace(f, freeze="embeddings"))
    if name == "uniform":
        cfg = replace(light, distill=replace(light.distill, strategy="uniform"))
    elif name == "no_freeze":
        cfg = replace(light, distill=replace(light.distill, freeze="none"),
                      finetune=replace(light.finetune, freeze="none"))
    elif name == "random_init":
        cfg = replace(light, distill=replace(light.distill, init="random", freeze="none"),
                      finetune=replace(light.finetune, freeze="none"))
    else:
        cfg = light
    return ExperimentArm(name, cfg, truncate=name != "teacher", distill=name not in ("teacher", "drop"))


def check_controlled(arms):
    """Every arm must differ from light in exactly its declared factors."""
    by_name = {a.name: a for a in arms}
    if "light" not in by_name:
        raise StateError("controlled comparison needs the light arm")
    ref = by_name["light"].config
    for arm in arms:
        diff = config_diff(ref, arm.config)
        if diff != sorted(arm.factors):
            raise InvariantError(f"arm {arm.name} differs from light in {diff}, declared {list(arm.factors)}")
    return True


# ------------------------------------------------------------------ pipeline


def pretrain_teacher(run, world, seed, state=None, step_log=None, stop_at=None):
    p = run.pretrain
    job = T.TrainJob("mlm", batch_size=p.batch_size, seq_len=run.model.max_seq_len,
                     schedule=T.Schedule(p.peak_lr, int(p.warmup_fraction * p.steps), p.steps),
                     seed=seed, weight_decay=p.weight_decay, mask_rate=p.mask_rate, log_every=run.log_every)
    from .data import concat_sequences

    return T.run_mlm(run.model, concat_sequences(world.corpora), job, state=state, step_log=step_log,
                     stop_at=stop_at)


def student_config(run):
    return replace(run.model, num_layers=run.distill.student_layers)


def initial_student(arm, teacher, seed):
    d = arm.config.distill
    if d.init == "random":
        return M.init_random(student_config(arm.config), [seed, 5])
    return K.init_student_from_teacher(teacher, d.student_layers)


def distill_plan(arm, student, teacher):
    d = arm.config.distill
    return K.make_plan(student, teacher, d.strategy, d.attn_source, d.freeze, tuple(d.loss_weights))


def distill_job(arm, seed, plan):
    d = arm.config.distill
    return T.TrainJob("distill", batch_size=d.batch_size, seq_len=arm.config.model.max_seq_len,
                      schedule=T.Schedule(d.peak_lr, int(d.warmup_fraction * d.steps), d.steps),
                      seed=seed, plan=plan, weight_decay=d.weight_decay, log_every=arm.config.log_every)


def teacher_cache(run, teacher, world):
    """One inference pass over the distillation corpus, shared by every arm."""
    from .data import concat_sequences

    L_T, L_S = teacher.config.num_layers, run.distill.student_layers
    layers = {L_T}
    if L_T % L_S == 0:
        layers |= {p[1] for p in K.build_mapping("uniform", L_S, L_T).pairs}
    return T.TeacherCache(teacher, concat_sequences(world.corpora), layers)


def finetune(arm, model, world, seed, repeat=0, step_log=None):
    f = arm.config.finetune
    job = T.TrainJob("finetune", batch_size=f.batch_size, seq_len=arm.config.model.max_seq_len,
                     schedule=T.Schedule.constant(f.peak_lr, 1), seed=_ft_seed(seed, repeat),
                     freeze=f.freeze, epochs=f.epochs, weight_decay=f.weight_decay,
                     log_every=arm.config.log_every, constant_lr=True)
    return T.run_finetune(model, world.train, job, NUM_CLASSES, step_log)


def _ft_seed(seed, repeat):
    # identical for every arm: the controlled comparison shares fine-tuning randomness
    return seed * 1000 + 100 + repeat


def evaluate_encoder(arm, encoder, world, seed, step=None, memo=None):
    """Fine-tune ``repeats`` times on the fine-tuning language and average the zero-shot reports.

    ``memo`` (a dict) reuses the result for an encoder already fine-tuned
    under the same fine-tuning config and seed, e.g. light at step 0 and drop.
    """
    key = None
    if memo is not None:
        digest = hashlib.sha256()
        for name, t in encoder.params.items():
            digest.update(name.encode())
            digest.update(t.data.tobytes())
        key = (digest.hexdigest(), arm.config.finetune, seed)
        if key in memo:
            return replace(memo[key], arm=arm.name, step=step)
    tests = dict(zip(world.lang_ids, world.tests))
    reports = [
        zero_shot_report(finetune(arm, encoder, world, seed, r), world.lang_ids, tests, arm.name, seed, step)
        for r in range(arm.config.finetune.repeats)
    ]
    report = mean_report(reports)
    if key is not None:
        memo[key] = report
    return report


@dataclass
class ArmResult:
    report: EvalReport
    curve: list = field(default_factory=list)
    student: M.EncoderModel | None = None
    history: list = field(default_factory=list)


def run_arm_seed(arm, teacher, world, seed, cache=None, eval_every=None, step_log=None,
                 state=None, stop_at=None, memo=None):
    """One arm for one seed: optional init/distillation, then fine-tune and evaluate.

    With ``eval_every`` the student is also fine-tuned and evaluated every
    that many distillation steps (step 0 included); the last point is the
    arm's final report.
    """
    if teacher is None:
        raise StateError("every arm needs the pretrained teacher")
    if not arm.truncate:
        return ArmResult(evaluate_encoder(arm, teacher, world, seed, memo=memo))
    student = initial_student(arm, teacher, seed)
    if not arm.distill:
        return ArmResult(evaluate_encoder(arm, student, world, seed, step=0, memo=memo), student=student)
    plan = distill_plan(arm, student, teacher)
    job = distill_job(arm, seed, plan)
    curve = []

    def hook(step, model):
        if eval_every and step % eval_every == 0 and step < job.schedule.total_steps:
            snapshot = model.copy()
            snapshot.set_trainable(())
            curve.append(evaluate_encoder(arm, snapshot, world, seed, step, memo))
            log.info("%s seed %d step %d xl %.4f", arm.name, seed, step, curve[-1].cross_lingual_avg)

    if state is None:
        state = T.TrainState(0, T.AdamW(student.names(), job.weight_decay, frozen=plan.frozen),
                             np.random.default_rng([seed, 2]))
    student = T.run_distill(teacher, student, plan, world.corpora, job, state=state, step_log=step_log,
                            teacher_cache=cache, hook=hook if eval_every else None, stop_at=stop_at)
    if stop_at is not None and state.step < job.schedule.total_steps:
        return ArmResult(None, curve, student, state.history)
    student.set_trainable(())
    final = evaluate_encoder(arm, student, world, seed, job.schedule.total_steps, memo)
    if eval_every:
        curve.append(final)
    return ArmResult(final, curve, student, state.history)


def run_arm(arm, seeds, teachers, worlds, caches=None, eval_every=None):
    """``run_arm_seed`` over paired seeds; returns one report per seed."""
    out = []
    for seed in seeds:
        cache = caches.get(seed) if caches else None
        out.append(run_arm_seed(arm, teachers.get(seed), worlds[seed], seed, cache, eval_every).report)
    return out


def ablation_curves(curves, arms=("light", "random_init")):
    """Flatten ``curves[arm][seed]`` (step-ordered reports) into CSV rows."""
    rows = []
    for arm in arms:
        for seed, series in sorted(curves.get(arm, {}).items()):
            for rep in series:
                rows.append((arm, seed, rep.step, rep.english, rep.cross_lingual_avg))
    return rows


# ------------------------------------------------------------------- reports


def _fmt(x):
    return f"{x:.4f}"


def reports_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    langs = list(reports[0].languages)
    w.writerow(["arm", "seed", "step", *langs, "xl_avg", "avg"])
    for r in reports:
        w.writerow([r.arm, r.seed, "" if r.step is None else r.step, *map(_fmt, r.accuracies),
                    _fmt(r.cross_lingual_avg), _fmt(r.avg)])
    return buf.getvalue()


def curves_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "seed", "step", "english", "xl_avg"])
    for arm, seed, step, en, xl in rows:
        w.writerow([arm, seed, step, _fmt(en), _fmt(xl)])
    return buf.getvalue()


def median_report(reports):
    accs = tuple(statistics.median(r.accuracies[i] for r in reports) for i in range(len(reports[0].languages)))
    return EvalReport(reports[0].languages, accs, reports[0].arm, -1, None)


def paired_median_delta(a, b, metric="cross_lingual_avg"):
    """Median over seeds of (a - b), pairing reports by seed."""
    bs = {r.seed: r for r in b}
    deltas = [getattr(r, metric) - getattr(bs[r.seed], metric) for r in a if r.seed in bs]
    if not deltas:
        raise StateError("no seeds in common")
    return statistics.median(deltas)


def _table(title, rows, langs, reference=None):
    head = f"{'arm':<12}" + "".join(f"{l:>8}" for l in langs) + f"{'xl_avg':>9}{'avg':>8}"
    lines = [title, head, "-" * len(head)]
    for name, rep in rows:
        lines.append(f"{name:<12}" + "".join(f"{100 * a:8.1f}" for a in rep.accuracies)
                     + f"{100 * rep.cross_lingual_avg:9.1f}{100 * rep.avg:8.1f}")
    if reference:
        lines.append("reference (full scale, AVG): " + ", ".join(f"{k} {v}" for k, v in reference.items()))
    return lines


def ablation_tables(results):
    """Aligned text tables: main comparison, embedding freezing, mapping strategy.

    ``results`` maps arm name to a list of per-seed EvalReports; cells are
    seed medians.
    """
    for needed in ("light", "no_freeze", "uniform"):
        if needed not in results or not results[needed]:
            raise StateError(f"ablation tables need the {needed} arm")
    langs = results["light"][0].languages
    med = {k: median_report(v) for k, v in results.items() if v}
    main = [(k, med[k]) for k in ("teacher", "light", "uniform", "drop", "random_init") if k in med]
    lines = _table("Main comparison (median over seeds, %)", main, langs, REFERENCE["table1"])
    lines += [""]
    d_freeze = paired_median_delta(results["light"], results["no_freeze"])
    lines += _table("Embedding freezing", [("light", med["light"]), ("no_freeze", med["no_freeze"])], langs,
                    REFERENCE["table2"])
    lines.append(f"paired median delta light - no_freeze (xl_avg): {100 * d_freeze:+.2f}")
    lines += [""]
    d_map = paired_median_delta(results["light"], results["uniform"])
    lines += _table("Layer mapping", [("top", med["light"]), ("uniform", med["uniform"])], langs,
                    REFERENCE["table3"])
    lines.append(f"paired median delta top - uniform (xl_avg): {100 * d_map:+.2f}")
    lines += ["", RANDOM_INIT_NOTE, FOOTER]
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------- claims


@dataclass(frozen=True)
class Claim:
    name: str
    passed: bool
    detail: str


def ordinal_claims(results, curves=None, teacher_fraction=0.9, head_start=0.05, catch_up=0.02):
    """The desk-scale orderings, each evaluated on seed-paired medians."""
    xl = "cross_lingual_avg"
    out = []

    def delta(a, b, metric=xl):
        return paired_median_delta(results[a], results[b], metric)

    if all(k in results for k in ("light", "uniform", "drop", "random_init")):
        d1, d2, d3 = delta("light", "uniform"), delta("uniform", "drop"), delta("light", "random_init")
        out.append(Claim("ordering", d1 > 0 and d2 > 0 and d3 > 0,
                         f"light-uniform {d1:+.4f}, uniform-drop {d2:+.4f}, light-random_init {d3:+.4f}"))
    if "no_freeze" in results:
        d = delta("light", "no_freeze")
        out.append(Claim("freezing", d >= 0, f"light-no_freeze {d:+.4f}"))
    if "uniform" in results:
        d = delta("light", "uniform")
        out.append(Claim("mapping", d > 0, f"light-uniform {d:+.4f}"))
    if curves is not None and all(k in curves for k in ("light", "random_init")):
        out.append(_curve_claim(curves, head_start, catch_up))
    if "teacher" in results:
        ratios = [r.cross_lingual_avg / t.cross_lingual_avg
                  for r, t in zip(results["light"], results["teacher"]) if r.seed == t.seed]
        m = statistics.median(ratios)
        out.append(Claim("retention", m >= teacher_fraction, f"light/teacher xl_avg median {m:.4f}"))
    return out


def _curve_claim(curves, head_start, catch_up):
    starts, gaps_en, gaps_xl = [], [], []
    for seed, light in curves["light"].items():
        rand = curves["random_init"][seed]
        starts.append(light[0].cross_lingual_avg - rand[0].cross_lingual_avg)
        gaps_en.append(light[-1].english - rand[-1].english)
        gaps_xl.append(light[-1].cross_lingual_avg - rand[-1].cross_lingual_avg)
    s, e, x = (statistics.median(v) for v in (starts, gaps_en, gaps_xl))
    ok = s > head_start and e < catch_up and x > 0
    return Claim("curves", ok, f"step-0 xl head start {s:+.4f}, final english gap {e:+.4f}, final xl gap {x:+.4f}")


# ------------------------------------------------------------------ ablation


@dataclass
class AblationResult:
    reports: dict
    curves: dict
    teachers: dict = field(default_factory=dict)
    students: dict = field(default_factory=dict)

    def all_reports(self):
        return [r for arm in self.reports for r in self.reports[arm]]

    def claims(self):
        return ordinal_claims(self.reports, self.curves)


def run_ablation(run, seeds=None, progress=None):
    """Every configured arm on every seed, sharing one teacher per seed."""
    from .data import build_world

    arms = [make_arm(name, run) for name in run.ablate.arms]
    if any(a.name == "light" for a in arms):
        check_controlled(arms)
    reports = {a.name: [] for a in arms}
    curves = {a: {} for a in run.ablate.curve_arms if a in reports}
    teachers, students = {}, {}
    for seed in seeds if seeds is not None else run.seeds:
        world = build_world(run.data, run.model.max_seq_len, run.model.vocab_size, seed)
        teacher = pretrain_teacher(run, world, seed)
        teachers[seed] = teacher
        cache = teacher_cache(run, teacher, world)
        memo = {}
        for arm in arms:
            every = run.ablate.eval_every if arm.name in curves else None
            res = run_arm_seed(arm, teacher, world, seed, cache, every, memo=memo)
            reports[arm.name].append(res.report)
            if res.student is not None:
                students[arm.name, seed] = res.student
            if arm.name in curves:
                curves[arm.name][seed] = res.curve
            if progress is not None:
                progress(arm.name, seed, res.report)
    return AblationResult(reports, curves, teachers, students)
