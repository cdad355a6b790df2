"""Command-line entry point: ``xdistill <command> [--config PATH] [--out DIR] ...``.

Directory layout under ``--out``::

    config.json                      resolved config of the last command
    seed<S>/data/                    corpora, task splits, manifest.json
    seed<S>/teacher/                 pretrained teacher checkpoint + steps.csv
    seed<S>/<arm>/student/           distilled (or truncated) student
    seed<S>/<arm>/finetuned_r<K>/    fine-tuned checkpoints, one per repeat
    seed<S>/<arm>/report.csv         zero-shot report
    ablate/                          reports.csv, curves.csv, tables.txt, claims.txt

Exit codes: 0 success, 2 config or data error, 3 artifact error, 4 internal error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import data as D
from . import evaluation as E
from . import train as T
from .config import ARM_NAMES, load_config, write_resolved
from .errors import ArtifactError, ConfigError, XDistillError

log = logging.getLogger("xdistill")
LOG_ENV = "XDISTILL_LOG"


# ---------------------------------------------------------------- data files


def data_dir(out, seed):
    return os.path.join(out, f"seed{seed}", "data")


def write_world(world, directory, run, seed):
    os.makedirs(directory, exist_ok=True)
    files = {}
    for lang, corpus in zip(world.lang_ids, world.corpora):
        files[f"corpus_{lang}.txt"] = lambda p, c=corpus: D.write_corpus(p, c.token_ids)
    files["train.txt"] = lambda p: D.write_task(p, world.train)
    files["dev.txt"] = lambda p: D.write_task(p, world.dev)
    for lang, test in zip(world.lang_ids, world.tests):
        files[f"test_{lang}.txt"] = lambda p, t=test: D.write_task(p, t)
    digests = {}
    for name, writer in files.items():
        path = os.path.join(directory, name)
        writer(path)
        digests[name] = _sha256(path)
    manifest = {
        "schema_version": D.SCHEMA_VERSION,
        "code_version": __version__,
        "seed": seed,
        "config_sha256": hashlib.sha256(run.dumps().encode()).hexdigest(),
        "languages": [
            {"id": l.lang_id, "concept_to_token": list(l.concept_to_token), "anchors": sorted(l.anchor_set)}
            for l in world.languages
        ],
        "anchor_fraction": run.data.anchor_fraction,
        "counts": {"train": len(world.train), "dev": len(world.dev), "test": len(world.tests[0]),
                   "corpus": [len(c) for c in world.corpora]},
        "files": digests,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        f.write(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def read_world(directory, seq_len):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ArtifactError(f"no generated data in {directory}; run gen-data first") from None
    except json.JSONDecodeError as e:
        raise ArtifactError(f"corrupt data manifest {path}: {e}") from None
    for name, digest in manifest["files"].items():
        file = os.path.join(directory, name)
        if not os.path.exists(file) or _sha256(file) != digest:
            raise ArtifactError(f"data file {file} is missing or does not match its manifest checksum")
    languages = [D.LanguageSpec(l["id"], tuple(l["concept_to_token"]), frozenset(l["anchors"]),
                                manifest["anchor_fraction"]) for l in manifest["languages"]]
    ids = [l.lang_id for l in languages]
    corpora = [D.as_sequences(D.read_corpus(os.path.join(directory, f"corpus_{i}.txt"), seq_len)) for i in ids]
    tests = [D.read_task(os.path.join(directory, f"test_{i}.txt")) for i in ids]
    return D.World(languages, corpora, D.read_task(os.path.join(directory, "train.txt")),
                   D.read_task(os.path.join(directory, "dev.txt")), tests)


def _sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# ----------------------------------------------------------------- commands


def cmd_gen_data(run, args):
    for seed in run.seeds:
        world = D.build_world(run.data, run.model.max_seq_len, run.model.vocab_size, seed)
        d = data_dir(args.out, seed)
        write_world(world, d, run, seed)
        log.info("seed %d: data written to %s", seed, d)


def _load_world(run, args, seed):
    return read_world(data_dir(args.out, seed), run.model.max_seq_len)


def _resumable(directory, args, model, optimizer):
    """Restore (step, rng, history) from ``directory`` when --resume and a snapshot exist."""
    if args.resume and os.path.exists(os.path.join(directory, ckpt.RESUME)):
        step, rng, history = ckpt.load_resume(directory, model, optimizer)
        log.info("resuming %s at step %d", directory, step)
        return T.TrainState(step, optimizer, rng, history)
    return None


def _run_in_chunks(loop, state, total, directory, model_ref, every, stop_after):
    """Drive ``loop(stop_at)`` in chunks, snapshotting resume state after each."""
    target = total if stop_after is None else min(total, state.step + stop_after)
    while state.step < target:
        nxt = min(target, (state.step // every + 1) * every) if every else target
        model = loop(nxt)
        ckpt.save_resume(directory, model, state.optimizer, state.rng, state.step, state.history)
        model_ref[0] = model
    return state.step >= total


def cmd_pretrain_teacher(run, args):
    from .data import concat_sequences
    from .model import init_random

    for seed in run.seeds:
        world = _load_world(run, args, seed)
        out = os.path.join(args.out, f"seed{seed}", "teacher")
        os.makedirs(out, exist_ok=True)
        write_resolved(run, out)
        p = run.pretrain
        job = T.TrainJob("mlm", batch_size=p.batch_size, seq_len=run.model.max_seq_len,
                         schedule=T.Schedule(p.peak_lr, int(p.warmup_fraction * p.steps), p.steps),
                         seed=seed, weight_decay=p.weight_decay, mask_rate=p.mask_rate, log_every=run.log_every)
        model = init_random(run.model, seed, mlm_head=True)
        optimizer = T.AdamW(model.names(), job.weight_decay)
        state = _resumable(out, args, model, optimizer) or T.TrainState(0, optimizer, np.random.default_rng([seed, 1]))
        steps = T.StepLog(os.path.join(out, "steps.csv"))
        corpus = concat_sequences(world.corpora)
        ref = [model]

        def loop(stop_at):
            return T.run_mlm(run.model, corpus, job, state, steps, model=ref[0], stop_at=stop_at)

        if _run_in_chunks(loop, state, p.steps, out, ref, args.checkpoint_every, args.stop_after):
            ckpt.save(ref[0], out, step=state.step, rng_state=state.rng.bit_generator.state)
            log.info("seed %d: teacher saved to %s", seed, out)


def _arm(run, args):
    return E.make_arm(args.arm, run)


def _arm_dir(args, seed):
    return os.path.join(args.out, f"seed{seed}", args.arm)


def _teacher(args, seed):
    path = args.teacher or os.path.join(args.out, f"seed{seed}", "teacher")
    return ckpt.load(path)[0]


def cmd_distill(run, args):
    arm = _arm(run, args)
    for seed in run.seeds:
        out = os.path.join(_arm_dir(args, seed), "student")
        os.makedirs(out, exist_ok=True)
        write_resolved(arm.config, out)
        if not arm.truncate:
            raise ConfigError("the teacher arm has no student to distill")
        teacher = _teacher(args, seed)
        student = E.initial_student(arm, teacher, seed)
        if not arm.distill:
            ckpt.save(student, out, step=0)
            continue
        world = _load_world(run, args, seed)
        plan = E.distill_plan(arm, student, teacher)
        job = E.distill_job(arm, seed, plan)
        optimizer = T.AdamW(student.names(), job.weight_decay, frozen=plan.frozen)
        state = _resumable(out, args, student, optimizer) or T.TrainState(
            0, optimizer, np.random.default_rng([seed, 2]))
        steps = T.StepLog(os.path.join(out, "steps.csv"))
        cache = E.teacher_cache(arm.config, teacher, world)
        ref = [student]

        def loop(stop_at):
            return T.run_distill(teacher, ref[0], plan, world.corpora, job, state, steps, cache, stop_at=stop_at)

        if _run_in_chunks(loop, state, job.schedule.total_steps, out, ref, args.checkpoint_every, args.stop_after):
            ref[0].set_trainable(())
            ckpt.save(ref[0], out, step=state.step, rng_state=state.rng.bit_generator.state)
            log.info("seed %d: %s student saved to %s", seed, arm.name, out)


def _encoder_path(args, seed):
    if args.model:
        return args.model
    if args.arm == "teacher":
        return os.path.join(args.out, f"seed{seed}", "teacher")
    return os.path.join(_arm_dir(args, seed), "student")


def cmd_finetune(run, args):
    arm = _arm(run, args)
    f = arm.config.finetune
    for seed in run.seeds:
        encoder, _ = ckpt.load(_encoder_path(args, seed))
        world = _load_world(run, args, seed)
        for r in range(f.repeats):
            out = os.path.join(_arm_dir(args, seed), f"finetuned_r{r}")
            os.makedirs(out, exist_ok=True)
            write_resolved(arm.config, out)
            job = T.TrainJob("finetune", batch_size=f.batch_size, seq_len=run.model.max_seq_len,
                             schedule=T.Schedule.constant(f.peak_lr, 1), seed=E._ft_seed(seed, r),
                             freeze=f.freeze, epochs=f.epochs, weight_decay=f.weight_decay,
                             log_every=run.log_every, constant_lr=True)
            model, state = T.finetune_start(encoder, job)
            state = _resumable(out, args, model, state.optimizer) or state
            steps = T.StepLog(os.path.join(out, "steps.csv"))
            total = T.finetune_steps(len(world.train), f.batch_size, f.epochs)
            ref = [model]

            def loop(stop_at, job=job, state=state, steps=steps, ref=ref):
                return T.run_finetune(ref[0], world.train, job, step_log=steps, state=state, stop_at=stop_at)

            if _run_in_chunks(loop, state, total, out, ref, args.checkpoint_every, args.stop_after):
                ref[0].set_trainable(())
                ckpt.save(ref[0], out, step=state.step, rng_state=state.rng.bit_generator.state)


def cmd_eval(run, args):
    arm = _arm(run, args)
    for seed in run.seeds:
        world = _load_world(run, args, seed)
        tests = dict(zip(world.lang_ids, world.tests))
        if args.model:
            paths = [args.model]
        else:
            paths = [os.path.join(_arm_dir(args, seed), f"finetuned_r{r}") for r in range(arm.config.finetune.repeats)]
        reports = []
        for path in paths:
            model, manifest = ckpt.load(path)
            if not model.has_classifier:
                raise ArtifactError(f"{path} has no classifier head; run finetune first")
            reports.append(E.zero_shot_report(model, world.lang_ids, tests, arm.name, seed, None))
        report = E.mean_report(reports)
        out = args.report or os.path.join(_arm_dir(args, seed), "report.csv")
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        with open(out, "w") as f:
            f.write(E.reports_csv([report]))
        print(f"{arm.name} seed {seed}: xl_avg {report.cross_lingual_avg:.4f} avg {report.avg:.4f}")


def cmd_ablate(run, args):
    out = os.path.join(args.out, "ablate")
    os.makedirs(out, exist_ok=True)
    write_resolved(run, out)

    def progress(arm, seed, report):
        log.info("%s seed %d: english %.4f xl_avg %.4f", arm, seed, report.english, report.cross_lingual_avg)

    result = E.run_ablation(run, progress=progress)
    write_ablation(result, out)
    for claim in result.claims():
        print(f"{'PASS' if claim.passed else 'FAIL'} {claim.name}: {claim.detail}")


def write_ablation(result, out):
    with open(os.path.join(out, "reports.csv"), "w") as f:
        f.write(E.reports_csv(result.all_reports()))
    with open(os.path.join(out, "curves.csv"), "w") as f:
        f.write(E.curves_csv(E.ablation_curves(result.curves, tuple(result.curves))))
    names = set(result.reports)
    if {"light", "no_freeze", "uniform"} <= names:
        with open(os.path.join(out, "tables.txt"), "w") as f:
            f.write(E.ablation_tables(result.reports))
    with open(os.path.join(out, "claims.txt"), "w") as f:
        for c in result.claims():
            f.write(f"{'PASS' if c.passed else 'FAIL'}\t{c.name}\t{c.detail}\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-teacher": cmd_pretrain_teacher,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="xdistill", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config (defaults apply to missing keys)")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        p.add_argument("--seed", type=int, action="append",
                       help="run only this seed (repeatable); overrides the config's seeds")
        p.add_argument("--resume", action="store_true", help="continue from the latest resume snapshot")
        p.add_argument("--checkpoint-every", type=int, default=200, help="steps between resume snapshots")
        p.add_argument("--stop-after", type=int, default=None,
                       help="stop after this many steps (simulates an interruption)")
        if name in ("distill", "finetune", "eval"):
            p.add_argument("--arm", default="light", choices=ARM_NAMES)
        if name == "distill":
            p.add_argument("--teacher", help="teacher checkpoint directory")
        if name in ("finetune", "eval"):
            p.add_argument("--model", help="checkpoint directory to use instead of the arm default")
        if name == "eval":
            p.add_argument("--report", help="CSV path for the report")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        run = load_config(args.config)
        if args.seed:
            run = run.with_seeds(args.seed)
        if args.checkpoint_every is not None and args.checkpoint_every < 1:
            raise ConfigError("--checkpoint-every must be positive")
        os.makedirs(args.out, exist_ok=True)
        write_resolved(run, args.out)
        COMMANDS[args.command](run, args)
    except XDistillError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        # unreadable or unwritable paths are a setup problem, like a bad config
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
