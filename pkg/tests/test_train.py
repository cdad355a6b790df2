import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdistill import compute as C
from xdistill import data as D
from xdistill import distill as K
from xdistill import model as M
from xdistill import train as T
from xdistill.compute import Tensor
from xdistill.config import FinetuneConfig
from xdistill.errors import ConfigError, DataError, StateError

REFERENCE = T.Schedule(1e-4, 40_000, 400_000)
SMALL = M.ModelConfig(num_layers=2, hidden_size=16, num_heads=2, ffn_size=32, vocab_size=60, max_seq_len=12)


# ------------------------------------------------------------------ schedule


def test_reference_schedule_points():
    assert T.lr_at(REFERENCE, 0) == 0.0
    assert T.lr_at(REFERENCE, 40_000) == 1e-4
    assert T.lr_at(REFERENCE, 400_000) == 0.0
    assert T.lr_at(REFERENCE, 220_000) == 1e-4 * (180_000 / 360_000) == 5e-5


def test_schedule_out_of_range():
    for step in (-1, 400_001):
        with pytest.raises(ConfigError):
            T.lr_at(REFERENCE, step)


@pytest.mark.parametrize("args", [(0.0, 0, 10), (1e-3, 11, 10), (1e-3, -1, 10)])
def test_schedule_validation(args):
    with pytest.raises(ConfigError):
        T.Schedule(*args)


@given(st.integers(0, 400_000))
@settings(max_examples=200, deadline=None)
def test_schedule_piecewise_linear(step):
    lr = T.lr_at(REFERENCE, step)
    assert 0.0 <= lr <= 1e-4
    if step < 40_000:
        assert lr == pytest.approx(1e-4 * step / 40_000)
    else:
        assert lr == pytest.approx(1e-4 * (400_000 - step) / 360_000)


def test_no_warmup_schedule():
    s = T.Schedule(1.0, 0, 4)
    assert [T.lr_at(s, i) for i in range(5)] == [1.0, 0.75, 0.5, 0.25, 0.0]


# ----------------------------------------------------------------- optimizer


def _params(**arrays):
    return {k: Tensor(np.array(v, dtype=float), requires_grad=True) for k, v in arrays.items()}


def test_first_adam_step_has_magnitude_lr():
    params = _params(w=[0.5])
    opt = T.AdamW(["w"], weight_decay=0.0)
    params["w"].grad = np.array([1.0])
    opt.step(params, 1e-3)
    # m_hat = v_hat = 1 -> update = 1 / (1 + eps)
    assert abs(params["w"].data[0] - (0.5 - 1e-3 / (1 + 1e-8))) < 1e-15


def test_constant_gradient_keeps_unit_step():
    params = _params(w=[0.0])
    opt = T.AdamW(["w"], weight_decay=0.0)
    for _ in range(5):
        params["w"].grad = np.array([1.0])
        opt.step(params, 0.1)
    assert params["w"].data[0] == pytest.approx(-0.5, rel=1e-7)


def test_decay_with_zero_gradient_is_geometric():
    lr, wd = 0.1, 0.5
    params = _params(w=[2.0])
    opt = T.AdamW(["w"], weight_decay=wd)
    for k in range(1, 6):
        params["w"].grad = np.array([0.0])
        opt.step(params, lr)
        assert params["w"].data[0] == pytest.approx(2.0 * (1 - lr * wd) ** k, rel=1e-12)


def test_no_decay_for_bias_and_gain():
    params = _params(**{"a.bias": [1.0], "a.gain": [1.0], "a.weight": [1.0]})
    opt = T.AdamW(list(params), weight_decay=0.5)
    for p in params.values():
        p.grad = np.array([0.0])
    opt.step(params, 0.1)
    assert params["a.bias"].data[0] == 1.0 and params["a.gain"].data[0] == 1.0
    assert params["a.weight"].data[0] == pytest.approx(0.95)


def test_frozen_parameters_get_no_moments_and_stay_bitwise():
    params = _params(emb=[[1.0, 2.0]], w=[3.0])
    before = params["emb"].data.copy()
    opt = T.AdamW(list(params), weight_decay=0.01, frozen={"emb"})
    for _ in range(100):
        params["w"].grad = np.array([0.3])
        params["emb"].grad = np.array([[5.0, 5.0]])
        opt.step(params, 1e-2)
    assert np.array_equal(params["emb"].data, before)
    assert "emb" not in opt.m and "emb" not in opt.v


def test_missing_gradient_is_state_error():
    params = _params(w=[1.0])
    with pytest.raises(StateError):
        T.AdamW(["w"]).step(params, 1e-3)


def test_clip_grad_norm():
    params = list(_params(a=[3.0], b=[4.0]).values())
    params[0].grad, params[1].grad = np.array([3.0]), np.array([4.0])
    assert T.clip_grad_norm(params, 1.0) == 5.0
    assert math.isclose(math.hypot(params[0].grad[0], params[1].grad[0]), 1.0)


# ------------------------------------------------------------------- masking


def _corpus(n=200, seed=0):
    g = D.gen_grammar(seed, 16, (3, 8))
    lang = D.build_languages(g, 1, 0.3, seed)[0]
    return D.as_sequences(D.gen_corpus(g, lang, n, seed, 12))


def test_mask_rate_zero_is_identity():
    batch = _corpus(20)
    out, labels = T.mlm_mask(batch, np.random.default_rng(0), 0.0, 60)
    assert out is batch and (labels == C.IGNORE_INDEX).all()


def test_specials_never_masked():
    batch = _corpus(500)
    rng = np.random.default_rng(1)
    special = np.isin(batch.token_ids, M.SPECIAL_IDS) | (batch.attention_mask == 0)
    for _ in range(20):
        out, labels = T.mlm_mask(batch, rng, 0.5, 60)
        assert (labels[special] == C.IGNORE_INDEX).all()
        assert np.array_equal(out.token_ids[special], batch.token_ids[special])


def test_80_10_10_split():
    batch = _corpus(2000)
    rng = np.random.default_rng(2)
    n = masked = swapped = kept = 0
    while n < 100_000:
        out, labels = T.mlm_mask(batch, rng, 0.5, 60)
        sel = labels != C.IGNORE_INDEX
        n += sel.sum()
        masked += (out.token_ids[sel] == M.MASK).sum()
        same = out.token_ids[sel] == batch.token_ids[sel]
        kept += same.sum()
        swapped += (~same & (out.token_ids[sel] != M.MASK)).sum()
    # a random replacement can draw the original token, so "kept" absorbs ~1/56 of the 10%
    assert abs(masked / n - 0.8) < 0.02
    assert abs(swapped / n - 0.1) < 0.02
    assert abs(kept / n - 0.1) < 0.02


# --------------------------------------------------------------------- loops


def _mlm_job(steps, seed=0):
    return T.TrainJob("mlm", batch_size=16, seq_len=12, schedule=T.Schedule(3e-3, steps // 10, steps), seed=seed,
                      log_every=1)


@pytest.fixture(scope="module")
def mlm_run():
    corpus = _corpus(400)
    state = T.TrainState(0, T.AdamW([n for n, _ in M.parameter_shapes(SMALL, True)], 0.01),
                         np.random.default_rng([0, 1]))
    model = T.run_mlm(SMALL, corpus, _mlm_job(150), state=state)
    return model, state.history, corpus


def test_mlm_initial_loss_near_log_vocab(mlm_run):
    _, history, _ = mlm_run
    assert abs(history[0] - math.log(SMALL.vocab_size)) < 0.1 * math.log(SMALL.vocab_size)


def test_mlm_loss_decreases(mlm_run):
    _, history, _ = mlm_run
    k = len(history) // 10
    assert np.median(history[-k:]) < np.median(history[:k])


def test_mlm_deterministic(mlm_run):
    model, _, corpus = mlm_run
    again = T.run_mlm(SMALL, corpus, _mlm_job(150))
    assert all(np.array_equal(model[n].data, again[n].data) for n in model.params)


def test_mlm_empty_corpus():
    with pytest.raises(DataError):
        T.run_mlm(SMALL, np.zeros((0, 12), dtype=np.int64), _mlm_job(10))


def test_mlm_resume_is_bit_exact():
    corpus = _corpus(100)
    job = _mlm_job(30)
    full = T.run_mlm(SMALL, corpus, job)
    state = T.TrainState(0, T.AdamW([n for n, _ in M.parameter_shapes(SMALL, True)], 0.01),
                         np.random.default_rng([0, 1]))
    part = T.run_mlm(SMALL, corpus, job, state=state, stop_at=13)
    assert state.step == 13
    resumed = T.run_mlm(SMALL, corpus, job, state=state, model=part)
    assert all(np.array_equal(full[n].data, resumed[n].data) for n in full.params)


def _distill_setup(teacher, steps=40, strategy="top", freeze="embeddings"):
    student = K.init_student_from_teacher(teacher, 1)
    plan = K.make_plan(student, teacher, strategy, "scores", freeze)
    job = T.TrainJob("distill", batch_size=8, seq_len=12, schedule=T.Schedule(1e-3, 4, steps), seed=0,
                     plan=plan, log_every=1)
    return student, plan, job


def test_distill_decreases_loss_and_keeps_frozen(mlm_run):
    teacher, _, corpus = mlm_run
    student, plan, job = _distill_setup(teacher)
    before = {n: student[n].data.copy() for n in student.params}
    state = T.TrainState(0, T.AdamW(student.names(), 0.01, frozen=plan.frozen), np.random.default_rng(0))
    out = T.run_distill(teacher, student, plan, [corpus.take(slice(0, 200)), corpus.take(slice(200, 400))],
                        job, state=state)
    assert state.history[-1] < state.history[0]
    for n in out.params:
        if n in plan.frozen:
            assert np.array_equal(out[n].data, before[n])
        else:
            assert not np.array_equal(out[n].data, before[n])


def test_distill_initial_loss_depends_on_mapping(mlm_run):
    teacher, _, corpus = mlm_run
    student = K.init_student_from_teacher(teacher, 1)
    batch = corpus.take(slice(0, 16))
    s, t = M.forward(student, batch), M.forward(teacher, batch)
    copied = K.DistillPlan(K.LayerMapping(((1, 1),)))
    top = K.make_plan(student, teacher, "top")
    assert K.total_distill_loss(s, t, copied).item() == 0.0
    assert K.total_distill_loss(s, t, top).item() > 0.0


def test_distill_cache_matches_live_teacher(mlm_run):
    teacher, _, corpus = mlm_run
    results = []
    for use_cache in (False, True):
        student, plan, job = _distill_setup(teacher, steps=10)
        cache = T.TeacherCache(teacher, corpus, [2]) if use_cache else None
        results.append(T.run_distill(teacher, student, plan, [corpus], job, teacher_cache=cache))
    assert all(np.array_equal(results[0][n].data, results[1][n].data) for n in results[0].params)


def test_distill_resume_is_bit_exact(mlm_run):
    teacher, _, corpus = mlm_run
    student, plan, job = _distill_setup(teacher, steps=20)
    full = T.run_distill(teacher, student.copy(), plan, [corpus], job)
    state = T.TrainState(0, T.AdamW(student.names(), 0.01, frozen=plan.frozen), np.random.default_rng([0, 2]))
    part = T.run_distill(teacher, student.copy(), plan, [corpus], job, state=state, stop_at=7)
    done = T.run_distill(teacher, part, plan, [corpus], job, state=state)
    assert all(np.array_equal(full[n].data, done[n].data) for n in full.params)


def test_distill_rejects_empty_language(mlm_run):
    teacher, _, corpus = mlm_run
    student, plan, job = _distill_setup(teacher)
    with pytest.raises(DataError):
        T.run_distill(teacher, student, plan, [corpus, corpus.take(slice(0, 0))], job)


def test_distill_job_needs_plan():
    with pytest.raises(ConfigError):
        T.TrainJob("distill")


def _task(n, seed=0):
    g = D.gen_grammar(seed, 16, (3, 8))
    lang = D.build_languages(g, 1, 0.3, seed)[0]
    return D.gen_task(g, lang, n, seed, D.TaskShape((3, 5), (2, 3)))


def _ft_job(**kw):
    base = dict(batch_size=16, seq_len=12, schedule=T.Schedule.constant(3e-3, 1), seed=0, freeze="embeddings",
                epochs=4, constant_lr=True, log_every=0)
    base.update(kw)
    return T.TrainJob("finetune", **base)


def test_finetune_beats_prior_and_freezes_embeddings(mlm_run):
    teacher, _, _ = mlm_run
    train = _task(30)
    model = T.run_finetune(teacher, train, _ft_job(batch_size=10, epochs=40))
    batch, labels = D.encode_pairs(train, 12)
    acc = (M.predict_logits(model, batch).argmax(1) == labels).mean()
    assert acc > 1 / 3 + 0.05
    for n in K.EMBEDDING_PARAMS:
        assert np.array_equal(model[n].data, teacher[n].data)
    assert model.has_classifier and not model.has_mlm_head


def test_finetune_deterministic(mlm_run):
    teacher, _, _ = mlm_run
    train = _task(60)
    a = T.run_finetune(teacher, train, _ft_job(epochs=1))
    b = T.run_finetune(teacher, train, _ft_job(epochs=1))
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.params)


def test_finetune_resume_is_bit_exact(mlm_run):
    teacher, _, _ = mlm_run
    train = _task(64)
    job = _ft_job(epochs=2)
    full = T.run_finetune(teacher, train, job)
    model, state = T.finetune_start(teacher, job)
    part = T.run_finetune(model, train, job, state=state, stop_at=5)
    assert state.step == 5
    done = T.run_finetune(part, train, job, state=state)
    assert all(np.array_equal(full[n].data, done[n].data) for n in full.params)


def test_finetune_bad_label(mlm_run):
    teacher, _, _ = mlm_run
    bad = [D.TaskExample((5, 6), (5,), 3)]
    with pytest.raises(DataError):
        T.run_finetune(teacher, bad, _ft_job())


def test_reference_finetune_hyperparameters_accepted():
    cfg = FinetuneConfig(epochs=3, peak_lr=2e-5, batch_size=32)
    job = T.TrainJob("finetune", batch_size=cfg.batch_size, seq_len=128,
                     schedule=T.Schedule.constant(cfg.peak_lr, 1), epochs=cfg.epochs)
    assert M.ModelConfig(max_seq_len=128).max_seq_len == job.seq_len
    assert T.finetune_steps(392_702, 32, 3) == 3 * 12_272


def test_step_log_is_append_only(tmp_path):
    path = tmp_path / "log.csv"
    log = T.StepLog(str(path))
    log.append(step=0, lr=0.1, loss=1.5)
    T.StepLog(str(path)).append(step=1, lr=0.1, loss=1.25)
    assert path.read_text().splitlines() == ["step,lr,loss", "0,0.1,1.5", "1,0.1,1.25"]
