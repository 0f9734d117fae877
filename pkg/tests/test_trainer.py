import dataclasses
import time

import numpy as np
import pytest

from cat_uda import calibration as cal
from cat_uda import losses
from cat_uda import tensor as T
from cat_uda.data import PairedBatches, SynthDomainSpec, generate_synth, normalize, split_train_test
from cat_uda.nets import build_models
from cat_uda.optim import AdamState, adam_step, lr_at_epoch
from cat_uda.trainer import (
    ConfigError,
    MetricsRecord,
    TrainerConfig,
    TrainingError,
    evaluate,
    predict_logits,
    progress_p,
    read_metrics_csv,
    run_training,
    shares_prefix,
    write_metrics_csv,
)


def small_domain(speed, domain_id, n=12, seed=0):
    spec = SynthDomainSpec(fundamentals=(4.0, 11.0), harmonic_weights=((1.0,), (1.0,)), speed_factor=speed,
                           noise_sigma=0.3, length=64, sample_rate=64.0, domain_id=domain_id)
    return split_train_test(normalize(generate_synth(spec, n, seed)), 0.75, seed)


@pytest.fixture(scope="module")
def small():
    s_tr, s_te = small_domain(1.0, 0)
    t_tr, t_te = small_domain(1.2, 1)
    return s_tr, s_te, t_tr, t_te


def smoke_config(**kw):
    base = dict(total_epochs=10, batch_size=8, t_da=3, t_pl=6, t_cal=8, lr_drop_epochs=(8,), seed=1,
                calibrator_kind="temperature")
    base.update(kw)
    return TrainerConfig(**base)


def params_of(state):
    return {k: v.data.copy() for k, v in state.params().items()}


# -- configuration ---------------------------------------------------------------------------

def test_phase_constraint_message_names_the_rule():
    with pytest.raises(ConfigError, match="t_da <= t_pl"):
        TrainerConfig(t_da=10, t_pl=5).validate()


def test_phase_boundaries():
    cfg = smoke_config()
    assert [cfg.phase(e) for e in range(10)] == [1, 1, 1, 2, 2, 2, 3, 3, 3, 3]
    assert [cfg.calibration_active(e) for e in range(10)] == [False] * 8 + [True] * 2
    assert not dataclasses.replace(cfg, calibrator_kind="identity").calibration_active(9)


def test_config_dict_round_trip():
    cfg = smoke_config(lr_drop_epochs=(4, 7), checkpoint_epochs=(2,))
    assert TrainerConfig.from_dict(cfg.to_dict()) == dataclasses.replace(cfg, lr_drop_epochs=[4, 7],
                                                                          checkpoint_epochs=[2]) or \
        TrainerConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_shares_prefix():
    a = smoke_config(calibrator_kind="identity")
    b = smoke_config(calibrator_kind="temperature")
    assert shares_prefix(a, b, 8) == []
    assert shares_prefix(a, b, 9) == ["calibrator_kind"]
    c = dataclasses.replace(a, t_pl=10, t_cal=10)
    assert shares_prefix(a, c, 6) == [] and "t_pl" in shares_prefix(a, c, 7)
    assert shares_prefix(a, dataclasses.replace(a, seed=2), 1) == ["seed"]
    assert shares_prefix(a, dataclasses.replace(a, n_bins=15), 10) == []


# -- GRL progress ----------------------------------------------------------------------------

def test_progress_endpoints_and_midpoint():
    cfg = TrainerConfig(total_epochs=10, t_da=2, t_pl=10, t_cal=10)
    ipe = 5
    assert progress_p(2, 0, cfg, ipe) == 0.0
    assert progress_p(9, ipe - 1, cfg, ipe) == 1.0
    total = 8 * ipe
    mid = progress_p(6, 0, cfg, ipe)
    assert abs(mid - 0.5) <= 1.0 / (total - 1)
    with pytest.raises(ValueError):
        progress_p(1, 0, cfg, ipe)


# -- evaluation ---------------------------------------------------------------------------------

def test_evaluate_matches_loop_oracle_and_is_temperature_invariant(small):
    s_tr, s_te, _, _ = small
    student, _ = build_models(2, seed=4)
    acc, report = evaluate(student, s_te)
    logits = predict_logits(student, s_te.samples)
    hits = 0
    for row, y in zip(logits.tolist(), s_te.labels.tolist()):
        hits += int(max(range(len(row)), key=lambda k: (row[k], -k)) == y)
    assert acc == hits / len(s_te)
    acc_t, _ = evaluate(student, s_te, cal.CalibratorParams("temperature", 3.7))
    assert acc_t == acc
    assert report.n == len(s_te)


def test_evaluate_perfect_predictor():
    class Oracle:
        training = False

        def eval(self):
            pass

        def train(self, mode=True):
            pass

        def __call__(self, x):
            # sign of the first sample value decides the class
            first = x.data[:, 0, 0]
            logits = np.stack([(first < 0) * 50.0, (first >= 0) * 50.0], axis=1)
            return None, T.Tensor(logits)

    from cat_uda.data import SignalDataset
    samples = np.array([[-1.0, 0.0], [2.0, 0.0], [3.0, 1.0]])
    acc, _ = evaluate(Oracle(), SignalDataset(samples, [0, 1, 1]))
    assert acc == 1.0


def test_evaluate_needs_labels(small):
    student, _ = build_models(2, seed=0)
    with pytest.raises(ValueError):
        evaluate(student, small[1].without_labels())


# -- training runs ---------------------------------------------------------------------------------

def test_smoke_run_is_fast_and_complete(small, tmp_path):
    t0 = time.perf_counter()
    res = run_training(smoke_config(), *small, run_dir=tmp_path)
    assert time.perf_counter() - t0 < 10.0
    assert [r.epoch for r in res.history] == list(range(10))
    assert [r.phase for r in res.history] == [1, 1, 1, 2, 2, 2, 3, 3, 3, 3]
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert len(rows) == 10
    for name in ("pseudo_label_stats.csv", "reliability_source.csv", "reliability_target.csv",
                 "checkpoint_final.ckpt"):
        assert (tmp_path / name).exists()
    last = res.history[-1]
    assert last.model == "teacher" and last.calibrator == "temperature"
    assert res.history[5].model == "student"
    assert all(r.grl_lambda == 0.0 for r in res.history[:3])
    assert all(r.l_dc == 0.0 and r.l_pl == 0.0 for r in res.history[:3])
    assert all(r.n_pseudo_selected is None for r in res.history[:6])
    assert all(r.n_pseudo_selected is not None for r in res.history[6:])
    assert all(r.temperature == 1.0 for r in res.history[:8])
    # reliability csv reproduces the final target ECE
    rel = cal.read_reliability_csv(tmp_path / "reliability_target.csv")
    assert cal.ece_from_rows(rel) == last.target_ece


def test_run_is_deterministic(small):
    a = run_training(smoke_config(total_epochs=7, t_cal=7), *small)
    b = run_training(smoke_config(total_epochs=7, t_cal=7), *small)
    assert all(np.array_equal(x, y) for x, y in zip(params_of(a.state).values(), params_of(b.state).values()))
    strip = [dataclasses.replace(r, seconds=0.0) for r in a.history]
    assert strip == [dataclasses.replace(r, seconds=0.0) for r in b.history]


def test_source_only_equals_standalone_supervised_loop(small):
    s_tr, s_te, t_tr, t_te = small
    cfg = smoke_config(total_epochs=4, t_da=4, t_pl=4, t_cal=4, lr_drop_epochs=(2,), calibrator_kind="identity")
    res = run_training(cfg, s_tr, s_te, t_tr, t_te)

    student, _ = build_models(2, cfg.seed, cfg.dropout)
    opt = AdamState(learning_rate=cfg.base_lr, weight_decay=cfg.weight_decay)
    params = student.named_parameters()
    for epoch in range(cfg.total_epochs):
        opt.learning_rate = lr_at_epoch(cfg.base_lr, epoch, cfg.lr_drop_epochs, cfg.lr_drop_factor)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 3]))
        student.train()
        for si, _ in PairedBatches(len(s_tr), len(t_tr), cfg.batch_size, cfg.seed, epoch):
            for p in params.values():
                p.grad = None
            _, logits = student(T.Tensor(s_tr.as_batch(si)), rng)
            losses.cross_entropy(T.softmax(logits, axis=1), s_tr.labels[si]).backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, opt)

    trained = res.state.student.named_parameters()
    for k, p in params.items():
        assert np.array_equal(p.data, trained[k].data), k
    for k, buf in student.named_buffers().items():
        assert np.array_equal(buf, res.state.student.named_buffers()[k]), k
    # the discriminator never moved
    _, fresh_disc = build_models(2, cfg.seed, cfg.dropout)
    for k, v in fresh_disc.state_dict().items():
        assert np.array_equal(v, res.state.disc.state_dict()[k])


def test_discriminator_frozen_before_adversarial_phase(small):
    res = run_training(smoke_config(total_epochs=3, t_da=3, t_pl=3, t_cal=3), *small)
    _, fresh = build_models(2, seed=1)
    assert all(np.array_equal(v, res.state.disc.state_dict()[k]) for k, v in fresh.state_dict().items())
    assert res.state.teacher is None


def test_identity_and_temperature_agree_until_calibration(small):
    cfg_id = smoke_config(calibrator_kind="identity")
    cfg_ts = smoke_config(calibrator_kind="temperature")
    a = run_training(cfg_id, *small)
    b = run_training(cfg_ts, *small)
    for ra, rb in zip(a.history[:8], b.history[:8]):
        assert dataclasses.replace(ra, seconds=0.0) == dataclasses.replace(rb, seconds=0.0, calibrator="identity")
    assert a.history[8] != dataclasses.replace(b.history[8], seconds=a.history[8].seconds)


def test_teacher_created_once_and_tracks_student(small):
    cfg = smoke_config(total_epochs=7, t_cal=7, ema_alpha=0.0)
    res = run_training(cfg, *small)
    # alpha = 0 makes the teacher a copy of the student after every step
    st = res.state.student.state_dict()
    tt = res.state.teacher.state_dict()
    for k in st:
        assert np.array_equal(st[k], tt[k]), k


def test_resume_matches_uninterrupted_run(small, tmp_path):
    cfg = smoke_config(checkpoint_epochs=(5,))
    full = run_training(cfg, *small, run_dir=tmp_path / "full")
    part = run_training(cfg, *small, run_dir=tmp_path / "part", stop_after=5)
    assert part.checkpoint_path.name == "checkpoint_epoch0005.ckpt"
    resumed = run_training(cfg, *small, run_dir=tmp_path / "resumed", resume_from=part.checkpoint_path)
    for k, v in params_of(full.state).items():
        assert np.array_equal(v, params_of(resumed.state)[k]), k
    assert [dataclasses.replace(r, seconds=0) for r in full.history] == \
        [dataclasses.replace(r, seconds=0) for r in resumed.history]


def test_resume_with_diverging_config_rejected(small, tmp_path):
    cfg = smoke_config()
    part = run_training(cfg, *small, run_dir=tmp_path, stop_after=5)
    with pytest.raises(ConfigError, match="t_da"):
        run_training(dataclasses.replace(cfg, t_da=2), *small, resume_from=part.checkpoint_path)


def test_non_finite_loss_reports_epoch_and_iteration(small):
    s_tr, s_te, t_tr, t_te = small
    bad = dataclasses.replace(s_tr, samples=np.where(np.arange(s_tr.length) == 0, np.nan, s_tr.samples))
    with pytest.raises(TrainingError, match="epoch 0, iteration 0"):
        run_training(smoke_config(), bad, s_te, t_tr, t_te)


def test_mismatched_data_rejected(small):
    s_tr, s_te, t_tr, t_te = small
    short = dataclasses.replace(t_tr, samples=t_tr.samples[:, :48])
    with pytest.raises(ConfigError):
        run_training(smoke_config(), s_tr, s_te, short, t_te)


def test_sdat_and_mcc_run(small):
    res = run_training(smoke_config(mcc_enabled=True, sdat_enabled=True, total_epochs=7, t_cal=7), *small)
    assert all(r.l_mcc == 0.0 for r in res.history[:3])
    assert all(r.l_mcc > 0.0 for r in res.history[3:])


# -- metrics csv -------------------------------------------------------------------------------------

def test_metrics_csv_round_trip(tmp_path):
    rec = MetricsRecord(epoch=3, phase=2, model="student", source_test_acc=0.5, target_test_acc=1 / 3,
                        source_ece=0.1, target_ece=0.2, n_pseudo_selected=None, pseudo_label_acc=None,
                        l_c=0.7, l_pl=0.0, l_dc=1.3, l_mcc=0.0, total=-0.6, current_lr=1e-3, grl_lambda=0.25,
                        calibrator="identity", temperature=1.0, seconds=0.5)
    write_metrics_csv(tmp_path / "m.csv", [rec])
    row = read_metrics_csv(tmp_path / "m.csv")[0]
    assert row == dataclasses.asdict(rec)
