import dataclasses
import logging

import numpy as np
import pytest

from san_mdtc.config import TrainConfig
from san_mdtc.data import PRESETS, SynthSpec, synth_generate
from san_mdtc.errors import ConfigError, DataError
from san_mdtc.model import Architecture, build_model
from san_mdtc.nn_core import frozen_noise, grad_check
from san_mdtc.objectives import DomainBatch, LabeledBatch, PseudoBatch, main_objective
from san_mdtc.trainer import (BatchStream, RuntimeReport, TrainingAborted, discriminator_step,
                              estimate_phi_step,
                              evaluate, init_phase, iterations_per_epoch, new_state, optimize_step,
                              prepare, pseudo_label_accuracy, resolve_target, run_epoch,
                              runtime_compare, runtime_report, train)

from conftest import jitter_biases

FAST = TrainConfig(hidden=(16, 8), shared_dim=8, specific_dim=4, lr=1e-3, lam=1.0, n_critic=2,
                   init_epochs=1, main_epochs=1, em_min_samples=5)


def _params(model):
    return {p.name: p.value.copy() for p in model.all_params()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def _state(cfg, datasets):
    data = prepare(datasets)
    return new_state(cfg, data, datasets[0].num_classes), data


def test_batch_stream_covers_every_row_each_pass():
    s = BatchStream(10, 4, np.random.default_rng(0))
    first = np.concatenate([s.next() for _ in range(5)])
    assert len(first) == 20
    assert sorted(first[:10]) == list(range(10)) and sorted(first[10:]) == list(range(10))
    assert len(BatchStream(0, 4, np.random.default_rng(0)).next()) == 0


def test_iterations_per_epoch_uses_largest_labeled_set(small_synth):
    data = prepare(small_synth)
    assert iterations_per_epoch(data, 8) == 5
    assert iterations_per_epoch(data, 7) == 6


def test_metrics_file_is_byte_identical(small_synth, tmp_path):
    for run in ("a", "b"):
        train(FAST, small_synth, tmp_path / run)
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    lines = a.decode().splitlines()
    assert len(lines) == 1 + FAST.init_epochs + FAST.main_epochs
    for name in ("best.npz", "last.npz", "timing.jsonl"):
        assert (tmp_path / "a" / name).exists()


def test_zero_rplr_weight_matches_init_epochs(small_synth):
    a, data = _state(FAST, small_synth)
    init_phase(a, data, epochs=2)
    b, _ = _state(FAST.replace(lam_rplr=0.0), small_synth)
    init_phase(b, data, epochs=1)
    estimate_phi_step(b, data)
    optimize_step(b, data)
    assert _same(_params(a.model), _params(b.model))


def test_all_zero_weights_match_zero_rplr_weight(small_synth):
    runs = []
    for lam_rplr, blank in ((1.0, True), (0.0, False)):
        st, data = _state(FAST.replace(lam_rplr=lam_rplr), small_synth)
        init_phase(st, data, epochs=1)
        pl = estimate_phi_step(st, data)
        if blank:
            assert pl.n_valid() > 0
            for rec in pl.by_domain.values():
                rec.w[...] = 0.0
        losses = optimize_step(st, data)
        assert losses["j_rplr"] == 0.0
        runs.append(_params(st.model))
    assert _same(*runs)


def test_estimate_step_leaves_networks_untouched(small_synth):
    st, data = _state(FAST, small_synth)
    init_phase(st, data, epochs=1)
    before = _params(st.model)
    opt_before = [m.copy() for m in st.main_opt.m]
    pl = estimate_phi_step(st, data)
    assert _same(before, _params(st.model))
    assert all(np.array_equal(a, b) for a, b in zip(opt_before, st.main_opt.m))
    assert st.pseudo is pl and st.round == 1


def test_estimate_step_without_unlabeled_is_inert(small_synth):
    from san_mdtc.data import DomainDataset, UnlabeledSplit
    bare = [DomainDataset(d.name, d.labeled, UnlabeledSplit(d.unlabeled.x[:0]), d.num_classes,
                          test=d.test) for d in small_synth]
    st, data = _state(FAST, bare)
    pl = estimate_phi_step(st, data)
    assert pl.by_domain == {} and pl.n_valid() == 0
    np.testing.assert_array_equal(pl.phi.pi, 0.5)
    before = _params(st.model)
    optimize_step(st, data)
    ref, _ = _state(FAST.replace(lam_rplr=0.0), bare)
    run_epoch(ref, data, use_rplr=False)
    assert _same(_params(ref.model), _params(st.model)) and not _same(before, _params(st.model))


def test_estimate_step_is_seed_deterministic(small_synth):
    out = []
    for _ in range(2):
        st, data = _state(FAST, small_synth)
        init_phase(st, data, epochs=1)
        pl = estimate_phi_step(st, data)
        out.append(np.concatenate([np.concatenate([r.d, r.w]) for r in pl.by_domain.values()]))
    assert np.array_equal(out[0], out[1])


def test_optimize_before_estimate_rejected(small_synth):
    st, data = _state(FAST, small_synth)
    with pytest.raises(ConfigError):
        optimize_step(st, data)


def test_logged_combined_matches_parts(small_synth):
    result = train(FAST.replace(main_epochs=2), small_synth)
    for m in result.metrics:
        l = m.losses
        assert abs(l["combined"] - (l["j_c"] + l["lam"] * l["j_d_els"] + l["lam_rplr"] * l["j_rplr"])) < 1e-12
    assert result.metrics[-1].losses["j_rplr"] > 0


def test_average_is_unweighted_mean(small_synth):
    m = train(FAST.replace(main_epochs=0), small_synth).metrics[-1]
    assert m.avg_acc == pytest.approx(np.mean(list(m.per_domain_acc.values())), abs=1e-15)


def test_gold_labels_do_not_steer_training(small_synth):
    rng = np.random.default_rng(5)
    from san_mdtc.data import DomainDataset
    scrambled = [DomainDataset(d.name, d.labeled, d.unlabeled, d.num_classes, d.dev, d.test,
                               rng.integers(0, d.num_classes, len(d.unlabeled)))
                 for d in small_synth]
    a = train(FAST, small_synth)
    b = train(FAST, scrambled)
    assert _same(_params(a.model), _params(b.model))
    assert a.metrics[-1].losses == b.metrics[-1].losses
    assert a.metrics[-1].pseudo_acc != b.metrics[-1].pseudo_acc


def test_pseudo_label_accuracy_needs_gold(small_synth):
    assert pseudo_label_accuracy(None, small_synth) == (None, None)


def test_shuffle_needs_two_domains():
    ds = synth_generate(SynthSpec(num_domains=1, n_labeled=20, n_unlabeled=10, n_test=10,
                                  input_dim=60, block=10))
    model = build_model("san", Architecture(60, 2, 1, hidden=(8,), shared_dim=4, specific_dim=2))
    assert 0 <= evaluate(model, ds, "zero").avg <= 1
    with pytest.raises(ConfigError):
        evaluate(model, ds, "shuffle")
    with pytest.raises(ConfigError):
        evaluate(model, ds, "permute")


def test_shuffle_is_seeded(small_synth):
    model = build_model("san", Architecture(70, 2, 3, hidden=(8,), shared_dim=4, specific_dim=2))
    a = evaluate(model, small_synth, "shuffle", seed=3)
    assert a == evaluate(model, small_synth, "shuffle", seed=3)


def test_two_domain_separable_init_phase_dev_accuracy():
    spec = dataclasses.replace(PRESETS["separable"], num_domains=2, n_dev=200, seed=0)
    ds = synth_generate(spec)
    cfg = TrainConfig(hidden=(100, 50), lr=1e-3, lam=1.0, init_epochs=5, main_epochs=0, seed=0)
    m = train(cfg, ds).metrics[-1]
    assert m.avg_dev > 0.95, m.per_domain_dev


@pytest.mark.slow
def test_empty_specific_block_makes_zero_ablation_harmless():
    gaps = []
    for seed in range(5):
        spec = dataclasses.replace(PRESETS["separable"], shared_strength=0.5, specific_strength=0.0,
                                   shift_strength=0.0, seed=seed)
        ds = synth_generate(spec)
        cfg = TrainConfig(hidden=(100, 50), lr=1e-3, lam=1.0, init_epochs=5, main_epochs=10, seed=seed)
        model = train(cfg, ds).model
        gaps.append(evaluate(model, ds, "none").avg - evaluate(model, ds, "zero").avg)
    assert abs(np.mean(gaps)) <= 0.01, gaps


def test_msuda_target_labels_ignored(small_synth, caplog):
    cfg = FAST.replace(msuda_target="d1", main_epochs=1)
    with caplog.at_level(logging.WARNING):
        result = train(cfg, small_synth)
    assert "labels are ignored" in caplog.text
    assert result.metrics[-1].target_acc == result.metrics[-1].per_domain_acc["d1"]
    # the discriminator still sees every domain
    assert result.model.arch.num_domains == 3
    # and relabeling the target changes nothing
    from san_mdtc.data import DomainDataset, LabeledSplit
    flipped = list(small_synth)
    d = flipped[1]
    flipped[1] = DomainDataset(d.name, LabeledSplit(d.labeled.x, 1 - d.labeled.y), d.unlabeled,
                               d.num_classes, d.dev, d.test, d.hidden_gold())
    assert _same(_params(result.model), _params(train(cfg, flipped).model))


def test_resolve_target():
    ds = synth_generate(SynthSpec(n_labeled=5, n_unlabeled=5, n_test=5, input_dim=70, block=10))
    assert resolve_target(ds, None) is None
    assert resolve_target(ds, "d2") == 2 and resolve_target(ds, "1") == 1
    for bad in ("books", "7"):
        with pytest.raises(ConfigError):
            resolve_target(ds, bad)


def test_no_labels_anywhere_rejected(small_synth):
    with pytest.raises(DataError):
        prepare([d.without_labels() for d in small_synth])


def test_discriminator_ascends_with_frozen_extractor(small_synth):
    st, data = _state(FAST, small_synth)
    fs_before = [p.value.copy() for p in st.model.fs.params()]
    n = iterations_per_epoch(data, FAST.batch_size) * FAST.n_critic
    means = [np.mean([discriminator_step(st, data) for _ in range(n)]) for _ in range(10)]
    assert np.polyfit(np.arange(10), means, 1)[0] > 0
    assert means[-1] > means[0]
    assert all(np.array_equal(a, p.value) for a, p in zip(fs_before, st.model.fs.params()))


def test_combined_step_gradients_two_feature_toy():
    arch = Architecture(2, 2, 2, hidden=(4,), shared_dim=3, specific_dim=2, dropout=0.2)
    for seed in range(3):
        model = jitter_biases(build_model("san", arch, seed=seed), seed)
        rng = np.random.default_rng(seed)
        lab = [LabeledBatch(i, rng.standard_normal((3, 2)), rng.integers(0, 2, 3)) for i in range(2)]
        mix = [DomainBatch(i, rng.standard_normal((4, 2))) for i in range(2)]
        pse = [PseudoBatch(i, rng.standard_normal((3, 2)), rng.integers(0, 2, 3),
                           np.array([0.9, 0.0, 0.7])) for i in range(2)]
        with frozen_noise(*model.modules()):
            model.zero_grad()
            main_objective(model, lab, mix, pse, 0.5, 1.0, 0.9)
            r = grad_check(lambda: main_objective(model, lab, mix, pse, 0.5, 1.0, 0.9,
                                                  backward=False).combined, model.main_params())
        assert r.max_rel_err < 1e-4, r.per_param


def test_abort_wraps_errors(small_synth, monkeypatch, tmp_path):
    import san_mdtc.trainer as tr

    def boom(*a, **k):
        raise DataError("disk on fire")
    monkeypatch.setattr(tr, "estimate_pseudo_labels", boom)
    with pytest.raises(TrainingAborted, match="epoch 2"):
        train(FAST, small_synth, tmp_path)
    # the init-epoch record and checkpoint survive
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 2
    assert (tmp_path / "best.npz").exists()


def test_runtime_report_formatting(small_synth):
    rep = RuntimeReport(1.23456, 2.0, 10, 30)
    assert rep.ratio == pytest.approx(0.61728)
    lines = rep.table().splitlines()
    assert lines[1] == "san\t1.235\t10" and lines[-1] == "ratio\t0.617\t"
    cmp = runtime_compare(FAST, small_synth, epochs=1)
    assert cmp.san_specific_params < cmp.shared_private_specific_params
    st, data = _state(FAST, small_synth)
    init_phase(st, data, epochs=1)
    assert runtime_report(st) == {}
    result = train(FAST, small_synth)
    assert set(runtime_report(result.state)) == {"init", "main", "estimate", "eval"}
