import dataclasses

import numpy as np
import pytest

from mdnal import acquisition as acq
from mdnal import harness as H
from mdnal.detector import init_params
from mdnal.losses import TrainingDiverged

from conftest import tiny_config


def check_partition(state, data):
    lab, unl = set(state.labeled), set(state.unlabeled)
    assert not lab & unl
    assert lab | unl == set(data.train)


def test_cycle_bookkeeping(tiny, tiny_data):
    state = H.initial_state(tiny, tiny_data, 0)
    assert len(state.labeled) == 20
    check_partition(state, tiny_data)
    for k in (1, 2):
        state = H.run_cycle(state, tiny, tiny_data)
        assert len(state.labeled) == 20 + 10 * k
        assert state.cycle == k
        check_partition(state, tiny_data)
    assert [r.labeled_count for r in state.records] == [20, 30]


def test_same_seed_same_trial(tiny, tiny_data):
    a = H.run_trial(tiny, tiny_data, 1)
    b = H.run_trial(tiny, tiny_data, 1)
    for ra, rb in zip(a.records, b.records):
        assert (ra.selection, ra.map50, ra.map75, ra.init_hash) == (rb.selection, rb.map50, rb.map75, rb.init_hash)


def test_random_acquisition_is_uniform_draw(tiny, tiny_data):
    state = H.initial_state(tiny, tiny_data, 2)
    nxt = H.run_cycle(state, tiny, tiny_data, method="random")
    assert nxt.records[0].selection == acq.random_score(state.unlabeled, H.cycle_seed(2, 1), tiny.budget)


def test_retrain_from_scratch(tiny, tiny_data):
    state = H.run_trial(tiny, tiny_data, 5)
    for r in state.records:
        fresh = init_params(tiny.network, H.cycle_seed(5, r.cycle))
        assert r.init_hash == H.params_hash(fresh)
    assert state.records[0].init_hash != state.records[1].init_hash


@pytest.mark.parametrize("method", ["entropy", "coreset"])
def test_baselines_select_budget(tiny, tiny_data, method):
    state = H.run_cycle(H.initial_state(tiny, tiny_data, 0), tiny, tiny_data, method=method)
    sel = state.records[0].selection
    assert len(sel) == len(set(sel)) == tiny.budget


def test_pool_exhaustion_terminates_cleanly(tiny_data):
    cfg = tiny_config(initial_labeled=60, budget=20, cycles=1)
    state = H.initial_state(cfg, tiny_data, 0)
    state = dataclasses.replace(state, labeled=state.labeled + state.unlabeled[:-5], unlabeled=state.unlabeled[-5:])
    out = H.run_cycle(state, cfg, tiny_data)
    assert out.exhausted and out.records[0].selection == []


def test_infeasible_config(tiny_data):
    with pytest.raises(ValueError):
        H.initial_state(tiny_config(initial_labeled=60, budget=20, cycles=2), tiny_data, 0)
    with pytest.raises(ValueError):
        tiny_config(acquisition="bald")


def test_report_rows_and_zero_std(tiny, tiny_data):
    twin = {k: H.run_trial(tiny, tiny_data, 3) for k in ("a", "b")}
    for row in H.summarize(twin):
        assert row[2] == 2 and row[4] == 0.0 and row[6] == 0.0
    rep = H.run_experiment(dataclasses.replace(tiny, seeds=(3, 4)), data=tiny_data)
    assert [r[2] for r in rep.summary] == [2, 2]
    assert rep.complete


def test_summary_arithmetic():
    states = {s: H.ALState(s, [], [], 1, [H.CycleRecord(1, 10, v, v / 2, [], "", 0.0)])
              for s, v in zip((0, 1, 2), (68.84, 69.01, 68.75))}
    (row,) = H.summarize(states)
    assert row[3] == pytest.approx((68.84 + 69.01 + 68.75) / 3)
    assert row[4] == pytest.approx(np.std([68.84, 69.01, 68.75]))


def test_divergence_flags_incomplete(tiny, tiny_data, monkeypatch):
    real = H.fit_and_evaluate

    def flaky(cfg, data, seed, labeled):
        if len(labeled) > cfg.initial_labeled:
            raise TrainingDiverged("boom")
        return real(cfg, data, seed, labeled)

    monkeypatch.setattr(H, "fit_and_evaluate", flaky)
    rep = H.run_experiment(dataclasses.replace(tiny, seeds=(0,)), data=tiny_data)
    assert not rep.complete
    assert len(rep.states[0].records) == 1 and "boom" in rep.states[0].aborted


def test_run_directory_outputs(tiny, tiny_data, tmp_path):
    H.run_experiment(tiny, tmp_path, data=tiny_data)
    for name in ("config.ini", "metrics.csv", "selections.csv", "summary.csv", "timing.csv"):
        assert (tmp_path / name).exists()
    header, rows = H.read_csv(tmp_path / "metrics.csv")
    assert tuple(header) == H.METRICS_HEADER and len(rows) == 4
    assert H.load_config(tmp_path / "config.ini") == tiny
    for s in tiny.seeds:
        d = tmp_path / f"seed{s}"
        assert (d / "cycle1.ckpt").exists() and (d / "scores_cycle2.csv").exists()
        st = H.ALState.from_json((d / "state.json").read_text())
        assert st.to_json() == H.ALState.from_json(st.to_json()).to_json()
    _, sel = H.read_csv(tmp_path / "selections.csv")
    assert len(sel) == len(tiny.seeds) * tiny.cycles * tiny.budget


def test_compare_aggregations_shares_first_cycle(tiny, tiny_data, tmp_path):
    cfg = dataclasses.replace(tiny, seeds=(0,))
    reps = H.compare_aggregations(cfg, tmp_path, data=tiny_data)
    assert len(reps) == 15
    first = {label: rep.summary[0][3] for label, rep in reps.items()}
    assert len(set(first.values())) == 1
    header, rows = H.read_csv(tmp_path / "agg_table.csv")
    assert tuple(header) == H.AGG_HEADER
    for c in (1, 2):
        assert sum(1 for r in rows if r[1] == str(c)) == 15


def test_overlap_matrix_shape(tiny, tiny_data, tmp_path):
    names, M, mats = H.overlap_analysis(tiny, tmp_path, data=tiny_data)
    assert names == ["al_b", "ep_b", "al_c", "ep_c"]
    np.testing.assert_array_equal(np.diag(M), 100.0)
    np.testing.assert_array_equal(M, M.T)
    assert len(mats) == len(tiny.seeds)
    header, rows = H.read_csv(tmp_path / "overlap.csv")
    assert header[0] == "type" and len(rows) == 4


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = tiny_config(aggregation="sum_ep", acquisition="random")
        H.dump_config(cfg, tmp_path / "c.ini")
        assert H.load_config(tmp_path / "c.ini") == cfg

    def test_partial_file_uses_defaults(self, tmp_path):
        (tmp_path / "c.ini").write_text("[experiment]\nbudget = 7\n[network]\nhead = efficient\n")
        cfg = H.load_config(tmp_path / "c.ini")
        assert cfg.budget == 7 and cfg.network.head == "efficient"
        assert cfg.cycles == H.ExperimentConfig().cycles

    def test_inline_comments(self, tmp_path):
        (tmp_path / "c.ini").write_text("[network]\nhead = efficient   # or full_gmm\nbackbone = 8, 2; 8, 2\n")
        net = H.load_config(tmp_path / "c.ini").network
        assert net.head == "efficient" and net.backbone == ((8, 2), (8, 2))

    @pytest.mark.parametrize("text", ["[bogus]\na = 1\n", "[dataset]\nnope = 1\n", "[dataset]\nn_scenes = x\n",
                                      "no section header\n", "[experiment]\naggregation = median\n"])
    def test_malformed(self, tmp_path, text):
        (tmp_path / "c.ini").write_text(text)
        with pytest.raises(ValueError):
            H.load_config(tmp_path / "c.ini")
