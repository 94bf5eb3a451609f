import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiermatch.ablation import run_ablation, write_ablation
from hiermatch.data import Dataset, RegionFeatureRecord, SyntheticSpec, generate, random_merge_tree
from hiermatch.embedder import ModelConfig, embed_single
from hiermatch.hierarchy import HierarchyTrace, TraceEntry
from hiermatch.params import CheckpointError, ParamStore
from hiermatch.training import (
    ConfigError,
    NumericError,
    TrainConfig,
    evaluate,
    init_state,
    load_checkpoint,
    load_config,
    merge_fidelity,
    parse_kv,
    ranks_from_distances,
    save_checkpoint,
    trace_record,
    train,
)

TINY = dict(d=6, d_h=3, batch=2, epochs=4, lr=1e-3)


def tiny_data(n=6, n_test=2, seed=0, **kw):
    return generate(SyntheticSpec(n_identities=n, n_test=n_test, d_raw=5, n_regions_photo=4,
                                  n_strokes_sketch=(3, 4), seed=seed, **kw))


def noise_data(g, seed):
    """Sketches and photos drawn independently, so no identity signal exists."""
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(g):
        for mod in ("sketch", "photo"):
            n = int(rng.integers(2, 5))
            recs.append(RegionFeatureRecord(i, mod, rng.standard_normal((n, 4)), list(range(n))))
    return Dataset(4, recs, {i: "test" for i in range(g)})


# ---- evaluation ---------------------------------------------------------------

def test_gallery_of_one_is_always_right():
    ds = tiny_data(n=4, n_test=1)
    cfg = TrainConfig(**TINY)
    rep = evaluate(init_state(cfg, ds.d_raw).params, cfg, ds)
    assert rep.ranks == [1] and rep.acc_at_1 == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 25), st.integers(0, 10_000))
def test_acc1_never_exceeds_acc10(g, seed):
    dist = np.random.default_rng(seed).random((g, g))
    r = np.asarray(ranks_from_distances(dist))
    assert np.mean(r <= 1) <= np.mean(r <= 10)
    assert sorted(set(r)) == sorted(set(r) & set(range(1, g + 1)))


def test_ties_resolve_in_gallery_order():
    assert ranks_from_distances(np.zeros((3, 3))) == [1, 2, 3]


def test_untrained_model_on_signal_free_data_is_at_chance():
    g, seeds = 10, 30
    hits = 0
    for seed in range(seeds):
        cfg = TrainConfig(d=6, d_h=3, seed=seed)
        params = ParamStore.init(4, 6, 3, seed=seed)
        hits += round(evaluate(params, cfg, noise_data(g, seed)).acc_at_1 * g)
    n, p = g * seeds, 1 / g
    assert abs(hits - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_re_evaluation_gives_an_equal_report():
    ds = tiny_data()
    cfg = TrainConfig(**TINY)
    params = init_state(cfg, ds.d_raw).params
    assert evaluate(params, cfg, ds) == evaluate(params, cfg, ds)


def test_paired_and_single_agree_without_coattention():
    ds = tiny_data()
    cfg = TrainConfig(**TINY, no_coattn=True)
    params = init_state(cfg, ds.d_raw).params
    assert evaluate(params, cfg, ds, pairing="paired").ranks == evaluate(params, cfg, ds).ranks


# ---- training ---------------------------------------------------------------------

def test_resume_is_bit_exact(tmp_path):
    ds = tiny_data()
    cfg = TrainConfig(**TINY)
    straight = train(cfg, ds)
    half = train(cfg, ds, out_dir=tmp_path, max_epochs=2)
    assert half.epoch == 2
    cfg2, state, d_raw = load_checkpoint(tmp_path)
    assert cfg2 == cfg and d_raw == ds.d_raw
    resumed = train(cfg2, ds, state=state)
    assert resumed.losses == straight.losses
    for k, v in straight.params.arrays().items():
        assert np.array_equal(resumed.params[k].data, v), k


def test_two_identities_separate_quickly():
    ds = tiny_data(n=3, n_test=1, noise_scale=0.0)
    cfg = TrainConfig(d=6, d_h=3, batch=2, epochs=200, lr=1e-2, patience=200)
    state = train(cfg, ds)
    assert min(state.losses) < 1e-3


@pytest.mark.parametrize("flags", [{"no_coattn": True, "no_hierarchy": True},
                                   {"explicit_hierarchy": True}])
def test_variants_train(flags):
    ds = tiny_data()
    state = train(TrainConfig(**TINY, **flags), ds)
    assert len(state.losses) == 4 and all(math.isfinite(v) for v in state.losses)


def test_non_finite_loss_dumps_last_good_state(tmp_path):
    ds = tiny_data()
    cfg = TrainConfig(**TINY)
    state = init_state(cfg, ds.d_raw)
    state.params["proj.W"].data[0, 0] = np.nan
    with pytest.raises(NumericError):
        train(cfg, ds, out_dir=tmp_path, state=state)
    _, dumped, _ = load_checkpoint(tmp_path / "failed")
    assert dumped.epoch == 0


def test_training_needs_two_identities():
    ds = tiny_data(n=3, n_test=2)
    with pytest.raises(ValueError):
        train(TrainConfig(**TINY), ds)


def test_log_written_per_epoch(tmp_path):
    train(TrainConfig(**TINY), tiny_data(), out_dir=tmp_path)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,seconds" and len(lines) == 5


# ---- config & checkpoints -------------------------------------------------------

def test_parse_kv_ignores_comments():
    assert parse_kv("# note\n\nd = 8\nlr=0.5  # trailing\n") == {"d": "8", "lr": "0.5"}


@pytest.mark.parametrize("text", ["d = eight\n", "mystery = 1\n", "no_coattn = maybe\n",
                                  "lr = -1\n", "just words\n"])
def test_bad_configs_raise_config_error(tmp_path, text):
    f = tmp_path / "bad.cfg"
    f.write_text(text)
    with pytest.raises(ConfigError):
        load_config(f)


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(**TINY, no_hierarchy=True)
    f = tmp_path / "c.cfg"
    f.write_text("".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items()))
    assert load_config(f) == cfg


def test_corrupted_checkpoint_is_detected(tmp_path):
    ds = tiny_data()
    cfg = TrainConfig(**TINY)
    save_checkpoint(init_state(cfg, ds.d_raw), cfg, tmp_path, ds.d_raw)
    blob = next(p for p in tmp_path.iterdir() if p.suffix == ".bin")
    raw = bytearray(blob.read_bytes())
    raw[11] ^= 0x40
    blob.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


# ---- tracing ------------------------------------------------------------------

def test_two_leaf_trace_is_one_line():
    ds = tiny_data()
    rec = RegionFeatureRecord(0, "sketch", np.ones((2, ds.d_raw)), [0, 1],
                              [TraceEntry(0, "sketch", 0, 1, 2)])
    cfg = TrainConfig(**TINY)
    res = trace_record(init_state(cfg, ds.d_raw).params, cfg, rec)
    assert len(res.trace) == 1 and len(res.soft) == 1 and res.soft[0].shape == (1,)
    assert res.fidelity == 1.0


def test_replaying_an_emitted_trace_reproduces_the_final_node():
    ds = tiny_data()
    cfg = TrainConfig(**TINY)
    params = init_state(cfg, ds.d_raw).params
    rec = ds.records[0]
    res = trace_record(params, cfg, rec)
    again = HierarchyTrace.from_text(res.trace.to_text())
    v, _ = embed_single(rec.features, params, ModelConfig(d=6, d_h=3, explicit_hierarchy=True),
                        trace=again, branch=rec.modality)
    assert np.array_equal(v.data[0], res.final)


def enumerated_fidelity(truth, n):
    """Exact mean fidelity of a uniform random merge policy, by enumerating every merge order."""
    total = 0.0

    def rec(live, nxt, entries, weight):
        nonlocal total
        if len(live) == 1:
            total += weight * merge_fidelity(entries, truth, n)
            return
        pairs = list(itertools.combinations(range(len(live)), 2))
        for i, j in pairs:
            nl = live[:i] + [nxt] + live[i + 1:j] + live[j + 1:]
            rec(nl, nxt + 1, entries + [TraceEntry(0, "sketch", live[i], live[j], nxt)],
                weight / len(pairs))

    rec(list(range(n)), n, [], 1.0)
    return total


@pytest.mark.parametrize("n", [3, 4, 5])
def test_random_policy_fidelity_matches_enumeration(n):
    rng = np.random.default_rng(n)
    truth = random_merge_tree(n, rng)
    exact = enumerated_fidelity(truth, n)
    mc = np.mean([merge_fidelity(random_merge_tree(n, rng), truth, n) for _ in range(4000)])
    assert mc == pytest.approx(exact, abs=0.02)
    # an untrained model on unstructured inputs behaves like a random policy
    model_fid = []
    for seed in range(150):
        r = np.random.default_rng(1000 + seed)
        cfg = TrainConfig(d=6, d_h=3, seed=seed)
        rec = RegionFeatureRecord(0, "sketch", r.standard_normal((n, 5)), list(range(n)), truth)
        model_fid.append(trace_record(ParamStore.init(5, 6, 3, seed=seed), cfg, rec).fidelity)
    assert np.mean(model_fid) == pytest.approx(exact, abs=0.08)


# ---- ablation -------------------------------------------------------------------

def test_ablation_table_has_one_row_per_mode(tmp_path):
    ds = tiny_data()
    res = run_ablation(TrainConfig(**{**TINY, "epochs": 1}), ds,
                       modes=("full", "no_coattn", "no_hierarchy", "explicit_hierarchy", "coarse"))
    table = res.to_table().splitlines()
    assert [line.split()[0] for line in table[2:]] == ["full", "no_coattn", "no_hierarchy",
                                                       "explicit_hierarchy", "coarse"]
    paths = write_ablation(res, tmp_path)
    assert all(p.exists() for p in paths.values())


def test_failing_variant_is_marked_and_full_survives(monkeypatch):
    import hiermatch.ablation as abl

    real = abl.train

    def flaky(cfg, ds, *a, **k):
        if cfg.no_coattn:
            raise NumericError("boom")
        return real(cfg, ds, *a, **k)

    monkeypatch.setattr(abl, "train", flaky)
    res = run_ablation(TrainConfig(**{**TINY, "epochs": 1}), tiny_data(), modes=("full", "no_coattn"))
    rows = {line.split()[0]: line for line in res.to_table().splitlines()[2:]}
    assert "FAILED 1/1" in rows["no_coattn"]
    assert rows["full"].endswith("ok")
    assert "NumericError: boom" in res.to_csv()
