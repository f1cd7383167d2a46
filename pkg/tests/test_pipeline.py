import json
import math

import numpy as np
import pytest

from predinfo import bho, cli, gib, miest, rnn
from predinfo.pipeline import classify, data, plot, sweep


def _write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_ingest_three_sequences(tmp_path):
    f = _write_lines(tmp_path / "d.jsonl", [
        {"split": "train", "label": "a", "seq": [[0.0, 1.0], [2.0, 3.0]]},
        {"split": "val", "label": None, "seq": [[1.0, 1.0]]},
        {"split": "test", "label": "b", "seq": [[5.0, 6.0], [7.0, 8.0], [9.0, 1.5]]},
    ])
    ds = data.ingest(f)
    assert len(ds) == 3 and ds.dim == 2
    assert ds.labels["val"] == [None]
    np.testing.assert_array_equal(ds.split("test")[0][2], [9.0, 1.5])


def test_short_sequences_are_rejected_and_counted(tmp_path):
    recs = [{"split": "train", "label": None, "seq": [[float(i)] for i in range(n)]} for n in (35, 36, 50, 10)]
    ds = data.ingest(_write_lines(tmp_path / "d.jsonl", recs), bho.WindowSpec.centered(18, 18))
    assert [len(s) for s in ds.split("train")] == [36, 50]
    assert ds.rejected["train"] == 2


@pytest.mark.parametrize("records, msg", [
    ([{"split": "train", "seq": [[1.0]]}, {"split": "train", "seq": [[1.0, 2.0]]}], "ragged"),
    ([{"split": "train", "seq": [[1.0]] * 40}, {"split": "test", "seq": [[1.0]] * 3}], "empty"),
    ([{"split": "holdout", "seq": [[1.0]]}], "unknown split"),
    ([], "no records"),
])
def test_ingest_errors(tmp_path, records, msg):
    f = _write_lines(tmp_path / "d.jsonl", records)
    with pytest.raises(data.DatasetError, match=msg):
        data.ingest(f, 36)


def test_malformed_line(tmp_path):
    f = tmp_path / "d.jsonl"
    f.write_text('{"split": "train", "seq": [[1.0]]}\nnot json\n')
    with pytest.raises(data.DatasetError, match=":2:"):
        data.ingest(f)


def test_export_round_trip_is_exact_and_idempotent(tmp_path):
    batch = bho.simulate(bho.BHOParams(), 40, 30, seed=3)
    ds = data.from_batch(batch, label="g20", positions_only=False)
    data.export(tmp_path / "a.jsonl", ds)
    back = data.ingest(tmp_path / "a.jsonl")
    got = np.stack(back.split("train") + back.split("val") + back.split("test"))
    np.testing.assert_array_equal(got, batch.data)
    data.export(tmp_path / "b.jsonl", back)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert set(back.labels["train"]) == {"g20"}


def test_augment_counts_and_identity():
    ds = data.Dataset(dim=1)
    rng = np.random.default_rng(0)
    for i in range(800):
        ds.add("train", rng.normal(size=(5, 1)), label=str(i % 2))
    ds.add("test", np.ones((5, 1)))
    aug = data.augment_scale(ds, 0.15, copies=4, rng=1)
    assert len(aug.split("train")) == 4000 and len(aug.split("test")) == 1
    assert aug.labels["train"][800:1600] == ds.labels["train"]
    ratios = [aug.split("train")[800 + i] / ds.split("train")[i] for i in range(800)]
    # one factor per sequence
    assert all(np.allclose(r, r[0]) for r in ratios)
    assert np.std([r[0, 0] for r in ratios]) == pytest.approx(0.15, rel=0.15)
    same = data.augment_scale(ds, 0.0, copies=2, rng=1)
    for i in range(800):
        np.testing.assert_array_equal(same.split("train")[800 + i], ds.split("train")[i])
    with pytest.raises(ValueError):
        data.augment_scale(ds, -0.1)


def test_augmentation_helps_small_data_critic():
    w = bho.WindowSpec.centered(18, 18)
    joint = bho.window_covariances(bho.BHOParams(), w)
    spec = gib.ib_spectrum(joint)
    enc = gib.optimal_projection(spec, gib.beta_for_past_information(spec, 2.0))
    src = bho.BHOSource(seq_len=36)
    cfg = miest.EarlyStopConfig(max_steps=1500, patience=500, eval_every=100, layers=(64, 64, 16), eval_batch=1024)

    def pairs(seqs, seed):
        return seqs[:, 18:, 0], enc.encode(seqs[:, :18, 0], np.random.default_rng(seed))

    for seed in range(2):
        rng = np.random.default_rng(seed)
        ds = data.Dataset(dim=1)
        for s in src.sample(200, rng):
            ds.add("train", s)
        val = pairs(src.sample(1024, rng), 99)
        scores = []
        for d in (ds, data.augment_scale(ds, 0.15, copies=4, rng=seed)):
            res = miest.train_critic(pairs(d.stacked("train"), 7), val, cfg, np.random.default_rng(seed + 10))
            scores.append(res.best_val)
        assert scores[1] >= scores[0], scores


# ---------------------------------------------------------------------------
# sweep

TINY = dict(sigmas=(0.1, 0.5), seeds=(0,), hidden_dim=4, train_steps=20, critic_steps=60,
            critic_layers=(16, 8), n_train=256, n_val=256, n_test=256, total_len=40, split_index=20)


def test_config_parse_and_round_trip():
    cfg = sweep.parse_config("""
        # comment
        sigmas = 0.05, 0.15, 0.5
        cells = vanilla, gru
        seeds = 0,1
        past_critic = yes
    """)
    assert cfg.sigmas == (0.05, 0.15, 0.5) and cfg.cells == ("vanilla", "gru") and cfg.past_critic
    assert sweep.parse_config(sweep.format_config(cfg)) == cfg
    assert sweep.parse_config(sweep.format_config(sweep.SweepConfig())) == sweep.SweepConfig()
    assert len(sweep.default_sigmas()) == 16
    with pytest.raises(ValueError, match="unknown key"):
        sweep.parse_config("sigma = 1")


@pytest.mark.parametrize("kw", [dict(sigmas=()), dict(seeds=()), dict(sigmas=(0.1, 0.0)), dict(modes=("dropout",)),
                                dict(cells=("transformer",)), dict(split_index=5)])
def test_bad_sweep_configs(kw):
    with pytest.raises(ValueError):
        sweep.SweepConfig(**kw)


def test_empty_grid_fails_before_training(tmp_path, monkeypatch):
    monkeypatch.setattr(rnn, "train", lambda *a, **k: pytest.fail("training started"))
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("sigmas =\n")
    assert cli.main(["sweep", "--config", str(cfg_file), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_plan_trains_posthoc_once_per_seed():
    cfg = sweep.SweepConfig(sigmas=(0.1, 0.2, 0.3), seeds=(0, 1))
    jobs = sweep.plan_jobs(cfg)
    assert sum(j[2] == "posthoc_noise" for j in jobs) == 2
    assert sum(j[2] == "train_with_noise" for j in jobs) == 6


@pytest.fixture(scope="module")
def tiny_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    cfg = sweep.SweepConfig(**TINY)
    return cfg, out, sweep.run_sweep(cfg, out / "a")


def test_tiny_sweep_outputs(tiny_sweep):
    cfg, out, res = tiny_sweep
    assert not res.failures
    assert len(res.points) == 4
    assert {(p.mode, p.train_noise_sigma) for p in res.points} == {
        ("train_with_noise", 0.1), ("train_with_noise", 0.5), ("posthoc_noise", 0.0)}
    assert sweep.dpi_violations(res.points) == []
    assert all(p.i_past_lower <= p.i_past_upper for p in res.points)
    frontier = plot.read_frontier_csv(res.frontier_csv)
    assert frontier.shape[1] == 2 and np.all(np.diff(frontier[:, 1]) >= -1e-12)
    assert sweep.load_config(out / "a" / "config.txt") == cfg
    manifest = json.loads((out / "a" / "manifest.json").read_text())
    assert manifest["points"] == 4 and manifest["failures"] == []
    assert len(list((out / "a" / "models").glob("*.ckpt"))) == 3
    assert set(sweep.median_future_by_sigma(res.points)) == {0.1, 0.5}


def test_sweep_rows_are_bit_reproducible(tiny_sweep):
    cfg, out, res = tiny_sweep
    sweep.load_splits.cache_clear()
    again = sweep.run_sweep(sweep.load_config(out / "a" / "config.txt"), out / "b")
    assert (out / "a" / "points.csv").read_bytes() == (out / "b" / "points.csv").read_bytes()
    assert again.points == res.points


def test_worker_pool_matches_serial(tiny_sweep):
    _, out, _ = tiny_sweep
    sweep.run_sweep(sweep.SweepConfig(**{**TINY, "workers": 2}), out / "pool")
    assert (out / "pool" / "points.csv").read_bytes() == (out / "a" / "points.csv").read_bytes()


def test_sweep_records_divergence_and_continues(monkeypatch):
    real = rnn.train

    def flaky(model, source, tc, callback=None):
        if model.config.noise_sigma == 0.5:
            raise rnn.TrainingDiverged("loss became nan at step 3")
        return real(model, source, tc, callback)

    monkeypatch.setattr(rnn, "train", flaky)
    res = sweep.run_sweep(sweep.SweepConfig(**{**TINY, "modes": ("train_with_noise",)}))
    assert len(res.points) == 1 and res.points[0].eval_noise_sigma == 0.1
    assert len(res.failures) == 1 and "TrainingDiverged" in res.failures[0]["error"]


def test_dpi_audit_flags_violations():
    ok = miest.InfoPlanePoint("m", "vanilla", 0.1, 0.1, 0, 1.0, 1.2, 1.25, 100)
    bad = miest.InfoPlanePoint("m", "vanilla", 0.1, 0.1, 0, 1.0, 1.2, 1.35, 100)
    assert sweep.dpi_violations([ok, bad]) == [bad]


# ---------------------------------------------------------------------------
# naive Bayes


def _model(seed, hidden=4):
    return rnn.RNNModel.create(rnn.RNNConfig(hidden_dim=hidden, seed=seed))


def test_identical_models_give_even_posterior():
    x = np.random.default_rng(0).normal(size=(5, 20, 1))
    res = classify.naive_bayes([_model(1), _model(1)], x)
    np.testing.assert_allclose(res.posterior, 0.5, atol=1e-15)


def test_posterior_properties():
    rng = np.random.default_rng(1)
    ll = rng.normal(scale=300.0, size=(50, 4))
    post = classify.posterior_from_loglik(ll)
    assert np.max(np.abs(post.sum(axis=1) - 1.0)) < 1e-12
    np.testing.assert_allclose(classify.posterior_from_loglik(ll + 1234.5), post, rtol=1e-12, atol=1e-300)
    prior = np.array([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(np.argmax(classify.posterior_from_loglik(ll, prior), axis=1),
                                  np.argmax(ll + np.log(prior), axis=1))
    with pytest.raises(ValueError, match="sum to 1"):
        classify.posterior_from_loglik(ll, [0.5, 0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        classify.posterior_from_loglik(ll, [0.5, 0.5])


def test_naive_bayes_prior_and_input_checks():
    x = np.random.default_rng(2).normal(size=(20, 1))
    models = [_model(1), _model(2)]
    res = classify.naive_bayes(models, x, prior=[0.3, 0.7])
    assert res.posterior.shape == (1, 2) and res.posterior.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        classify.naive_bayes(models, x, prior=[0.3, 0.3])
    other = rnn.RNNModel.create(rnn.RNNConfig(hidden_dim=4, input_dim=2))
    with pytest.raises(ValueError):
        classify.naive_bayes([models[0], other], x)


# ---------------------------------------------------------------------------
# plot


def test_empty_points_plot(tmp_path):
    miest.write_points_csv([], tmp_path / "p.csv")
    svg = plot.emit_plot(tmp_path / "p.csv", tmp_path / "p.svg")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert "<circle" not in svg and "I(z; past)" in svg


def test_plot_point_bar_and_determinism(tmp_path):
    p = miest.InfoPlanePoint("m", "vanilla", 0.0, 0.3, 0, 1.5, 1.5, 1.0, 10, mode="posthoc_noise")
    q = miest.InfoPlanePoint("n", "vanilla", 0.1, 0.1, 0, 0.5, 0.9, 0.4, 10, mode="train_with_noise")
    miest.write_points_csv([p, q], tmp_path / "p.csv")
    plot.write_frontier_csv(np.array([[0.0, 0.0], [1.0, 0.8], [2.0, 1.1]]), tmp_path / "f.csv")
    a = plot.emit_plot(tmp_path / "p.csv", tmp_path / "a.svg", tmp_path / "f.csv")
    b = plot.emit_plot(tmp_path / "p.csv", tmp_path / "b.svg", tmp_path / "f.csv")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes() and a == b
    bars = [l for l in a.splitlines() if 'stroke-width="2"' in l]
    x1 = [float(l.split('x1="')[1].split('"')[0]) for l in bars]
    x2 = [float(l.split('x2="')[1].split('"')[0]) for l in bars]
    widths = sorted(abs(u - v) for u, v in zip(x1, x2))
    assert widths[0] == 0.0 and widths[1] > 0
    assert "<polyline" in a and "<rect x=" in a and "<circle" in a


def test_malformed_csvs(tmp_path):
    (tmp_path / "p.csv").write_text("model_id,cell\nm,vanilla\n")
    with pytest.raises(ValueError):
        plot.emit_plot(tmp_path / "p.csv", tmp_path / "o.svg")
    miest.write_points_csv([], tmp_path / "ok.csv")
    (tmp_path / "f.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        plot.emit_plot(tmp_path / "ok.csv", tmp_path / "o.svg", tmp_path / "f.csv")


# ---------------------------------------------------------------------------
# command line


def test_cli_round_trip_and_exit_codes(tmp_path, capsys):
    d = str(tmp_path / "bho.jsonl")
    assert cli.main(["bho-gen", "--n", "60", "--steps", "40", "--out", d]) == 0
    assert len(data.ingest(d)) == 60
    ck = str(tmp_path / "m.ckpt")
    assert cli.main(["train", "--data", d, "--hidden", "4", "--steps", "5", "--seq-len", "40", "--sigma", "0.1",
                     "--label", "g20", "--out", ck]) == 0
    assert rnn.load_checkpoint(ck)[1]["label"] == "g20"
    assert cli.main(["classify", "--models", ck, ck, "--data", d, "--out", str(tmp_path / "c.csv")]) == 0
    assert cli.main(["gib-frontier", "--points", "20", "--out", str(tmp_path / "f.csv")]) == 0
    assert plot.read_frontier_csv(tmp_path / "f.csv").shape == (20, 2)

    assert cli.main(["train"]) == 1  # missing --out
    assert cli.main(["plot", "--points", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "x.svg")]) == 1
    assert cli.main(["estimate", "--checkpoint", ck, "--sigma", "0", "--out", str(tmp_path / "e.csv")]) == 1
    assert cli.main(["gib-frontier", "--omega", "60", "--gamma", "1", "--dt", "0.05", "--out", str(tmp_path / "u.csv")]) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_cli_estimate_writes_point(tmp_path):
    ck = tmp_path / "m.ckpt"
    rnn.save_checkpoint(rnn.RNNModel.create(rnn.RNNConfig(hidden_dim=4, noise_sigma=0.2)), ck)
    out = tmp_path / "e.csv"
    assert cli.main(["estimate", "--checkpoint", str(ck), "--n-train", "256", "--n-val", "128", "--n-test", "256",
                     "--total-len", "40", "--split-index", "20", "--out", str(out)]) == 0
    (p,) = miest.read_points_csv(out)
    assert p.eval_noise_sigma == 0.2 and p.i_past_lower <= p.i_past_upper and math.isfinite(p.i_future_nce)
