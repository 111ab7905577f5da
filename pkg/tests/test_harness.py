import os

import numpy as np
import pytest

from re3lab import config as cfgmod
from re3lab.cli import main
from re3lab.metrics import COLUMNS, MetricsFormatError, MetricsRow, MetricsWriter, parse_metrics, read_metrics
from re3lab.nn import ConfigurationError, load_checkpoint, save_checkpoint
from re3lab.plot import aggregate, load_curves, plot_files
from re3lab.run import evaluate_checkpoint, finetune, pretrain, running_std_of, train

TINY = [
    "task=Empty16", "total_steps=1600", "eval.every=800", "eval.episodes=4", "max_steps=40",
    "intrinsic.capacity=400",
]


def tiny(*extra, base=TINY):
    return cfgmod.parse("", list(base) + list(extra))


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# ---- training runs ---------------------------------------------------------


def test_deterministic_runs_are_byte_identical(tmp_path):
    a = train(tiny("seed=3"), str(tmp_path / "a"))
    b = train(tiny("seed=3"), str(tmp_path / "b"))
    assert read_bytes(a.metrics_path) == read_bytes(b.metrics_path)
    rows = read_metrics(a.metrics_path)
    assert [r.env_step for r in rows] == [800, 1600]
    assert all(r.wall_seconds == 0.0 for r in rows)
    assert rows[0].cumulative_flops < rows[1].cumulative_flops


def test_final_eval_off_grid(tmp_path):
    res = train(tiny("total_steps=2000"), str(tmp_path))
    assert [r.env_step for r in res.rows] == [800, 1600, 2000]


def test_provider_none_equals_beta_zero(tmp_path):
    none = train(tiny("intrinsic.provider=none"), str(tmp_path / "none"))
    zero = train(tiny("intrinsic.beta0=0"), str(tmp_path / "zero"))
    assert [r.eval_return_mean for r in none.rows] == [r.eval_return_mean for r in zero.rows]
    assert none.learner.model.digest() == zero.learner.model.digest()


def test_encoder_hash_fixed_through_run(tmp_path):
    res = train(tiny("intrinsic.beta0=0.5"), str(tmp_path))
    assert len(res.encoder_digests) == len(res.rows) >= 2
    assert all(d == res.encoder_digests[0] for d in res.encoder_digests)
    ck = load_checkpoint(res.checkpoint)
    assert ck.state["fixed_digests"] == res.encoder_digests[0]


def test_checkpoint_round_trip_bytes(tmp_path):
    res = train(tiny(), str(tmp_path))
    ck = load_checkpoint(res.checkpoint)
    again = str(tmp_path / "again.ckpt")
    save_checkpoint(again, ck.networks, ck.state)
    assert read_bytes(again) == read_bytes(res.checkpoint)


def test_seed_isolation(tmp_path):
    def zero_step(*extra):
        return train(tiny("task=DoorKey6", "seed=1", "total_steps=0", *extra), str(tmp_path / "_".join(extra)))

    def layouts(res):
        return [e.dump_layout() for e in res.learner.env.envs]

    base, env2, net2 = zero_step(), zero_step("env_seed=2"), zero_step("net_seed=2")
    # network init depends only on net_seed, layouts only on env_seed
    assert env2.learner.model.digest() == base.learner.model.digest()
    assert net2.learner.model.digest() != base.learner.model.digest()
    assert layouts(net2) == layouts(base)
    assert layouts(env2) != layouts(base)


def test_pretrain_records_running_std(tmp_path):
    cfg = tiny("pretrain.steps=800")
    res = pretrain(cfg, str(tmp_path))
    rs = running_std_of(res.checkpoint)
    assert rs.count == 800 and rs.std > 0
    ck = load_checkpoint(res.checkpoint)
    assert ck.state["phase"] == "pretrain"
    # reward-free: the learner saw only the intrinsic term
    assert res.learner.use_extrinsic is False


def test_pretrain_needs_intrinsic():
    with pytest.raises(ConfigurationError):
        pretrain(tiny("intrinsic.provider=none"))


def test_finetune_from_zero_step_checkpoint_is_fresh_training(tmp_path):
    cfg = tiny("task=DoorKey6", "intrinsic.beta0=0.05", "pretrain.steps=0", "pretrain.task=DoorKey6", "seed=2")
    pt = pretrain(cfg, str(tmp_path / "pt"))
    ft = finetune(cfg, pt.checkpoint, str(tmp_path / "ft"))
    fresh = train(cfg, str(tmp_path / "fresh"))
    assert read_bytes(ft.metrics_path) == read_bytes(fresh.metrics_path)


def test_finetune_loads_policy_and_normalizer(tmp_path):
    cfg = tiny("pretrain.steps=800")
    pt = pretrain(cfg, str(tmp_path / "pt"))
    ft = finetune(tiny("total_steps=0"), pt.checkpoint, str(tmp_path / "ft"))
    assert ft.learner.model.digest() == pt.learner.model.digest()
    assert ft.learner.provider.running_std.count == 800
    assert ft.learner.beta.beta0 == cfgmod.BETA_TABLE[cfgmod.Task.Empty16]["pt"]


def test_architecture_mismatch_rejected(tmp_path):
    res = train(tiny("total_steps=0"), str(tmp_path / "a2c"))
    with pytest.raises(ConfigurationError):
        finetune(tiny("algo=dqn"), res.checkpoint, str(tmp_path / "dqn"))
    ck = load_checkpoint(res.checkpoint)
    nets = dict(ck.networks)
    del nets["critic"]
    bad = str(tmp_path / "bad.ckpt")
    save_checkpoint(bad, nets, ck.state)
    with pytest.raises(ConfigurationError):
        finetune(tiny(), bad, str(tmp_path / "ft"))


def test_dqn_run(tmp_path):
    cfg = tiny("algo=dqn", "total_steps=400", "eval.every=200", "dqn.initial_steps=100", "dqn.batch_size=32",
               "dqn.buffer_capacity=500")
    res = train(cfg, str(tmp_path))
    assert [r.env_step for r in res.rows] == [200, 400]
    assert res.rows[-1].intrinsic_mean > 0
    rets = evaluate_checkpoint(res.checkpoint, episodes=3, max_steps=20)
    assert rets.shape == (3,)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    rc = main(["train", "--quiet", "--out", str(tmp_path), "--override", "a2c.lr=1e30",
               "--override", "total_steps=8000", *[f"--override={o}" for o in TINY[2:]]])
    assert rc == 3


def test_cli_train_eval_round(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["train", "--quiet", "--out", out, *[f"--override={o}" for o in TINY]]) == 0
    assert main(["eval", "--from", os.path.join(out, "final.ckpt"), "--episodes", "3"]) == 0
    assert "episodes 3" in capsys.readouterr().out


def test_cli_flops_preset(capsys):
    assert main(["flops", "--preset", "reference"]) == 0
    assert "1558457722013200" in capsys.readouterr().out
    assert main(["flops", "--E", "10", "--M", "5", "--b", "2", "--F", "1", "--B", "1"]) == 0
    assert capsys.readouterr().out.strip() == "105"
    assert main(["flops", "--E", "10"]) == 2


def test_cli_entropy_estimate(tmp_path, capsys):
    p = tmp_path / "pts.csv"
    np.savetxt(p, np.random.default_rng(0).normal(size=(2000, 1)), delimiter=",")
    assert main(["entropy-estimate", "--csv", str(p), "--k", "3"]) == 0
    full = float(capsys.readouterr().out.split("full")[1].split()[0])
    assert abs(full - 1.41894) < 0.15
    assert main(["entropy-estimate", "--csv", str(p), "--k", "5000"]) == 2


def test_sweep_ranks_betas(tmp_path):
    cfg = tiny("total_steps=800", "eval.every=400")
    table = cfgmod_sweep(cfg, tmp_path)
    assert [r["beta"] for r in table] == [0.0, 0.5]
    assert sum(r["best"] for r in table) == 1
    assert (tmp_path / "summary.csv").read_text().startswith("beta,final_mean")
    assert (tmp_path / "beta_0.5" / "seed_0" / "metrics.csv").exists()


def cfgmod_sweep(cfg, root):
    from re3lab.run import sweep

    return sweep(cfg, [0.0, 0.5], [0], str(root), processes=1)


# ---- metrics and plotting --------------------------------------------------


def write_run(path, steps, vals):
    w = MetricsWriter(str(path))
    for s, v in zip(steps, vals):
        w.append(MetricsRow(s, v, 0.0, 0.0, 0.0, 0.1, s * 10, 0.0))
    return str(path)


def test_metrics_writer_rejects_non_increasing(tmp_path):
    w = MetricsWriter(str(tmp_path / "m.csv"))
    w.append(MetricsRow(10, 0, 0, 0, 0, 0, 0, 0))
    with pytest.raises(ValueError):
        w.append(MetricsRow(10, 0, 0, 0, 0, 0, 0, 0))


def test_shuffled_csv_rejected_with_line_number(tmp_path):
    p = write_run(tmp_path / "m.csv", [100, 200, 300], [0.1, 0.2, 0.3])
    lines = open(p).read().splitlines()
    lines[2], lines[3] = lines[3], lines[2]
    with pytest.raises(MetricsFormatError, match=r":4:"):
        parse_metrics("\n".join(lines), "m.csv")
    with pytest.raises(MetricsFormatError, match=r":3: bad eval_return_mean"):
        parse_metrics(",".join(COLUMNS) + "\n1,0,0,0,0,0,0,0\n2,x,0,0,0,0,0,0\n", "m.csv")


def test_band_is_mean_and_population_std(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.random((5, 4))
    paths = [write_run(tmp_path / f"s{i}.csv", [1, 2, 3, 4], v) for i, v in enumerate(vals)]
    (c,) = load_curves([f"re3={p}" for p in paths])
    assert c.label == "re3" and c.n_runs == 5
    np.testing.assert_allclose(c.mean, vals.mean(axis=0), rtol=0, atol=1e-15)
    np.testing.assert_allclose(c.std, vals.std(axis=0), rtol=0, atol=1e-15)


def test_single_file_band_has_zero_width(tmp_path):
    (c,) = load_curves([write_run(tmp_path / "one.csv", [1, 2], [0.2, 0.4])])
    assert (c.std == 0).all()


def test_grids_are_interpolated():
    c = aggregate([(np.array([0, 10]), np.array([0.0, 1.0])), (np.array([0, 5, 10]), np.array([1.0, 1.0, 1.0]))])
    np.testing.assert_allclose(c.mean, [0.5, 1.0])


def test_plot_bytes_deterministic(tmp_path):
    paths = [write_run(tmp_path / f"s{i}.csv", [1, 2, 3], [0.1 * i, 0.2, 0.5]) for i in range(3)]
    plot_files(str(tmp_path / "a.svg"), [f"A={p}" for p in paths] + [f"B={paths[0]}"], title="t & <x>")
    plot_files(str(tmp_path / "b.svg"), [f"A={p}" for p in paths] + [f"B={paths[0]}"], title="t & <x>")
    svg = read_bytes(tmp_path / "a.svg")
    assert svg == read_bytes(tmp_path / "b.svg")
    assert svg.startswith(b"<svg") and svg.count(b"<polyline") == 2 and b"t &amp; &lt;x&gt;" in svg


def test_cli_plot_malformed_exit_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("nope\n")
    assert main(["plot", str(tmp_path / "o.svg"), str(bad)]) == 2
