import csv
import json
from pathlib import Path

import numpy as np
import pytest

from socialgrid import autodiff as ad
from socialgrid import expcli as ec
from socialgrid.nets import AuxMode, build_network
from socialgrid.rollout import load_trace
from socialgrid.seeding import substream
from socialgrid.train import PPOConfig


def _tiny_config(out_dir, seed=0, episodes=64):
    cfg = ec.preset("desk_smoke")
    cfg.out_dir = str(out_dir)
    cfg.master_seed = seed
    cfg.total_episodes = episodes
    cfg.batch_episodes = 8
    cfg.episode_limit = 24
    cfg.return_window = 100
    cfg.checkpoint_every_updates = 2
    cfg.ppo = PPOConfig(n_windows=8, window_len=16, minibatches_per_batch=3,
                        learning_rate=1e-4)
    return cfg


def _read_metrics(run_dir):
    with open(Path(run_dir) / "metrics.csv") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = build_network(AuxMode.PRED, np.random.default_rng(0))
    opt = ad.Adam(net.param_list(), lr=1e-4)
    for p in net.param_list():
        p.grad = np.full_like(p.data, 0.01)
    opt.step()
    path = tmp_path / "a.ckpt"
    ec.checkpoint_save(net, opt, {"episodes_done": 5, "updates_done": 1}, path,
                       extra={"note": "x"})
    net2, opt2, counters, extra = ec.checkpoint_load(path)
    assert np.array_equal(net2.get_flat(), net.get_flat())
    assert opt2.t == opt.t and opt2.lr == opt.lr
    for a, b in zip(opt.m + opt.v, opt2.m + opt2.v):
        assert np.array_equal(a, b)
    assert counters == {"episodes_done": 5, "updates_done": 1}
    assert extra == {"note": "x"}
    assert ec.checkpoint_state_hash(net, opt) == ec.checkpoint_state_hash(net2, opt2)


def test_checkpoint_detects_corruption(tmp_path):
    net = build_network(AuxMode.PRED, np.random.default_rng(1))
    path = tmp_path / "a.ckpt"
    ec.checkpoint_save(net, None, {}, path)
    raw = bytearray(open(path, "rb").read())
    raw[len(raw) // 3] ^= 0x01
    open(path, "wb").write(bytes(raw))
    with pytest.raises(ValueError):
        ec.checkpoint_load(path)


def test_checkpoint_mode_mismatch_rejected(tmp_path):
    net = build_network(AuxMode.REC, np.random.default_rng(2))
    path = tmp_path / "rec.ckpt"
    ec.checkpoint_save(net, None, {}, path)
    with pytest.raises(ValueError, match="descriptor mismatch"):
        ec.checkpoint_load(path, expect_mode="pred")
    net2, _, _, _ = ec.checkpoint_load(path, expect_mode="rec")
    assert net2.mode == AuxMode.REC


# ---------------------------------------------------------------------------
# training runs

def test_run_training_writes_artifacts(tmp_path):
    cfg = _tiny_config(tmp_path / "run", episodes=16)
    out = ec.run_training(cfg, quiet=True)
    assert (out / "manifest.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["master_seed"] == cfg.master_seed
    assert manifest["config"]["batch_episodes"] == 8
    rows = _read_metrics(out)
    assert len(rows) == 2
    assert int(rows[-1]["episodes"]) == 16
    assert (out / "final.ckpt").exists()
    with open(out / "losses.csv") as fh:
        lrows = list(csv.DictReader(fh))
    assert lrows and all(r["update_idx"] for r in lrows)


def test_training_metrics_rows_satisfy_loss_assembly(tmp_path):
    cfg = _tiny_config(tmp_path / "run2", episodes=16)
    out = ec.run_training(cfg, quiet=True)
    with open(out / "losses.csv") as fh:
        for r in csv.DictReader(fh):
            total = float(r["total"])
            want = (float(r["policy_loss"]) + 0.1 * float(r["value_loss"])
                    + 3.0 * float(r["aux_loss"]) - 1e-5 * float(r["entropy"]))
            assert total == want


def test_resume_reproduces_next_batch_exactly(tmp_path):
    # straight run of 2 updates vs checkpoint-after-1 + resume
    cfg_a = _tiny_config(tmp_path / "a", seed=123, episodes=16)
    out_a = ec.run_training(cfg_a, quiet=True)
    rows_a = _read_metrics(out_a)

    cfg_b = _tiny_config(tmp_path / "b", seed=123, episodes=8)
    out_b = ec.run_training(cfg_b, quiet=True)
    cfg_c = _tiny_config(tmp_path / "c", seed=123, episodes=16)
    out_c = ec.run_training(cfg_c, resume=str(out_b / "final.ckpt"), quiet=True)
    rows_c = _read_metrics(out_c)

    a, c = rows_a[1], rows_c[0]
    assert int(c["episodes"]) == int(a["episodes"]) == 16
    for col in ("mean_return_window", "policy_loss", "value_loss", "entropy",
                "aux_loss", "total_loss", "approx_kl", "minibatches_applied"):
        assert a[col] == c[col], f"column {col}: {a[col]} != {c[col]}"


def test_mix_schedule_controls_batch_composition(tmp_path):
    cfg = _tiny_config(tmp_path / "mix", episodes=8)
    cfg.mix_switch_episode = 0
    cfg.mix_solo_fraction = 1.0  # always solo after switch
    out = ec.run_training(cfg, quiet=True)
    rows = _read_metrics(out)
    assert int(rows[0]["solo_episodes_in_batch"]) == 8


def test_curriculum_penalty_logged(tmp_path):
    cfg = _tiny_config(tmp_path / "cur", episodes=16)
    cfg.curriculum = [[0, -0.5], [8, -1.0]]
    out = ec.run_training(cfg, quiet=True)
    rows = _read_metrics(out)
    assert float(rows[0]["penalty"]) == -1.0 or float(rows[0]["penalty"]) == -0.5
    assert float(rows[1]["penalty"]) == -1.0


def test_train_expert_uses_expert_lr(tmp_path):
    cfg = _tiny_config(tmp_path / "exp", episodes=8)
    out = ec.run_training(cfg, expert_lr=1e-5, quiet=True)
    _, opt, _, _ = ec.checkpoint_load(out / "final.ckpt")
    assert opt.lr == 1e-5


# ---------------------------------------------------------------------------
# transfer evaluation

def _make_ckpt(tmp_path, name, mode=AuxMode.PRED, seed=0):
    net = build_network(mode, np.random.default_rng(seed))
    path = tmp_path / name
    ec.checkpoint_save(net, None, {}, path)
    return path


def test_eval_transfer_summary_and_no_update(tmp_path):
    novice = _make_ckpt(tmp_path, "novice.ckpt")
    expert = _make_ckpt(tmp_path, "expert.ckpt", seed=1)
    cfg = ec.ExperimentConfig(task="four_rooms", episode_limit=32, n_goals=4)
    summary = ec.cmd_eval_transfer(novice, cfg, expert_ckpts=[expert],
                                   n_episodes=6, master_seed=5)
    assert summary["episodes"] == 6
    assert len(summary["returns"]) == 6
    lo, hi = summary["ci95"]
    assert lo <= summary["mean_return"] <= hi
    assert summary["n_experts"] == 1


def test_eval_transfer_solo_flag_removes_experts(tmp_path):
    novice = _make_ckpt(tmp_path, "novice.ckpt")
    expert = _make_ckpt(tmp_path, "expert.ckpt", seed=1)
    cfg = ec.ExperimentConfig(task="goal_cycle", grid_size=9, n_goals=2,
                              n_obstacles=2, penalty=0.0, episode_limit=24)
    summary = ec.cmd_eval_transfer(novice, cfg, expert_ckpts=[expert],
                                   n_episodes=4, solo=True, master_seed=5)
    assert summary["n_experts"] == 0 and summary["solo"]


def test_eval_transfer_distractor_flag(tmp_path):
    seen = []
    orig = ec.collect_batch

    def spy(factory, net, experts=(), n_distractors=0, **kw):
        seen.append((len(list(experts)), n_distractors))
        return orig(factory, net, experts=experts, n_distractors=n_distractors, **kw)

    novice = _make_ckpt(tmp_path, "novice.ckpt")
    expert = _make_ckpt(tmp_path, "expert.ckpt", seed=1)
    cfg = ec.ExperimentConfig(task="maze", episode_limit=24)
    try:
        ec.collect_batch = spy
        ec.cmd_eval_transfer(novice, cfg, expert_ckpts=[expert], n_episodes=2,
                             n_distractors=2, master_seed=1)
    finally:
        ec.collect_batch = orig
    assert seen == [(1, 2)]


def test_evaluate_policy_greedy_deterministic():
    net = build_network(AuxMode.PRED, np.random.default_rng(3))
    cfg = ec.ExperimentConfig(task="goal_cycle", grid_size=9, n_goals=2,
                              n_obstacles=2, penalty=0.0, episode_limit=24)
    a = ec.evaluate_policy(net, cfg, n_episodes=4, master_seed=9, greedy=True)
    b = ec.evaluate_policy(net, cfg, n_episodes=4, master_seed=9, greedy=True)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# demos / BC plumbing

def test_collect_demos_and_train_bc(tmp_path):
    ckpt = _make_ckpt(tmp_path, "expert.ckpt")
    cfg = ec.ExperimentConfig(task="goal_cycle", grid_size=9, n_goals=2,
                              n_obstacles=2, penalty=0.0, episode_limit=20)
    trace_path = tmp_path / "demos.trace"
    path, returns = ec.collect_demos(ckpt, cfg, 3, trace_path, master_seed=0)
    episodes = load_trace(path)
    assert len(episodes) == 3
    assert all(ep.obs.shape[0] == ep.length + 1 for ep in episodes)

    out_ckpt = tmp_path / "bc.ckpt"
    net, history = ec.train_bc(path, "rec", epochs=1, lr=1e-4,
                               out_ckpt=out_ckpt, master_seed=0)
    assert out_ckpt.exists()
    loaded, _, counters, extra = ec.checkpoint_load(out_ckpt)
    assert np.array_equal(loaded.get_flat(), net.get_flat())
    assert extra["bc_loss_history"] == history


# ---------------------------------------------------------------------------
# diagnostics

def test_diagnose_sparse_zero_gradient_and_q_contraction():
    report = ec.diagnose_sparse(master_seed=1)
    assert report.policy_grad_max_abs == 0.0
    assert report.q_max_abs_per_sweep[0] > 0.01
    assert report.q_final_max_abs < 1e-3
    assert abs(report.novel_state_q_target) <= 0.9 * report.q_final_max_abs + 1e-12
    assert "zero-reward policy gradient" in report.summary()


def test_diagnose_sparse_any_seed_zero_gradient():
    for seed in (2, 3):
        report = ec.diagnose_sparse(master_seed=seed)
        assert report.policy_grad_max_abs == 0.0


# ---------------------------------------------------------------------------
# render + CLI

def test_render_layout_writes_pngs(tmp_path):
    cfg = ec.ExperimentConfig(task="goal_cycle", grid_size=9, n_goals=2,
                              n_obstacles=2, penalty=0.0)
    out = ec.render_layout(cfg, 3, tmp_path / "r", n_agents=2)
    assert (out / "grid.png").exists()
    assert (out / "obs_agent0.png").exists()
    assert (out / "obs_agent1.png").exists()
    assert json.loads((out / "layout.json").read_text())["variant"] == "goal_cycle"


def test_cli_diagnose_and_render(tmp_path, capsys):
    assert ec.main(["diagnose-sparse", "--seed", "2"]) == 0
    assert "policy gradient" in capsys.readouterr().out
    assert ec.main(["render", "--preset", "desk_smoke", "--seed", "1",
                    "--out", str(tmp_path / "rr")]) == 0
    assert (tmp_path / "rr" / "grid.png").exists()


def test_cli_config_overrides(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg = _tiny_config(tmp_path / "cli_run", episodes=8)
    cfg_path.write_text(json.dumps(cfg.to_json()))
    rc = ec.main(["train", "--config", str(cfg_path),
                  "--set", "ppo.minibatches_per_batch=2",
                  "--set", "total_episodes=8",
                  "--out", str(tmp_path / "cli_run")])
    assert rc == 0
    manifest = json.loads((tmp_path / "cli_run" / "manifest.json").read_text())
    assert manifest["config"]["ppo"]["minibatches_per_batch"] == 2


def test_select_checkpoint_by_return(tmp_path):
    cfg = _tiny_config(tmp_path / "sel", episodes=24)
    out = ec.run_training(cfg, quiet=True)
    # every periodic checkpoint carries its return window
    path, mean_ret = ec.select_checkpoint_by_return(out, max_return=np.inf)
    assert path.exists()
    early, early_ret = ec.select_checkpoint_by_return(out)
    assert early == path  # earliest checkpoint under no bounds
    with pytest.raises(ValueError):
        ec.select_checkpoint_by_return(out, min_return=1e9)


def test_bc_checkpoint_runs_through_eval_transfer(tmp_path):
    ckpt = _make_ckpt(tmp_path, "expert.ckpt")
    cfg = ec.ExperimentConfig(task="goal_cycle", grid_size=9, n_goals=2,
                              n_obstacles=2, penalty=0.0, episode_limit=20)
    trace = tmp_path / "d.trace"
    ec.collect_demos(ckpt, cfg, 2, trace, master_seed=0)
    bc_ckpt = tmp_path / "bc.ckpt"
    ec.train_bc(trace, "rec", epochs=1, lr=1e-4, out_ckpt=bc_ckpt, master_seed=0)
    summary = ec.cmd_eval_transfer(bc_ckpt, cfg, n_episodes=3, solo=True,
                                   master_seed=2)
    assert summary["episodes"] == 3


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(kl_target=0.05, kl_hard_limit=0.03)
    with pytest.raises(ValueError):
        PPOConfig(c_aux=-1.0)
