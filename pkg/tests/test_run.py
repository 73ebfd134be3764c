import json

import numpy as np

import run
from scripts.dataset import make_record, record_dtype, write_dataset
from scripts.distill import read_ppm
from scripts.sim_core import flat_state


def test_parser_subcommands():
    parser = run.build_parser()
    args = parser.parse_args(["pretrain", "--data", "d.clrl", "--out", "p.clqn", "--objectives", "3"])
    assert args.func is run.cmd_pretrain
    assert args.objective_count == 3 and args.offline_steps == 2000
    args = parser.parse_args(["--workers", "2", "eval", "--kind", "random", "--step-cap", "5"])
    assert args.workers == 2 and args.step_cap == 5 and args.ckpt is None
    args = parser.parse_args(["distill-data", "--ckpt", "a", "--states", "x.clrl", "y.parquet", "--out", "o"])
    assert args.states == ["x.clrl", "y.parquet"]


def test_train_config_overrides():
    args = run.build_parser().parse_args(["finetune", "--ckpt", "a", "--out", "b", "--blocks", "3", "--batch", "8"])
    train = run._train_config(args, seed=7)
    assert train.blocks == 3 and train.batch_size == 8 and train.seed == 7
    assert train.opt_iters == 4


def test_eval_needs_a_checkpoint():
    assert run.main(["eval", "--kind", "agent"]) == 1


def test_render_command(tmp_path, small_params):
    state = flat_state(small_params)
    records = np.empty(1, dtype=record_dtype(6))
    records[0] = make_record(6, state, 0, 0, np.zeros(9), False, state, False, 0)
    data, out = tmp_path / "d.clrl", tmp_path / "s.ppm"
    write_dataset(data, records, small_params, 8)
    assert run.main(["render", "--state-file", str(data), "--size", "32", "--out", str(out)]) == 0
    assert read_ppm(out).shape == (32, 32, 3)
    assert run.main(["render", "--state-file", str(data), "--index", "3", "--out", str(out)]) == 1


def test_random_baseline_eval_is_recorded(tmp_path, monkeypatch):
    monkeypatch.setenv("CLOTHRL_RESULTS_DB", str(tmp_path / "results.db"))
    report = tmp_path / "r.json"
    argv = ["--workers", "1", "eval", "--kind", "random", "--grid", "6", "--episodes", "1", "--step-cap", "1"]
    assert run.main(argv + ["--report", str(report), "--record", "--study", "baseline"]) == 0
    assert json.loads(report.read_text())["policy"] == "random"
    from scripts import results

    con = results.connect(str(tmp_path / "results.db"))
    try:
        assert list(results.list_runs(con, "baseline")["variant"]) == ["random"]
    finally:
        con.close()
