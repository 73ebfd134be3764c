#!/usr/bin/env python3
"""
Command-line runner for the cloth flattening pipeline.
- gen-data: offline transition dataset (random + fold-to-unfold episodes)
- pretrain / finetune: offline multi-objective Q-learning, then online Flatten fine-tuning
- distill-data / distill-train: rendered observation pairs and the image-based student
- eval: greedy evaluation of an agent, a student or the random baseline (JSON + CSV report)
- render: PPM snapshot of a stored state
- ablate: pick-mode / objective-count / dataset-size studies recorded in the results database
- serve: FastAPI evaluation service
"""

import argparse
import os
import sys

import numpy as np
from loguru import logger

from scripts.agent import Agent
from scripts.checkpoint import load_tensors
from scripts.config import AgentConfig, EvalConfig, RenderConfig, SimParams, TrainConfig, log_level, worker_count
from scripts.dataset import generate_offline_dataset, read_dataset, subsample_dataset
from scripts.distill import (
    generate_distill_dataset,
    load_state_source,
    load_student,
    render_observation,
    train_student,
    write_ppm,
)
from scripts.errors import ClothRLError
from scripts.evaluate import AgentPolicy, RandomPolicy, StudentPolicy, evaluate
from scripts.sim_core import ClothState
from scripts.training import finetune, pretrain

STUDIES = ("pick-mode", "objectives", "dataset-size")


def configure_logging(verbose=False):
    logger.remove()
    logger.add(sys.stderr, format="[{level}] {message}", level="DEBUG" if verbose else log_level())


def sim_params_of(checkpoint):
    _, meta = load_tensors(checkpoint)
    if "sim_params" not in meta:
        raise ClothRLError(f"{checkpoint} does not record simulator parameters")
    return SimParams(**meta["sim_params"])


def cmd_gen_data(args):
    params = SimParams(grid_side=args.grid)
    generate_offline_dataset(
        args.out,
        args.transitions,
        args.heuristic_frac,
        params,
        args.seed,
        place_grid=args.place_grid,
        episode_actions=args.episode_actions,
        workers=args.workers,
        progress=True,
    )


def _train_config(args, **overrides):
    fields = {
        "batch_size": args.batch,
        "seed": args.seed,
    }
    for name in ("offline_steps", "objective_count", "blocks", "collect_per_block", "opt_iters", "step_cap"):
        if getattr(args, name, None) is not None:
            fields[name] = getattr(args, name)
    fields.update(overrides)
    return TrainConfig(**fields)


def cmd_pretrain(args):
    dataset = read_dataset(args.data)
    config = AgentConfig(
        grid_side=dataset.grid_side,
        place_grid=dataset.place_grid,
        pick_mode=args.pick_mode,
        encoder=args.encoder,
        width_multiplier=args.width,
        seed=args.seed,
    )
    pretrain(args.data, args.out, _train_config(args), config, metrics_path=args.metrics, progress=True)


def cmd_finetune(args):
    agent = Agent.load(args.ckpt)
    if args.pick_mode is not None and args.pick_mode != agent.config.pick_mode:
        raise ClothRLError(f"{args.ckpt} was pretrained with pick_mode={agent.config.pick_mode}")
    config = agent.config.model_copy(
        update={
            k: v
            for k, v in {
                "eps_pick": args.eps_pick,
                "eps_place": args.eps_place,
                "eps_pick_final": args.eps_pick_final,
                "eps_place_final": args.eps_place_final,
            }.items()
            if v is not None
        }
    )
    finetune(
        args.ckpt,
        args.out,
        _train_config(args),
        sim_params_of(args.ckpt),
        data_path=args.data,
        config=config,
        metrics_path=args.metrics,
        trajectory_path=args.trajectories,
        progress=True,
    )


def cmd_distill_data(args):
    agent = Agent.load(args.ckpt)
    states = np.concatenate([load_state_source(path) for path in args.states])
    render = RenderConfig(size=args.render_size, color_jitter=args.color_jitter)
    generate_distill_dataset(agent, states, args.count, render, sim_params_of(args.ckpt), args.out, args.seed, progress=True)


def cmd_distill_train(args):
    run = train_student(args.data, args.out, args.epochs, lr=args.lr, batch_size=args.batch, seed=args.seed, progress=True)
    epoch, train_loss, val_loss = run.history[-1]
    logger.info(f"Student after {epoch} epochs: train {train_loss:.5f} validation {val_loss:.5f}")


def build_policy(kind, checkpoint, grid):
    if kind == "random":
        params = SimParams(grid_side=grid)
        return RandomPolicy(params), params
    if kind == "student":
        student, meta = load_student(checkpoint)
        params = SimParams(**meta["sim_params"])
        return StudentPolicy(student, RenderConfig(**meta["render"]), params), params
    return AgentPolicy(Agent.load(checkpoint)), sim_params_of(checkpoint)


def record(report, study, variant, report_path=None):
    from scripts import results

    con = results.connect()
    try:
        return results.record_run(con, report, study, variant, report_path)
    finally:
        con.close()


def cmd_eval(args):
    policy, params = build_policy(args.kind, args.ckpt, args.grid)
    eval_cfg = EvalConfig(episodes=args.episodes, step_cap=args.step_cap, seed=args.seed)
    report = evaluate(policy, params, eval_cfg, workers=args.workers, progress=True)
    if args.report:
        report.write_json(args.report)
        logger.info(f"Report written to {args.report}")
    if args.csv:
        report.write_csv(args.csv)
    if args.record:
        record(report, args.study or "eval", args.variant or policy.name, args.report)


def cmd_render(args):
    states = load_state_source(args.state_file)
    if not 0 <= args.index < len(states):
        raise ClothRLError(f"index {args.index} outside [0, {len(states)})")
    params = SimParams(grid_side=states.shape[1])
    image = render_observation(ClothState.from_positions(states[args.index]), RenderConfig(size=args.size), params)
    write_ppm(args.out, image)
    logger.info(f"Wrote {args.out}")


def _ablation_runs(study, args):
    """(variant, seed, dataset path, train overrides, agent overrides, fine-tune?) per run."""
    runs = []
    for seed in range(args.seeds):
        if study == "pick-mode":
            for mode in ("node", "pixel"):
                runs.append((mode, seed, args.data, {}, {"pick_mode": mode}, True))
        elif study == "objectives":
            for count in (1, 3, 9):
                runs.append((f"{count}-objectives", seed, args.data, {"objective_count": count}, {}, False))
        else:
            for fraction in (0.01, 0.1, 1.0):
                subset = os.path.join(args.workdir, f"subset_{fraction}_{seed}.clrl")
                if fraction < 1.0 and not os.path.exists(subset):
                    subsample_dataset(args.data, fraction, seed, subset)
                runs.append((f"{fraction:g}", seed, subset if fraction < 1.0 else args.data, {}, {}, False))
    return runs


def cmd_ablate(args):
    from scripts import results

    os.makedirs(args.workdir, exist_ok=True)
    dataset = read_dataset(args.data)
    eval_cfg = EvalConfig(episodes=args.episodes, step_cap=args.step_cap, seed=args.eval_seed)
    for variant, seed, data, train_overrides, agent_overrides, tune in _ablation_runs(args.study, args):
        train = _train_config(args, seed=seed, **train_overrides)
        config = AgentConfig(grid_side=dataset.grid_side, place_grid=dataset.place_grid, seed=seed, **agent_overrides)
        tag = os.path.join(args.workdir, f"{args.study}_{variant}_{seed}")
        logger.info(f"[{args.study}] variant {variant}, seed {seed}")
        agent = pretrain(data, f"{tag}.pre.clqn", train, config, metrics_path=f"{tag}.pre.csv")
        if tune:
            agent, _ = finetune(f"{tag}.pre.clqn", f"{tag}.clqn", train, dataset.params, data_path=data, metrics_path=f"{tag}.csv")
        report = evaluate(AgentPolicy(agent), dataset.params, eval_cfg, workers=args.workers)
        report.write_json(f"{tag}.report.json")
        record(report, args.study, variant, f"{tag}.report.json")
    con = results.connect()
    try:
        logger.info(f"[{args.study}] summary\n{results.summary(con, args.study).to_string(index=False)}")
    finally:
        con.close()


def cmd_serve(args):
    import uvicorn

    uvicorn.run("scripts.api:app", host=args.host, port=args.port)


def build_parser():
    parser = argparse.ArgumentParser(description="Cloth flattening: data, training, distillation and evaluation.")
    parser.add_argument("--verbose", action="store_true", help="Debug-level logging")
    parser.add_argument("--workers", type=int, default=None, help="Worker processes (default: CLOTHRL_THREADS or CPU count)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate the offline transition dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--transitions", type=int, default=50000)
    p.add_argument("--heuristic-frac", type=float, default=0.06)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--place-grid", type=int, default=32)
    p.add_argument("--episode-actions", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="Offline multi-objective pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--objectives", dest="objective_count", type=int, choices=[1, 3, 9], default=9)
    p.add_argument("--steps", dest="offline_steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--pick-mode", choices=["node", "pixel"], default="node")
    p.add_argument("--encoder", choices=["conv", "linear"], default="conv")
    p.add_argument("--width", type=int, default=1, help="Width multiplier of the network")
    p.add_argument("--metrics", default=None, help="Metrics CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="Online fine-tuning on the Flatten objective")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="Dataset used to pre-fill the replay buffer")
    p.add_argument("--blocks", type=int, default=20)
    p.add_argument("--collect", dest="collect_per_block", type=int, default=2000)
    p.add_argument("--opt-iters", type=int, default=4)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--step-cap", type=int, default=20)
    p.add_argument("--eps-pick", type=float, default=None)
    p.add_argument("--eps-place", type=float, default=None)
    p.add_argument("--eps-pick-final", type=float, default=None)
    p.add_argument("--eps-place-final", type=float, default=None)
    p.add_argument("--pick-mode", choices=["node", "pixel"], default=None)
    p.add_argument("--metrics", default=None)
    p.add_argument("--trajectories", default=None, help="Parquet dump of visited states")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("distill-data", help="Render and label distillation pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--states", required=True, nargs="+", help="CLRL dataset and/or Parquet trajectory files")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--render-size", type=int, default=128)
    p.add_argument("--color-jitter", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_distill_data)

    p = sub.add_parser("distill-train", help="Train the image-based student")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_distill_train)

    p = sub.add_parser("eval", help="Evaluate a policy")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--kind", choices=["agent", "student", "random"], default="agent")
    p.add_argument("--grid", type=int, default=16, help="Cloth grid for the random baseline")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--step-cap", type=int, default=20, help="5 reproduces the real-world protocol")
    p.add_argument("--report", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--record", action="store_true", help="Store the run in the results database")
    p.add_argument("--study", default=None)
    p.add_argument("--variant", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="Write a PPM snapshot of a stored state")
    p.add_argument("--state-file", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", help="Run an ablation study")
    p.add_argument("--study", choices=STUDIES, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--workdir", default="ablations")
    p.add_argument("--seeds", type=int, default=2)
    p.add_argument("--steps", dest="offline_steps", type=int, default=2000)
    p.add_argument("--blocks", type=int, default=20)
    p.add_argument("--collect", dest="collect_per_block", type=int, default=2000)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--step-cap", type=int, default=20)
    p.add_argument("--eval-seed", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="Start the evaluation API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    if args.workers is None:
        args.workers = worker_count()
    if getattr(args, "kind", "random") != "random" and getattr(args, "ckpt", "") is None:
        logger.error("--ckpt is required for agent and student evaluation")
        return 1
    try:
        args.func(args)
    except ClothRLError as e:
        logger.error(str(e))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
