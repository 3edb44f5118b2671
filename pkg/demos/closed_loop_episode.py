"""One closed-loop highway episode.

Runs the constant-speed baseline and, when a trained workdir is given, the
learned planner on the same traffic seed, then writes both traces as CSV.

    python3 demos/closed_loop_episode.py --density 2.5 --workdir .acceptance_run
"""
import argparse
from pathlib import Path

from vqplan import cli
from vqplan import highway_sim as hs
from vqplan.planner import ConstantSpeedPlanner, Planner, PlannerConfig


def report(name, res):
    status = "crashed" if res.crashed else "completed"
    print(f"{name:>14s}: {status} after {res.steps} steps, mean speed {res.mean_speed:.2f} m/s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--density", type=float, default=2.5)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workdir")
    ap.add_argument("--out", default=".")
    args = ap.parse_args()

    cfg = hs.ScenarioConfig(density=args.density, episode_steps=args.steps, seed=args.seed, speed_limit=15.0)
    qp = cli._qp()
    out = Path(args.out)

    res = hs.run_episode(cfg, ConstantSpeedPlanner(qp, 15.0), record=True)
    report("constant speed", res)
    hs.write_trace_csv(out / "trace_constant_speed.csv", res, "demo")

    if args.workdir:
        wd = Path(args.workdir)
        planner = Planner(qp, cli._load("vqvae", wd, qp), cli._load("pixelcnn", wd, qp), cli._load("filter", wd, qp),
                          PlannerConfig(seed=args.seed))
        res = hs.run_episode(cfg, planner, record=True)
        report("learned", res)
        hs.write_trace_csv(out / "trace_learned.csv", res, "demo")


if __name__ == "__main__":
    main()
