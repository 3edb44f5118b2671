"""``vqplan`` command-line tool: gen-data, train, evaluate, plot.

Thread count comes from ``VQPLAN_THREADS`` (default 1, which also keeps
BLAS reductions reproducible) and must be applied before numpy loads.
"""
from __future__ import annotations

import os

_THREADS = os.environ.get("VQPLAN_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import csv  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from . import config as cfgmod  # noqa: E402
from . import expert_gen as eg  # noqa: E402
from . import pipeline as pl  # noqa: E402
from . import safety_filter as sf  # noqa: E402
from . import svgplot  # noqa: E402
from .checkpoint import CheckpointError  # noqa: E402
from .evaluation import EvalSetting, modality_report, row_dict, run_setting  # noqa: E402
from .latent_sampler import SamplerConfig, SamplerModel, sample_latents  # noqa: E402
from .planner import PlannerConfig  # noqa: E402
from .trajgen import SetpointQP, build_basis  # noqa: E402
from .vqvae import VqVaeConfig, VqVaeModel  # noqa: E402

log = logging.getLogger("vqplan")

EXIT_OK, EXIT_PATH, EXIT_DEPENDENCY = 0, 2, 3

FILES = {"data": "dataset.bin", "vqvae": "vqvae.ckpt", "pixelcnn": "pixelcnn.ckpt", "filter": "filter.ckpt",
         "metrics": "metrics.csv", "plots": "plots"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def _workdir(cfg: dict) -> Path:
    wd = Path(cfg["workdir"])
    if wd.exists() and not wd.is_dir():
        raise CliError(EXIT_PATH, f"workdir {wd} exists and is not a directory")
    if not wd.parent.is_dir():
        raise CliError(EXIT_PATH, f"parent directory of workdir {wd} does not exist")
    wd.mkdir(exist_ok=True)
    return wd


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise CliError(EXIT_DEPENDENCY, f"missing {what}: {path} (run the earlier stage first)")
    return path


def _subset(cls, section: dict, **extra):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in {**section, **extra}.items() if k in names})


def _write_csv(path: Path, digest: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={digest} version={__version__}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])


def _digest(cfg: dict, **extra) -> str:
    # the output location does not change results, so it stays out of the hash
    return cfgmod.config_hash({**{k: v for k, v in cfg.items() if k != "workdir"}, **extra})


def _qp() -> SetpointQP:
    return SetpointQP(build_basis())


def _load_dataset(wd: Path):
    path = _require(wd / FILES["data"], "dataset")
    try:
        return eg.load_dataset(path)
    except eg.DatasetError as exc:
        raise CliError(EXIT_DEPENDENCY, str(exc)) from exc


def _load(kind: str, wd: Path, qp: SetpointQP):
    path = _require(wd / FILES[kind], f"{kind} checkpoint")
    try:
        if kind == "vqvae":
            return VqVaeModel.load(path, qp)
        if kind == "pixelcnn":
            return SamplerModel.load(path)
        return sf.WarmStartNet.load(path)
    except CheckpointError as exc:
        raise CliError(EXIT_DEPENDENCY, str(exc)) from exc


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: dict, out: str | None = None) -> Path:
    wd = _workdir(cfg)
    path = Path(out) if out else wd / FILES["data"]
    if not path.parent.is_dir():
        raise CliError(EXIT_PATH, f"output directory {path.parent} does not exist")
    gcfg = _subset(eg.GenConfig, cfg["data"], seed=cfg["seed"])
    ds = eg.generate_demos(_qp(), gcfg, progress_every=max(gcfg.scenes // 10, 1))
    eg.save_dataset(path, ds)
    print(f"wrote {len(ds)} demonstrations from {gcfg.scenes - ds.skipped} scenes to {path}")
    return path


def cmd_train(cfg: dict, stage: str) -> Path:
    wd = _workdir(cfg)
    digest = _digest(cfg)
    qp = _qp()
    seed = cfg["seed"]
    if stage == "vqvae":
        ds = _load_dataset(wd)
        model, hist = pl.fit_vqvae(ds, qp, _subset(VqVaeConfig, cfg["vqvae"], seed=seed), log_every=100)
        model.save(wd / FILES["vqvae"])
        _write_csv(wd / "vqvae_loss.csv", digest, ["step", "loss", "recon"],
                   zip(range(1, len(hist.loss) + 1), hist.loss, hist.recon))
        print(f"vqvae: final loss {hist.loss[-1]:.5f}, reconstruction RMSE {hist.rmse:.3f} m")
    elif stage == "pixelcnn":
        vq = _load("vqvae", wd, qp)
        ds = _load_dataset(wd)
        model, hist = pl.fit_sampler(ds, vq, _subset(SamplerConfig, cfg["pixelcnn"], seed=seed), log_every=100)
        model.save(wd / FILES["pixelcnn"])
        _write_csv(wd / "pixelcnn_loss.csv", digest, ["step", "loss"], zip(range(1, len(hist.loss) + 1), hist.loss))
        ppl = hist.heldout_perplexity
        held = f"held-out perplexity {ppl:.3f}" if np.isfinite(ppl) else "no held-out split"
        print(f"pixelcnn: final loss {hist.loss[-1]:.4f}, {held}")
    elif stage == "filter":
        vq = _load("vqvae", wd, qp)
        sampler = _load("pixelcnn", wd, qp)
        ds = _load_dataset(wd)
        fc = cfg["filter"]
        data = pl.filter_dataset(ds, qp, vq, sampler, int(fc["items"]), seed=seed)
        net, hist = pl.fit_filter(data, qp, _subset(sf.FilterConfig, fc, seed=seed), log_every=20)
        net.save(wd / FILES["filter"])
        _write_csv(wd / "filter_loss.csv", digest, ["step", "loss", "projection", "violation"],
                   zip(range(1, len(hist.loss) + 1), hist.loss, hist.projection, hist.violation))
        print(f"filter: final loss {hist.loss[-1]:.5f}")
    else:
        raise CliError(EXIT_PATH, f"unknown stage {stage!r}")
    return wd / FILES[stage]


def eval_settings(ev: dict, no_filter: bool = False, random_sampler: bool = False) -> list[EvalSetting]:
    """The sweep: every density, then sample-count and iteration variants at ``sweep_density``."""
    base = dict(speed_limit=float(ev["speed_limit"]), episode_steps=int(ev["episode_steps"]),
                use_filter=not no_filter, random_sampler=random_sampler,
                samples=int(ev["samples"]), filter_iters=int(ev["filter_iters"]))
    tag = "no_filter" if no_filter else ("random" if random_sampler else "full")
    out = [EvalSetting(f"{tag}", float(d), **base) for d in ev["densities"]]
    sweep_d = float(ev.get("sweep_density", 2.5))
    for d in ev.get("no_filter_densities", []) if not no_filter else []:
        out.append(EvalSetting("no_filter", float(d), **{**base, "use_filter": False}))
    for n in ev.get("sample_sweep", []):
        out.append(EvalSetting(f"{tag}_samples{int(n)}", sweep_d, **{**base, "samples": int(n)}))
    if not no_filter:
        for it in ev.get("iters_sweep", []):
            out.append(EvalSetting(f"{tag}_iters{int(it)}", sweep_d, **{**base, "filter_iters": int(it)}))
    return out


def cmd_evaluate(cfg: dict, no_filter: bool = False, random_sampler: bool = False) -> Path:
    wd = _workdir(cfg)
    digest = _digest(cfg, no_filter=no_filter, random_sampler=random_sampler)
    qp = _qp()
    ev = cfg["evaluate"]
    vq = _load("vqvae", wd, qp)
    sampler = None if random_sampler else _load("pixelcnn", wd, qp)
    settings = eval_settings(ev, no_filter, random_sampler)
    need_filter = any(s.use_filter for s in settings)
    net = _load("filter", wd, qp) if need_filter else None
    base = PlannerConfig(temperature=float(ev["temperature"]), rho=float(cfg["filter"]["rho"]),
                         margin=float(cfg["filter"]["margin"]))
    rows = []
    for seed in ev["seeds"]:
        for s in settings:
            row = run_setting((qp, vq, sampler, net), s, int(seed), int(ev["episodes"]), base, int(ev["workers"]))
            print(f"{s.label:>20s} density={s.density:<4g} seed={seed} collision={row.collision_rate:.3f} "
                  f"speed={row.mean_speed:.2f}+-{row.speed_std:.2f}")
            rows.append(row_dict(row))
    header = list(rows[0]) if rows else []
    suffix = "_no_filter" if no_filter else ("_random_sampler" if random_sampler else "")
    path = wd / FILES["metrics"].replace(".csv", f"{suffix}.csv")
    _write_csv(path, digest, header, ([r[k] for k in header] for r in rows))
    cmd_plot(cfg, sampler=sampler, vq=vq, qp=qp)
    return path


def read_metrics(path: Path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def two_gap_setpoints(qp, vq, sampler, count: int, temperature: float, seed: int) -> np.ndarray:
    scene = eg.two_gap_scene(horizon=qp.basis.n, dt=qp.basis.dt)
    h = sample_latents(sampler, scene.O, count, temperature, seed)
    return vq.decode_indices(h)


def cmd_plot(cfg: dict, sampler=None, vq=None, qp=None) -> Path:
    """Bar charts over every ``metrics*.csv`` in the workdir plus two-gap KDEs."""
    wd = _workdir(cfg)
    out = wd / FILES["plots"]
    out.mkdir(exist_ok=True)
    rows = [r for path in sorted(wd.glob("metrics*.csv")) for r in read_metrics(path)]
    if rows:
        labels = sorted({r["label"] for r in rows})
        densities = sorted({float(r["density"]) for r in rows})
        for key, title in (("collision_rate", "collision rate"), ("mean_speed", "mean speed [m/s]")):
            series = {}
            for lab in labels:
                vals = []
                for d in densities:
                    sel = [float(r[key]) for r in rows if r["label"] == lab and float(r["density"]) == d]
                    vals.append(float(np.mean(sel)) if sel else float("nan"))
                series[lab] = vals
            svgplot.bar_chart(out / f"{key}.svg", [f"{d:g}" for d in densities], series,
                              title=f"{title} by traffic density", xlabel="density", ylabel=title)
    qp = qp or _qp()
    if (wd / FILES["pixelcnn"]).is_file() and (wd / FILES["vqvae"]).is_file():
        vq = vq or _load("vqvae", wd, qp)
        sampler = sampler or _load("pixelcnn", wd, qp)
        p = two_gap_setpoints(qp, vq, sampler, 1000, float(cfg["evaluate"]["temperature"]), int(cfg["seed"]))
        rep = modality_report(p[:, 1])
        svgplot.kde_plot(out / "two_gap_y_d.svg", {"y_d samples": p[:, 1]},
                         title="sampled lateral set-point, two-gap scene", xlabel="y_d [m]")
        svgplot.kde_plot(out / "two_gap_v_d.svg", {"v_d samples": p[:, 0]},
                         title="sampled speed set-point, two-gap scene", xlabel="v_d [m/s]")
        print(f"two-gap y_d clusters at {rep.centers.round(2).tolist()} with mass {rep.fractions.round(2).tolist()}, "
              f"silhouette {rep.silhouette:.2f}")
    print(f"plots in {out}")
    return out


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vqplan", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set vqvae.steps=500")
    common.add_argument("--workdir", help="directory for datasets, checkpoints and reports")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate expert demonstrations")
    g.add_argument("--scenes", type=int)
    g.add_argument("--out", help="dataset path (default: <workdir>/dataset.bin)")

    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", required=True, choices=["vqvae", "pixelcnn", "filter"])
    t.add_argument("--steps", type=int, help="optimizer steps for this stage")

    e = sub.add_parser("evaluate", parents=[common], help="closed-loop sweep")
    e.add_argument("--no-filter", action="store_true", help="skip the safety filter (ablation)")
    e.add_argument("--random-sampler", action="store_true", help="uniform latent indices instead of the prior")
    e.add_argument("--episodes", type=int)
    e.add_argument("--densities", type=float, nargs="+")
    e.add_argument("--sample-sweep", type=int, nargs="+")
    e.add_argument("--iters-sweep", type=int, nargs="+")
    e.add_argument("--episode-steps", type=int)
    e.add_argument("--temperature", type=float)
    e.add_argument("--workers", type=int)

    sub.add_parser("plot", parents=[common], help="redraw SVG plots from metrics.csv and checkpoints")
    return ap


def _flags(args) -> dict:
    flags = {"workdir": args.workdir, "seed": args.seed}
    if args.command == "gen-data":
        flags["data.scenes"] = args.scenes
    elif args.command == "train":
        flags[f"{args.stage}.steps"] = args.steps
    elif args.command == "evaluate":
        for name in ("episodes", "densities", "sample_sweep", "iters_sweep", "episode_steps", "temperature",
                     "workers"):
            flags[f"evaluate.{name}"] = getattr(args, name)
    return flags


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        try:
            cfg = cfgmod.load_config(args.config, args.set, _flags(args))
        except FileNotFoundError as exc:
            raise CliError(EXIT_PATH, str(exc)) from exc
        except cfgmod.ConfigError as exc:
            raise CliError(EXIT_PATH, str(exc)) from exc
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.stage)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.no_filter, args.random_sampler)
        else:
            cmd_plot(cfg)
    except CliError as exc:
        print(f"vqplan: error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
