"""Multi-modal setpoint samples in the two-gap scene.

Needs a trained workdir (``vqplan gen-data`` then the three ``train``
stages).  A stopped car blocks the ego's lane with open lanes on both
sides; the learned sampler should put mass on overtaking left and right.

    python3 demos/two_gap_modes.py --workdir .acceptance_run
"""
import argparse
from pathlib import Path

import numpy as np

from vqplan import cli
from vqplan.evaluation import modality_report
from vqplan.svgplot import kde_plot


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default=".acceptance_run")
    ap.add_argument("--samples", type=int, default=1000)
    args = ap.parse_args()

    wd = Path(args.workdir)
    qp = cli._qp()
    vq = cli._load("vqvae", wd, qp)
    sampler = cli._load("pixelcnn", wd, qp)
    p = cli.two_gap_setpoints(qp, vq, sampler, args.samples, 1.0, 0)

    rep = modality_report(p[:, 1])
    print("y_d cluster centres", np.round(rep.centers, 2), "mass", np.round(rep.fractions, 3),
          f"silhouette {rep.silhouette:.3f}")
    print("distinct setpoints", len(np.unique(p, axis=0)))
    kde_plot(wd / "demo_two_gap_y_d.svg", {"sampled y_d": p[:, 1]}, title="two-gap scene", xlabel="y_d [m]")
    print("wrote", wd / "demo_two_gap_y_d.svg")


if __name__ == "__main__":
    main()
