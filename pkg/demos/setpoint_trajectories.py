"""Setpoint-parameterized trajectories.

A trajectory is the solution of a small equality-constrained QP: track a
desired speed v_d and lateral offset y_d while starting from the measured
state.  Varying (v_d, y_d) sweeps out the family the planner samples from.

    python3 demos/setpoint_trajectories.py --out /tmp/setpoints.svg
"""
import argparse

import numpy as np

from vqplan import svgplot
from vqplan.trajgen import SetpointQP, build_basis


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="setpoint_trajectories.svg")
    args = ap.parse_args()

    qp = SetpointQP(build_basis())
    # ego in lane 1 (y = 4) driving at 15 m/s
    initial = np.array([0.0, 4.0, 15.0, 0.0, 0.0, 0.0])
    setpoints = np.array([[15.0, 4.0], [20.0, 8.0], [10.0, 0.0], [25.0, 12.0]])
    traj = qp.trajectory(setpoints, np.broadcast_to(initial, (len(setpoints), 6)))

    for p, wp, vel in zip(setpoints, traj.waypoints, traj.vel):
        print(f"v_d={p[0]:5.1f} y_d={p[1]:5.1f} -> end x={wp[-1, 0]:6.1f} m, y={wp[-1, 1]:5.2f} m, "
              f"speed {np.hypot(*vel[-1]):5.2f} m/s")

    t = np.arange(qp.basis.n + 1) * qp.basis.dt
    svgplot.line_chart(args.out, t,
                       {f"v_d={p[0]:g}, y_d={p[1]:g}": wp[:, 1] for p, wp in zip(setpoints, traj.waypoints)},
                       title="lateral position along the horizon", xlabel="time [s]",
                       ylabel="y [m]")
    print("wrote", args.out)


if __name__ == "__main__":
    main()
