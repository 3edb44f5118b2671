"""Projecting a colliding trajectory with the barrier-function filter.

The ego plans to stay in its lane at speed, but a stopped vehicle sits 40 m
ahead.  The unrolled filter minimally perturbs the coefficient vector until
the trajectory clears the obstacle ellipse.  With a fixed warm start
(no learned network) the filter still works, just with more iterations.

    python3 demos/safety_filter_projection.py
"""
import numpy as np

from vqplan import safety_filter as sf
from vqplan.trajgen import SetpointQP, Trajectory, build_basis


def main():
    basis = build_basis()
    qp = SetpointQP(basis)
    initial = np.array([[0.0, 4.0, 15.0, 0.0, 0.0, 0.0]])
    xi_star = qp.xi(np.array([[15.0, 4.0]]), initial)

    N = basis.n + 1
    # a stopped car slightly right of the ego's lane centre
    scene = sf.SceneConstraints(np.full((1, N), 40.0), np.full((1, N), 3.0), -1.0, 13.0)
    print(f"raw plan clearance      {sf.min_clearance(basis, xi_star, scene)[0]: .3f}  (< 0 means collision)")

    for iters in (20, 100, 300):
        res = sf.run_filter(basis, xi_star, np.zeros(sf.OBS_DIM), scene, sf.WarmStart(0.5, 0.5), initial, iters,
                            margin=0.2)
        clear = sf.min_clearance(basis, res.xi, scene)[0]
        y = Trajectory.from_xi(basis, res.xi.value).waypoints[0, :, 1]
        print(f"after {iters:3d} iterations  clearance {clear: .3f}, residual {res.residuals[-1, 0]:.1e}, "
              f"max lateral offset {y.max() - 4.0:.2f} m")


if __name__ == "__main__":
    main()
