"""Deep dynamical models learned from pixels, with latent-space model-predictive control.

Modules
-------
numkit      L-BFGS, finite-difference gradients, seeded random streams
model       auto-encoder + NARX predictor parameters, forward passes, DDM1 files
training    joint cost and gradient, PCA initialization, dataset/PCA files
mpc         receding-horizon planner in feature space, epsilon-greedy actions
envs        pixel-only pendulum and moving-tile simulators, PGM export
experiment  adaptive MPC learning loop, greedy evaluation, tile study
config      key = value config files
cli         command-line front end
"""

__version__ = "0.1.0"
