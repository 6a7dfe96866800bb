"""Douglas-Rachford splitting for continual learning with a Gaussian latent prior.

Modules
-------
diffcore     dense tensors with reverse-mode autodiff, Adam, finite differences
divergences  KL and Renyi divergences between diagonal Gaussians
model        Gaussian-latent encoder/decoder classifier and prior propagation
drs          the splitting loop, proximal steps and a quadratic reference
tasks        task streams, dataset loaders and batching
metrics      accuracy matrix, ACC/BWT/FWT, forgetting and the drift bound
experiment   run configuration, the task loop, baselines and sweeps
cli          the ``drscl`` command
"""

__version__ = "0.1.0"
