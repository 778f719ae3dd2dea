"""SE(3)-invariant energy model for protein-ligand binding affinity.

Submodules:
    autodiff   reverse-mode AD engine with a differentiable backward pass
    frames     PCA frame construction, pocket selection, contact lists
    model      encoder + pairwise interaction energy head
    losses     coordinate noising, score matching, combined objective
    data       dataset I/O, label capping, splits, synthetic generator
    train      Adam, schedule, training loop, checkpoints
    metrics    affinity metrics, evaluation, latency benchmark
    cli        command-line entry point
"""

__version__ = "0.1.0"
