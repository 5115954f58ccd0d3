"""Decentralized gossip-SGD training with certified data removal.

Subpackages/modules:
    topology  - communication graphs and doubly stochastic mixing matrices
    models    - convex loss families, derivatives, analytic constants
    data      - loaders, synthetic data, partitioning, deletion requests
    dpsgd     - the synchronous decentralized training engine
    unlearn   - Newton corrective updates, noise calibration, flooding
    verify    - retrain oracle, bound checks, membership inference
    config    - run configuration schema and builders
    pipeline  - on-disk experiment stages
    cli       - command-line entry points
"""

__version__ = "0.1.0"

from ._kernels import ACTIVE_BACKEND

__all__ = ["ACTIVE_BACKEND", "__version__"]
