"""Max-margin regularised Bayesian hierarchical mixture clustering.

Submodules: ``model`` (types and generative process), ``randkit``
(distribution primitives), ``margin`` (hinge machinery), ``mcmc`` (the
sampler), ``vi`` (variational inference), ``metrics`` (hierarchy scores),
``io`` (file formats) and ``cli`` (command line front door).
"""

from .model import Dataset, Hyperparams, PathAssignment, Tree

__all__ = ["Dataset", "Hyperparams", "PathAssignment", "Tree"]
__version__ = "0.1.0"
