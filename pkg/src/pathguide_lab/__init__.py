"""pathguide-lab.

Training and analysis toolkit for path-guided recommendation: a linear
softmax guide policy learns to route a simulated user from their history
toward a target item, with step-level reward decomposition, centered and
normalized step rewards, and five policy-gradient estimators.
"""

__version__ = "0.1.0"
__all__ = ["__version__"]
