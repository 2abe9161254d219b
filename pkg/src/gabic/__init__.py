"""Learned image compression with graph-based window attention, on a numpy autodiff engine."""

from .network import GabicModel, ModelConfig, PAPER_LAMBDAS, TOY_CONFIG

__version__ = "0.1.0"

__all__ = ["GabicModel", "ModelConfig", "PAPER_LAMBDAS", "TOY_CONFIG", "__version__"]
