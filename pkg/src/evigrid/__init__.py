"""Evidence-token grounding for video question answering, with a small numpy
autograd engine, preference-pair synthesis and evaluation metrics."""

__version__ = "0.1.0"
