"""mecaps: capsule network engine with squeeze-excitation attention,
stochastic spatial pooling, EM routing, and a reconstruction decoder."""

__version__ = "0.1.0"
