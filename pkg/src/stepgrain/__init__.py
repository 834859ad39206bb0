"""Step-grained reinforcement learning for multi-step tool use."""
__version__ = "0.1.0"
