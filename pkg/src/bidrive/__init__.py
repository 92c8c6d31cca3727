"""Brain-inspired end-to-end driving: perception, decision, simulator, tooling."""

__version__ = "0.1.0"
