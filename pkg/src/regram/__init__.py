"""Graph-based real-estate appraisal: transaction and community graphs, an
attention model with a dynamic kernel-mixture head, baselines and a CLI."""

__version__ = "0.1.0"
