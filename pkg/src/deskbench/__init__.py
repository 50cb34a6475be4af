"""deskbench: a desk-scale, multi-objective benchmarking harness.

Runs standardized, reproducible benchmark studies for text classification:
declarative configs -> hyperparameter search -> training -> multi-objective
metric accounting -> robustness evaluation -> result publishing -> comparative
meta-analysis.
"""

__version__ = "0.1.0"
