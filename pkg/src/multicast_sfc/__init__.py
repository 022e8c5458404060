"""Multicast service-chain control: queueing model, max-weight drift-plus-penalty
policy with packet duplication, baselines and experiment harness."""

__version__ = "0.1.0"
