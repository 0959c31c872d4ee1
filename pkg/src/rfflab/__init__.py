"""Cross-receiver RF fingerprinting: synthetic impairment data, a
disentangling CNN (RIEI), federated training with one-bit uplinks, and an
experiment harness."""

__version__ = "0.1.0"
