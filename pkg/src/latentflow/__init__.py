"""Latent flow layer distillation toolkit.

Replaces a contiguous block of transformer layers with a single learned
velocity-field layer, trained by flow matching, flow walking, or a hybrid of
the two, with optimal-transport diagnostics for choosing which layers to
replace and an evaluation harness against skip/regression baselines.
"""

__version__ = "0.1.0"
