"""Desk-scale interactive world model pipeline.

Synthetic action-labeled data, a block-causal video diffusion backbone,
few-step distillation, and a real-time action-steered streaming server,
all sized to run on a single CPU.
"""

__version__ = "0.1.0"
