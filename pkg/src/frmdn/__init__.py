"""Flow-based recurrent mixture density networks.

A recurrent backbone emits per-step mixture parameters, an invertible
coupling stack transforms the targets, and the joint negative
log-likelihood (mixture term plus log-determinant term) is minimized.
Sampling runs the flow in reverse; a linear controller can be trained
with CMA-ES inside model-generated rollouts.
"""

__version__ = "0.1.0"
