"""Temporally controlled music generation on toy audio latents.

Pipeline: synthetic corpus -> fixed codec with residual vector quantization
-> flow-matching vector field with chord/melody/audio/drum/in-painting
controls -> adaptive ODE sampling with multi-source guidance -> objective
adherence metrics.
"""

__version__ = "0.1.0"
