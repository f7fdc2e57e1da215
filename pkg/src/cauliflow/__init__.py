"""Phoneme-duration models for non-attentive TTS.

Three duration models over one corpus format: a deterministic L2
regressor, the same regressor conditioned on predicted phrase breaks,
and a conditional normalizing flow with temperature-controlled sampling
and speech/pause-rate control — plus the objective evaluation suite and
a synthetic-corpus harness with exact oracles.
"""

__version__ = "0.1.0"
