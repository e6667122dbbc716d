"""Unsupervised physical system identification from video.

Learns the physical constants and per-frame object states of interacting
systems (springs, gravity, bouncing balls, an actuated pendulum) from raw
pixels, then uses the identified model for long-horizon video prediction
and vision-based model-predictive control.
"""

__version__ = "0.1.0"
