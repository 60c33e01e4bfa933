"""Conditional radiance-field eye prior.

Learns a disentangled (subject x gaze x light) prior over eye appearance,
reconstructs eyes from sparse views by latent optimization plus
finetuning, re-renders them from arbitrary target cameras with preserved
gaze labels, and trains/evaluates a gaze regressor on the synthesized
images.
"""

__version__ = "0.1.0"
