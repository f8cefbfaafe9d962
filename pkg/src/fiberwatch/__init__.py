"""fiberwatch: event recognition toolkit for distributed fiber-optic vibration sensing.

Covers the full desk-scale pipeline: synthetic multi-channel intensity
streams for 7 signal classes, stream framing and adaptation, decision
statistics and feature blobs, a three-member convolutional ensemble with
threshold/vote/fusion rules, training with self-relabeling, quality
metrics, feature-space analysis (PCA, t-SNE, spanning tree), differential
evolution architecture search, and signal-event track formation.
"""

SAMPLE_RATE_HZ = 1666
NYQUIST_HZ = SAMPLE_RATE_HZ / 2.0
CLASS_COUNT = 7
ADC_FULL_SCALE = 32767

__version__ = "0.1.0"
