"""Zero-label cross-system log anomaly detection.

Target-system log sequences are routed by semantic similarity to a source
system: familiar ("General") sequences go to a small meta-trained GRU
detector, unfamiliar ("Proprietary") ones to an LLM prompted with labelled
neighbours retrieved from the General set.
"""

__version__ = "0.1.0"
