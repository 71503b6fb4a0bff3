"""Task-adaptive tone-mapping of radiometric thermal infrared frames.

Pipeline: raw counts -> absolute temperature -> sinusoidal thermal
embeddings -> learned per-channel convex compression to a 3-channel image,
plus classical 8-bit baselines and the metrics used to compare them.
"""

__version__ = "0.1.0"
