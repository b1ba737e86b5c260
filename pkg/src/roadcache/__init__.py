"""Highway edge-caching simulator.

Vehicles crossing roadside-unit (RSU) coverage zones train small latent
diffusion models against neighbor knowledge held in RSU caches, upload
content recommendation lists, and the RSUs run a mobility-aware cache
replacement policy.  The harness measures cache hit percentage, request
latency, and communication overhead against baseline policies.
"""

__version__ = "0.1.0"
