"""Budget-aware partial multi-label annotation workbench.

Core pieces:

- ``atam.data``        label matrices with provenance, budget ledger, co-occurrence graph
- ``atam.annotators``  oracle / noisy / human annotator abstraction
- ``atam.sampler``     salient-label active querying loop and the random baseline
- ``atam.model``       feature branch + label-graph convolution branch, fused into logits
- ``atam.temperature`` adaptive per-cell temperature, pseudo-label selection, fallback
- ``atam.losses``      weighted focal losses and the mixed training objective
- ``atam.metrics``     micro-averaged overall precision / recall / F1 / F2
- ``atam.trainer``     warmup -> alternate -> post-fill training schedule
- ``atam.synth``       deterministic synthetic dataset generator with planted co-occurrence
- ``atam.experiments`` the four desk-scale studies (budget, noise, sampling, proportion)
- ``atam.service``     FastAPI annotation service (the human-in-the-loop frontend API)
"""

__version__ = "0.1.0"
