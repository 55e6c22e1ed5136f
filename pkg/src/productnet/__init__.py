"""Human-in-the-loop product dataset curation.

Per-leaf active-learning local models speed up binary annotation; a
multi-modal fusion classifier trained on the accumulating gold labels produces
product embeddings that power the next annotation round.
"""

__version__ = "0.1.0"
