"""Self-transforming encoder-decoder for gaze and head redirection.

Subpackages cover the rotation algebra (:mod:`sted.rotor`), the synthetic
face corpus (:mod:`sted.synthdata`), the networks (:mod:`sted.model`),
training objectives (:mod:`sted.losses`), the training loop
(:mod:`sted.trainer`), evaluation protocols (:mod:`sted.evaluation`) and
the command line interface (:mod:`sted.cli`).
"""

__version__ = "0.1.0"
