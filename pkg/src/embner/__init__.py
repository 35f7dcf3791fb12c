"""Named-entity induction from raw text and pre-trained word embeddings.

Pipeline: binary K-means seeding, Gaussian HMM span detection, heuristic
span repair, deep-autoencoding GMM type induction, and a CRF tagger refined
by a reinforcement-learned instance selector.
"""

__version__ = "0.1.0"
