"""Learning a score for unlabeled data from side information.

A variational encoder maps each instance to a diagonal Gaussian; a side
information head, a mutual-information score head and a triplet loss over
the square-root skew-geometric Jensen-Shannon distance shape that latent
space.
"""

__version__ = "0.1.0"
