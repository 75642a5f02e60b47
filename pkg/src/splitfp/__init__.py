"""Split learning with adversarial-example fingerprints.

Modules: ``engine`` (numpy layers and SGD), ``data`` (IDX and synthetic
datasets), ``wire``/``protocol`` (framed client/server training),
``fingerprint`` (FGSM fingerprints), ``trainer`` (embedding and
verification), ``attacks`` (label inference, pruning), ``cli``.
"""

__version__ = "0.1.0"
