"""Blockchain-empowered federated edge learning simulator with gradient compression.

Submodules: ``model`` and ``compression`` (worker side), ``consensus``
(Proof-of-Verifying), ``ledger`` (subchains, anchors, trades), ``netsim``
(discrete-event network), ``adversary`` (attacks), ``federation`` and
``experiment`` (end-to-end runs), ``cli``.
"""

__version__ = "0.1.0"
