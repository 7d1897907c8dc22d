"""Decentralized population-based training coordinated through a shared directory.

Submodules are imported explicitly (``from pbtlab import workspace``) so that
lightweight protocol code can be used without pulling in numpy-heavy trainers.
"""

__version__ = "0.1.0"
