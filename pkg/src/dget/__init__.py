"""Peer-to-peer grid middleware for strongly mobile multithreaded entities.

The package is organised around a small stack-machine instruction set:
programs are parsed (`dget.ir`), instrumented for migration (`dget.instrument`),
executed deterministically (`dget.vm`), checkpointed and restored
(`dget.snapshot`), and hosted by networked nuclei (`dget.nucleus`) that
discover each other over a gossip overlay (`dget.overlay`) and authenticate
with time-limited identities (`dget.authz`).
"""

__version__ = "0.1.0"
