"""Desk-scale model of a workflow-set AIGC inference system.

The core pieces are a multi-producer ring buffer over an abstract one-sided
memory fabric and a deterministic discrete-event simulation of proxies,
staged workflow instances, a node manager and a replicated result store.
"""

__version__ = "0.1.0"
