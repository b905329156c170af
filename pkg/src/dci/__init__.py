"""Distributed deployment infrastructure for component assemblies.

A domain manager keeps the node registry, naming service and home finder;
node agents host servers, containers, homes and component instances; the
assembly machine turns a descriptor into a sequence of node calls and can
undo it again.
"""

__version__ = "0.1.0"
