"""Reference external skill server for the "aharness-skill/1" protocol.

Deliberately self-contained: the noise arithmetic is reimplemented here
rather than imported from the host runtime, so the cross-process parity
suite is an honest conformance check on the wire contract.
"""

from .server import ServerConfig, serve

__all__ = ["ServerConfig", "serve"]
