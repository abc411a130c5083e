"""Distributed hybrid rendering: client-side rasterization and shading with
server-traced shadow visibility streamed over lossy datagrams."""

__version__ = "0.1.0"
