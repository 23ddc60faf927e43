"""Lane merge coordination testbed: simulated connected vehicles, a V2X
message gateway, data fusion, a learned traffic orchestrator and a KPI
pipeline, all runnable on loopback from one CLI."""

__version__ = "0.1.0"
