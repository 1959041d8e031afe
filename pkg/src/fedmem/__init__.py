"""fedmem: federated learning with per-client nearest-neighbor memories (kNN-Per)."""

__version__ = "0.1.0"
