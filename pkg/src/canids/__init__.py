"""Two-stage CAN bus intrusion detection with a hierarchical federated-learning simulator."""

__version__ = "0.1.0"
