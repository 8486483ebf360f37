"""Object-centric scene decomposition with an instance-colouring stick-breaking process."""

__version__ = "0.1.0"
