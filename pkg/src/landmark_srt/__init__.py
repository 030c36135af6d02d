"""Landmark detector training supervised by optical-flow registration and multi-view triangulation."""
__version__ = "0.1.0"
