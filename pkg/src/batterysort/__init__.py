"""Transfer-learning battery-type classifier, experiment harness and sorting-line simulator."""

__version__ = "0.1.0"
