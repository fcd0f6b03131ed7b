""" Network-constrained V2X value stacking with rolling-horizon scheduling. """

__version__ = "0.1.0"
