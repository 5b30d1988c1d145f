"""Filter-differentiated ensembles of small networks, with attacks and certification."""

__version__ = "0.1.0"
