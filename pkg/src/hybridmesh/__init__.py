"""Direct volume-to-mesh prediction of fixed-topology cardiac meshes."""

__version__ = "0.1.0"
