"""Deep heterogeneous graph convolutional networks on a small numpy autodiff engine."""
__version__ = "0.1.0"
