"""Number-unit analysis workbench for small LSTM language models.

Submodules are imported on demand; importing the package itself is cheap
and does not touch numpy, so the CLI can pin BLAS threads first.
"""
__version__ = "0.1.0"
