"""Figure rendering for training-curve and coordinate-check CSVs."""

from .csvio import SchemaError, aggregate_curves, read_coordcheck, read_curves
from .figures import FigureSpec, render_coordcheck, render_curves

__version__ = "0.1.0"
