"""Video Box Annotator - semi-automatic bounding-box annotation from sparse labels."""

__version__ = "0.3.0"
