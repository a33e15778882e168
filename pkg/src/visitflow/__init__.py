"""Visitor-flow forecasting, spatial clustering statistics and GeoShapley attribution."""
__version__ = "0.1.0"
