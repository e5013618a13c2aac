"""conformal-survival - lower predictive bounds for survival times under Type I censoring"""

__version__ = "0.1.0"
