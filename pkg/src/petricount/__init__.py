"""Colony counting toolkit: filtering pipeline, detection metrics, dilution math, review store."""

__version__ = "0.1.0"
