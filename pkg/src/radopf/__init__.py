"""AC optimal power flow by radial partitioning and consensus ADMM."""

__version__ = "0.1.0"
