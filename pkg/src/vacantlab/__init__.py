"""Monte Carlo laboratory for vacant sets of Wiener sausages and Brownian interlacements."""
__version__ = "0.1.0"
