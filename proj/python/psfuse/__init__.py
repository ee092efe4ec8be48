"""Bayesian fusion of point and areal spatial data under preferential sampling."""

from ._psfuse import *  # noqa: F401,F403
from ._psfuse import __version__  # noqa: F401
