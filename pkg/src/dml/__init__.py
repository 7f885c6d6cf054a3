"""Deep mutual learning for cohorts of small networks."""

__version__ = "0.1.0"
