"""Tree partitions, weighted-rectangle functions, and the counterexample machinery
showing that fine partitions need not give convergent conditional expectations."""

__version__ = "0.1.0"
