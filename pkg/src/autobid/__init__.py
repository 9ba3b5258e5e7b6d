"""Safe, efficient exploration for iterative offline RL in budget-paced auto-bidding."""

__version__ = "0.1.0"
