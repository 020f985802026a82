"""Variable-length trajectory prediction feeding a potential-field MPC planner for highway merging."""

__version__ = "0.1.0"
