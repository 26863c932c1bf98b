"""Binary text sentiment CNN with switchable activations and class-weighted loss."""

__version__ = "0.1.0"
