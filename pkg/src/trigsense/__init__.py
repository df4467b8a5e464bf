"""trigsense: sensitivity-guided backdoor trigger placement toolkit."""

__version__ = "0.1.0"
