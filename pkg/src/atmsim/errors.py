"""Shared exception types."""


class ContractError(ValueError):
    """An operation was called outside its stated contract."""


class OrderingError(ContractError):
    """Timestamps or epochs moved backwards."""
