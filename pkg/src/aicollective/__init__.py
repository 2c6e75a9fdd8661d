"""Agent collectives: a cocktail-party protocol, a sentence game and a public goods game."""

__version__ = "0.1.0"
