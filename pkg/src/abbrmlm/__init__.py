"""Pinyin-abbreviation to Chinese character conversion with a letter-mask masked LM."""

__version__ = "0.1.0"
