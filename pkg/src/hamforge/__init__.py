"""hamforge: discovery of abstract-machine hierarchies on a blocks world."""

__version__ = "0.1.0"
