"""Built-in network cases."""
