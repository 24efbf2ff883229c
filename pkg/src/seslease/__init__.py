"""Network-secure offer making for a DER aggregator with a storage lease option."""
__version__ = "0.1.0"
