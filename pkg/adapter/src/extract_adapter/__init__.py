"""extract_adapter: bridges QA models to the calibqa record format."""

__version__ = "0.1.0"
